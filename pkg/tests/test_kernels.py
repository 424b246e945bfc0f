import subprocess
import sys

import numpy as np
import pytest

from qgs import kernels


needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba unavailable")


@pytest.fixture
def restore_backend():
    prev = kernels.get_backend()
    yield
    kernels.set_backend(prev)


def test_scan_fwd_matches_recurrence():
    rng = np.random.default_rng(0)
    S = rng.normal(size=(2, 17, 5))
    gamma = rng.uniform(0.1, 0.99, size=5)
    C = kernels.scan_fwd(S, gamma)
    expect = S[:, 0].copy()
    np.testing.assert_allclose(C[:, 0], expect)
    for t in range(1, 17):
        expect = gamma * expect + S[:, t]
        np.testing.assert_allclose(C[:, t], expect, rtol=1e-12)


@needs_numba
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(dtype, restore_backend):
    tol = 1e-5 if dtype == np.float32 else 1e-10
    rng = np.random.default_rng(1)
    S = rng.normal(size=(3, 40, 8)).astype(dtype)
    gamma = rng.uniform(0.5, 0.99, size=8).astype(dtype)
    dC = rng.normal(size=S.shape).astype(dtype)
    Q, K, V = (rng.normal(size=(30, 8)).astype(dtype) for _ in range(3))

    results = {}
    for backend in kernels.available_backends():
        kernels.set_backend(backend)
        C = kernels.scan_fwd(S, gamma)
        results[backend] = (C, kernels.scan_bwd(dC, C, gamma), kernels.quad_attn_fwd(Q, K, V, 0.125))

    a, b = results["numpy"], results["numba"]
    np.testing.assert_allclose(a[0], b[0], atol=tol)
    np.testing.assert_allclose(a[1][0], b[1][0], atol=tol)
    np.testing.assert_allclose(a[1][1], b[1][1], atol=tol * 100)  # dgamma sums over B*L terms
    np.testing.assert_allclose(a[2], b[2], atol=tol)


def test_quad_attn_is_causal():
    rng = np.random.default_rng(2)
    Q, K, V = (rng.normal(size=(12, 4)) for _ in range(3))
    base = kernels.quad_attn_fwd(Q, K, V, 0.25)
    K2, V2 = K.copy(), V.copy()
    K2[7:] += 10.0
    V2[7:] -= 10.0
    pert = kernels.quad_attn_fwd(Q, K2, V2, 0.25)
    np.testing.assert_array_equal(base[:7], pert[:7])
    assert not np.allclose(base[7:], pert[7:])


def test_unknown_backend_rejected():
    with pytest.raises(ValueError, match="unknown kernel backend"):
        kernels.set_backend("fortran")


def test_env_flag_forces_numpy_backend():
    code = (
        "import os; os.environ['QGS_NO_NUMBA'] = '1';"
        "from qgs import kernels;"
        "assert not kernels.HAVE_NUMBA;"
        "assert kernels.get_backend() == 'numpy';"
        "assert kernels.available_backends() == ['numpy']"
    )
    subprocess.run([sys.executable, "-c", code], check=True)
