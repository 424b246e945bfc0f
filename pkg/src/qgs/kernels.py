"""Hot inner loops of the encoder.

Two kernels dominate runtime: the decayed causal scan (the linear-recurrence
state accumulation) and the causal pointwise-aggregated attention used by the
quadratic reference encoder. Both exist in a numba-jitted version and a pure
numpy version. The active backend is picked at import time from the
``QGS_NO_NUMBA`` env flag and can be switched at runtime with
:func:`set_backend` (the benchmark harness uses this to compare both).

All kernels take float32 or float64 arrays and preserve dtype. ``gamma`` is
always a 1-D array of length D (a scalar decay is broadcast by the caller) so
the per-dimension decay variant shares the same code path.
"""

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("QGS_NO_NUMBA", "") == "1"

try:
    if _FORCE_NUMPY:
        raise ImportError("numba disabled via QGS_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# pure numpy reference implementations

def _scan_fwd_np(S, gamma):
    # S: (B, L, D), gamma: (D,) -> C: (B, L, D)
    C = np.empty_like(S)
    C[:, 0, :] = S[:, 0, :]
    for t in range(1, S.shape[1]):
        C[:, t, :] = gamma * C[:, t - 1, :] + S[:, t, :]
    return C


def _scan_bwd_np(dC, C, gamma):
    # Reverse-mode through C_t = gamma*C_{t-1} + S_t.
    # a_t = dL/dC_t (total) satisfies a_t = dC_t + gamma*a_{t+1}; dS_t = a_t.
    # dgamma_d = sum_t a_{t,d} * C_{t-1,d}.
    B, L, D = dC.shape
    dS = np.empty_like(dC)
    dgamma = np.zeros(D, dtype=dC.dtype)
    a = dC[:, L - 1, :].copy()
    dS[:, L - 1, :] = a
    for t in range(L - 2, -1, -1):
        dgamma += (a * C[:, t, :]).sum(axis=0)
        a = dC[:, t, :] + gamma * a
        dS[:, t, :] = a
    return dS, dgamma


def _silu_np(x):
    return x / (1.0 + np.exp(-x))


def _quad_attn_fwd_np(Q, K, V, inv_scale):
    # Causal pointwise-aggregated attention, one sequence: (L, D) inputs.
    # agg_t = sum_{tau<=t} SiLU(<Q_t, K_tau> * inv_scale) * V_tau
    L = Q.shape[0]
    logits = Q @ K.T * inv_scale
    act = _silu_np(logits)
    act *= np.tri(L, dtype=Q.dtype)
    return act @ V


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True, fastmath=True)
    def _scan_fwd_nb(S, gamma):
        B, L, D = S.shape
        C = np.empty_like(S)
        for b in range(B):
            for d in range(D):
                acc = S[b, 0, d]
                C[b, 0, d] = acc
                g = gamma[d]
                for t in range(1, L):
                    acc = g * acc + S[b, t, d]
                    C[b, t, d] = acc
        return C

    @njit(cache=True, fastmath=True)
    def _scan_bwd_nb(dC, C, gamma):
        B, L, D = dC.shape
        dS = np.empty_like(dC)
        dgamma = np.zeros(D, dtype=dC.dtype)
        for b in range(B):
            for d in range(D):
                g = gamma[d]
                a = dC[b, L - 1, d]
                dS[b, L - 1, d] = a
                acc_g = dC.dtype.type(0.0)
                for t in range(L - 2, -1, -1):
                    acc_g += a * C[b, t, d]
                    a = dC[b, t, d] + g * a
                    dS[b, t, d] = a
                dgamma[d] += acc_g
        return dS, dgamma

    @njit(cache=True, fastmath=True)
    def _quad_attn_fwd_nb(Q, K, V, inv_scale):
        L, D = Q.shape
        out = np.zeros_like(Q)
        for t in range(L):
            for tau in range(t + 1):
                dot = 0.0
                for d in range(D):
                    dot += Q[t, d] * K[tau, d]
                x = dot * inv_scale
                a = x / (1.0 + np.exp(-x))
                for d in range(D):
                    out[t, d] += a * V[tau, d]
        return out


_BACKENDS = {"numpy": (_scan_fwd_np, _scan_bwd_np, _quad_attn_fwd_np)}
if HAVE_NUMBA:
    _BACKENDS["numba"] = (_scan_fwd_nb, _scan_bwd_nb, _quad_attn_fwd_nb)

_active = "numba" if HAVE_NUMBA else "numpy"


def set_backend(name):
    """Select the kernel backend ("numba" or "numpy")."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {sorted(_BACKENDS)}")
    _active = name


def get_backend():
    return _active


def available_backends():
    return sorted(_BACKENDS)


def scan_fwd(S, gamma):
    """Decayed causal scan: C_t = gamma * C_{t-1} + S_t over axis 1."""
    S = np.ascontiguousarray(S)
    gamma = np.ascontiguousarray(gamma, dtype=S.dtype)
    return _BACKENDS[_active][0](S, gamma)


def scan_bwd(dC, C, gamma):
    """Gradients of the decayed scan: returns (dS, dgamma)."""
    dC = np.ascontiguousarray(dC)
    C = np.ascontiguousarray(C, dtype=dC.dtype)
    gamma = np.ascontiguousarray(gamma, dtype=dC.dtype)
    return _BACKENDS[_active][1](dC, C, gamma)


def quad_attn_fwd(Q, K, V, inv_scale):
    """Causal SiLU-activated pointwise aggregation for one (L, D) sequence."""
    Q = np.ascontiguousarray(Q)
    K = np.ascontiguousarray(K, dtype=Q.dtype)
    V = np.ascontiguousarray(V, dtype=Q.dtype)
    return _BACKENDS[_active][2](Q, K, V, Q.dtype.type(inv_scale))
