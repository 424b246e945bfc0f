"""Dense-tensor substrate with reverse-mode differentiation.

Small define-by-run tape over numpy arrays: each op records a backward
closure on its output node; ``Tensor.backward()`` walks the graph in reverse
topological order. Every op validates that its output is finite and raises
:class:`NumericsError` otherwise. Training runs in float32; gradient checks
rebuild the same graph in float64.
"""

import numpy as np

from . import kernels

NORM_EPS = 1e-6


class NumericsError(ValueError):
    """Non-finite value produced by a tensor op."""


class ShapeError(NumericsError):
    """Incompatible operand shapes."""


def _as_array(data, dtype=None):
    # Always copy so tensors never alias caller-owned memory.
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    return np.array(arr, dtype=dtype)


def _check_finite(arr, opname):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {opname}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        _check_finite(self.data, "tensor init")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise NumericsError("backward() requires a scalar output")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def _make(data, parents, backward, opname):
    _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    # Reduce a broadcast gradient back to the original operand shape.
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def constant(data, dtype=None):
    return Tensor(data, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}")

    def bwd(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd, "add")


def sub(a, b):
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} vs {b.shape}")

    def bwd(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), bwd, "sub")


def mul(a, b):
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} vs {b.shape}")

    def bwd(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd, "mul")


def scale(a, c):
    c = a.data.dtype.type(c)
    data = a.data * c

    def bwd(g):
        a._accum(g * c)

    return _make(data, (a,), bwd, "scale")


def matmul(a, b):
    """a: (..., k) @ b: (k, n). Leading dims of ``a`` are flattened."""
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    a2 = a.data.reshape(-1, a.shape[-1])
    data = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

    def bwd(g):
        g2 = g.reshape(-1, b.shape[1])
        a._accum((g2 @ b.data.T).reshape(a.shape))
        b._accum(a2.T @ g2)

    return _make(data, (a, b), bwd, "matmul")


def bmm_nt(a, b):
    """Batched a @ b^T: (B, L, D) x (B, M, D) -> (B, L, M)."""
    data = np.einsum("bld,bmd->blm", a.data, b.data, optimize=True)

    def bwd(g):
        a._accum(np.einsum("blm,bmd->bld", g, b.data, optimize=True))
        b._accum(np.einsum("blm,bld->bmd", g, a.data, optimize=True))

    return _make(data, (a, b), bwd, "bmm_nt")


def bmm(a, b):
    """Batched matmul: (B, L, M) x (B, M, D) -> (B, L, D)."""
    data = np.einsum("blm,bmd->bld", a.data, b.data, optimize=True)

    def bwd(g):
        a._accum(np.einsum("bld,bmd->blm", g, b.data, optimize=True))
        b._accum(np.einsum("blm,bld->bmd", a.data, g, optimize=True))

    return _make(data, (a, b), bwd, "bmm")


def pair_logits(z, v):
    """(B, T, D) x (B, T, D) -> (T, B, B) similarity logits per position."""
    data = np.einsum("btd,ctd->tbc", z.data, v.data, optimize=True)

    def bwd(g):
        z._accum(np.einsum("tbc,ctd->btd", g, v.data, optimize=True))
        v._accum(np.einsum("tbc,btd->ctd", g, z.data, optimize=True))

    return _make(data, (z, v), bwd, "pair_logits")


def concat(tensors, axis=-1):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)

    return _make(data, tuple(tensors), bwd, "concat")


def slice_axis(a, axis, start, stop):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accum(full)

    return _make(data, (a,), bwd, "slice_axis")


def reshape(a, shape):
    data = a.data.reshape(shape)

    def bwd(g):
        a._accum(g.reshape(a.shape))

    return _make(data, (a,), bwd, "reshape")


def gather_rows(table, ids):
    """Embedding lookup: table (V, D) indexed by integer array ids (...,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"gather_rows: id out of range [0, {table.shape[0]}) "
            f"(got min {ids.min()}, max {ids.max()})"
        )
    data = table.data[ids]

    def bwd(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accum(acc)

    return _make(data, (table,), bwd, "gather_rows")


# ---------------------------------------------------------------------------
# nonlinearities and reductions

def sigmoid(a):
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a._accum(g * data * (1.0 - data))

    return _make(data, (a,), bwd, "sigmoid")


def silu(a):
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def bwd(g):
        a._accum(g * sig * (1.0 + a.data * (1.0 - sig)))

    return _make(data, (a,), bwd, "silu")


def relu(a):
    data = np.maximum(a.data, 0)

    def bwd(g):
        a._accum(g * (a.data > 0))

    return _make(data, (a,), bwd, "relu")


def exp(a):
    data = np.exp(a.data)

    def bwd(g):
        a._accum(g * data)

    return _make(data, (a,), bwd, "exp")


def log(a):
    data = np.log(a.data)

    def bwd(g):
        a._accum(g / a.data)

    return _make(data, (a,), bwd, "log")


def tsum(a):
    data = np.asarray(a.data.sum())

    def bwd(g):
        a._accum(np.broadcast_to(g, a.shape).astype(a.dtype))

    return _make(data, (a,), bwd, "sum")


def mean_all(a):
    n = a.data.size
    data = np.asarray(a.data.mean())

    def bwd(g):
        a._accum(np.broadcast_to(g / n, a.shape).astype(a.dtype))

    return _make(data, (a,), bwd, "mean")


def masked_mean(a, mask):
    """Mean of entries where boolean ``mask`` is True."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise NumericsError("masked_mean over an empty mask")
    w = mask.astype(a.dtype) / n
    data = np.asarray((a.data * w).sum())

    def bwd(g):
        a._accum(g * w)

    return _make(data, (a,), bwd, "masked_mean")


def rmsnorm(a, gain, eps=NORM_EPS):
    """Per-vector y = gain * x / sqrt(mean(x^2) + eps) over the last axis."""
    d = a.shape[-1]
    if d == 0:
        raise ShapeError("rmsnorm: zero-length last dimension")
    if gain.shape != (d,):
        raise ShapeError(f"rmsnorm: gain shape {gain.shape} vs last dim {d}")
    ms = np.mean(a.data * a.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xn = a.data * inv
    data = xn * gain.data

    def bwd(g):
        gg = g * gain.data
        # d(x*inv)/dx = inv * (I - x x^T inv^2 / d)
        dot = np.sum(gg * a.data, axis=-1, keepdims=True)
        a._accum(inv * (gg - a.data * (dot * inv * inv / d)))
        gain._accum(_unbroadcast(g * xn, gain.shape))

    return _make(data, (a, gain), bwd, "rmsnorm")


def layernorm(a, gain, bias, eps=NORM_EPS):
    d = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    data = xn * gain.data + bias.data

    def bwd(g):
        gg = g * gain.data
        # standard layernorm backward
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xn).mean(axis=-1, keepdims=True)
        a._accum(inv * (gg - m1 - xn * m2))
        gain._accum(_unbroadcast(g * xn, gain.shape))
        bias._accum(_unbroadcast(g, bias.shape))

    return _make(data, (a, gain, bias), bwd, "layernorm")


def l2_normalize(a, eps=NORM_EPS):
    """x / max(||x||_2, eps) over the last axis."""
    n = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    denom = np.maximum(n, eps)
    data = a.data / denom

    def bwd(g):
        live = (n > eps).astype(a.dtype)
        dot = np.sum(g * data, axis=-1, keepdims=True)
        a._accum(g / denom - live * data * (dot / denom))

    return _make(data, (a,), bwd, "l2_normalize")


def logsumexp(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def bwd(g):
        a._accum(np.expand_dims(g, axis) * soft)

    return _make(data, (a,), bwd, "logsumexp")


def take_diag(a):
    """(T, B, B) -> (T, B) diagonal per leading index."""
    data = np.einsum("tbb->tb", a.data).copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        idx = np.arange(a.shape[1])
        full[:, idx, idx] = g
        a._accum(full)

    return _make(data, (a,), bwd, "take_diag")


def add_const(a, c):
    """Add a non-learnable array (e.g. an additive mask)."""
    c = np.asarray(c, dtype=a.dtype)
    data = a.data + c

    def bwd(g):
        a._accum(_unbroadcast(g, a.shape))

    return _make(data, (a,), bwd, "add_const")


def mul_const(a, c):
    c = np.asarray(c, dtype=a.dtype)
    data = a.data * c

    def bwd(g):
        a._accum(_unbroadcast(g * c, a.shape))

    return _make(data, (a,), bwd, "mul_const")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes through strictly inside the range."""
    data = np.clip(a.data, lo, hi)

    def bwd(g):
        a._accum(g * ((a.data > lo) & (a.data < hi)))

    return _make(data, (a,), bwd, "clip")


def gather_positions(a, idx):
    """Per-row position gather: (B, L, D) indexed by idx (B,) -> (B, D)."""
    idx = np.asarray(idx)
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        a._accum(full)

    return _make(data, (a,), bwd, "gather_positions")


def repeat_rows(a, k):
    """(B, D) -> (B*k, D) by repeating each row k times."""
    B, D = a.shape
    data = np.repeat(a.data, k, axis=0)

    def bwd(g):
        a._accum(g.reshape(B, k, D).sum(axis=1))

    return _make(data, (a,), bwd, "repeat_rows")


def stop_gradient(a):
    return Tensor(a.data.copy())


def dropout(a, rate, rng):
    """Inverted dropout; identity when rate == 0."""
    if rate < 0 or rate >= 1:
        raise NumericsError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul_const(a, keep)


def sigmoid_ce(logits, labels):
    """Elementwise binary cross-entropy on logits, numerically stable."""
    x = logits.data
    y = np.asarray(labels, dtype=x.dtype)
    data = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        logits._accum(g * (1.0 / (1.0 + np.exp(-x)) - y))

    return _make(data, (logits,), bwd, "sigmoid_ce")


def decayed_scan(S, gamma):
    """C_t = gamma * C_{t-1} + S_t along axis -2.

    ``S`` is (B, L, D) or (L, D); ``gamma`` is a scalar tensor or (D,) tensor
    with values in (0, 1].
    """
    squeeze = S.ndim == 2
    s3 = S.data[None] if squeeze else S.data
    D = s3.shape[-1]
    gvec = np.broadcast_to(gamma.data.reshape(-1), (D,)) if gamma.data.size in (1, D) else None
    if gvec is None:
        raise ShapeError(f"decayed_scan: gamma size {gamma.data.size} vs D={D}")
    C = kernels.scan_fwd(s3, gvec)
    data = C[0] if squeeze else C

    def bwd(g):
        g3 = g[None] if squeeze else g
        dS, dgamma = kernels.scan_bwd(np.ascontiguousarray(g3), C, gvec)
        S._accum(dS[0] if squeeze else dS)
        if gamma.data.size == 1:
            gamma._accum(np.asarray(dgamma.sum()).reshape(gamma.shape))
        else:
            gamma._accum(dgamma.reshape(gamma.shape))

    return _make(data, (S, gamma), bwd, "decayed_scan")


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, params, eps=1e-6):
    """Worst relative error between tape gradients and central differences.

    ``f`` rebuilds and returns the scalar loss from scratch; ``params`` are the
    leaf tensors to check (should be float64 for a meaningful result).
    """
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, abs(gflat[i] - num) / denom)
    return worst
