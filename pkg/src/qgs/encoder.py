"""Linear-recurrence sequence encoder and its quadratic reference.

Each layer applies RMSNorm, four SiLU projections (Q/K/V/U), element-wise
key-value products accumulated through a decayed causal scan, Q-U dual gating
of the accumulated state, and a residual connection with dropout. There is no
per-layer FFN. The quadratic reference layer keeps the same projections but
aggregates through the full causal SiLU-activated interaction matrix; it
exists for latency and ablation comparison, not numerical equivalence.

Besides the differentiable batch path there is a raw-numpy inference path
(used by the benchmark harness) and a streaming path with constant per-step
cost that carries only the accumulated state per layer.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import NORM_EPS


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    num_layers: int = 2
    d_h: int = 64
    dropout_rate: float = 0.1
    variant: str = "linear"  # "linear" or "quadratic_reference"
    gamma_init: float = 0.95
    per_dim_gamma: bool = False

    def __post_init__(self):
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.variant not in ("linear", "quadratic_reference"):
            raise ValueError(f"unknown encoder variant {self.variant!r}")


GAMMA_LOGIT_MAX = 16.0


def _logit(p):
    return float(np.log(p / (1.0 - p)))


class HstuLayer:
    """Parameters shared by the linear and quadratic layer variants."""

    def __init__(self, d_h, rng, gamma_init=0.95, per_dim_gamma=False, dtype=np.float32):
        s = 1.0 / np.sqrt(d_h)
        self.d_h = d_h
        self.w_q = T.parameter(rng.normal(0, s, (d_h, d_h)), dtype=dtype)
        self.w_k = T.parameter(rng.normal(0, s, (d_h, d_h)), dtype=dtype)
        self.w_v = T.parameter(rng.normal(0, s, (d_h, d_h)), dtype=dtype)
        self.w_u = T.parameter(rng.normal(0, s, (d_h, d_h)), dtype=dtype)
        self.norm_gain = T.parameter(np.ones(d_h), dtype=dtype)
        n_gamma = d_h if per_dim_gamma else 1
        self.decay_logit = T.parameter(np.full(n_gamma, _logit(gamma_init)), dtype=dtype)

    def params(self, prefix):
        return {
            f"{prefix}.w_q": self.w_q,
            f"{prefix}.w_k": self.w_k,
            f"{prefix}.w_v": self.w_v,
            f"{prefix}.w_u": self.w_u,
            f"{prefix}.norm_gain": self.norm_gain,
            f"{prefix}.decay_logit": self.decay_logit,
        }

    def gamma(self):
        # logit clamp keeps gamma strictly inside (0, 1) even in float32,
        # where sigmoid saturates to exactly 1.0 around logit 17
        return T.sigmoid(T.clip(self.decay_logit, -GAMMA_LOGIT_MAX, GAMMA_LOGIT_MAX))

    def projections(self, H):
        rn = T.rmsnorm(H, self.norm_gain)
        return (
            T.silu(T.matmul(rn, self.w_q)),
            T.silu(T.matmul(rn, self.w_k)),
            T.silu(T.matmul(rn, self.w_v)),
            T.silu(T.matmul(rn, self.w_u)),
        )


def layer_forward(H, layer, train_mode=False, rng=None, dropout_rate=0.0):
    """Linear variant: O_t = Q_t * C_t * U_t with the decayed scan state."""
    Q, K, V, U = layer.projections(H)
    S = T.mul(K, V)
    C = T.decayed_scan(S, layer.gamma())
    O = T.mul(T.mul(Q, C), U)
    if train_mode and dropout_rate > 0:
        O = T.dropout(O, dropout_rate, rng)
    return T.add(H, O)


def quadratic_reference_layer(H, layer, train_mode=False, rng=None, dropout_rate=0.0):
    """O(L^2) reference: causal SiLU-activated aggregation, RMS-normalized
    before the U gate. Shares the layer's projection parameters."""
    Q, K, V, U = layer.projections(H)
    squeeze = H.ndim == 2
    if squeeze:
        Q, K, V, U = (T.reshape(x, (1,) + x.shape) for x in (Q, K, V, U))
    L = Q.shape[1]
    logits = T.scale(T.bmm_nt(Q, K), 1.0 / layer.d_h)
    act = T.mul_const(T.silu(logits), np.tri(L, dtype=H.dtype.type))
    agg = T.bmm(act, V)
    unit = T.constant(np.ones(layer.d_h), dtype=H.dtype)
    O = T.mul(T.rmsnorm(agg, unit), U)
    if squeeze:
        O = T.reshape(O, O.shape[1:])
    if train_mode and dropout_rate > 0:
        O = T.dropout(O, dropout_rate, rng)
    return T.add(H, O)


def recurrence_direct(S, gamma):
    """O(L^2) oracle for the decayed scan: C_t = sum_{tau<=t} gamma^(t-tau) S_tau.

    ``S`` is a numpy array (L, D) or (B, L, D); ``gamma`` a scalar or (D,).
    """
    S = np.asarray(S)
    squeeze = S.ndim == 2
    if squeeze:
        S = S[None]
    B, L, D = S.shape
    gamma = np.broadcast_to(np.asarray(gamma, dtype=S.dtype).reshape(-1), (D,))
    C = np.zeros_like(S)
    for t in range(L):
        for tau in range(t + 1):
            C[:, t, :] += gamma ** (t - tau) * S[:, tau, :]
    return C[0] if squeeze else C


class Encoder:
    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.layers = [
            HstuLayer(cfg.d_h, rng, cfg.gamma_init, cfg.per_dim_gamma, dtype)
            for _ in range(cfg.num_layers)
        ]

    def params(self):
        p = {}
        for i, layer in enumerate(self.layers):
            p.update(layer.params(f"enc.{i}"))
        return p

    def forward(self, H0, train_mode=False, rng=None):
        """(..., L, d_h) -> (..., L, d_h) through all layers."""
        step = (
            layer_forward if self.cfg.variant == "linear" else quadratic_reference_layer
        )
        H = H0
        for i, layer in enumerate(self.layers):
            try:
                H = step(H, layer, train_mode, rng, self.cfg.dropout_rate)
            except T.NumericsError as e:
                bad = _first_bad_position(H.data)
                raise EncoderError(f"layer {i}: {e} (last finite input position {bad})")
        return H

    # ------------------------------------------------------------------
    # raw-numpy inference path (benchmark / streaming oracle)

    def forward_infer(self, H0):
        """Eval-mode forward on a plain (L, d_h) numpy array.

        The four projections run as one fused GEMM: at L in the thousands the
        separate-matmul path is memory-bound and times superlinearly.
        """
        H = np.ascontiguousarray(H0)
        quad = self.cfg.variant == "quadratic_reference"
        for layer in self.layers:
            rn = _rmsnorm_np(H, layer.norm_gain.data)
            W = np.concatenate(
                [layer.w_q.data, layer.w_k.data, layer.w_v.data, layer.w_u.data],
                axis=1,
            )
            Q, K, V, U = np.split(_silu_np(rn @ W), 4, axis=-1)
            if quad:
                agg = kernels.quad_attn_fwd(Q, K, V, 1.0 / layer.d_h)
                O = _rmsnorm_np(agg, None) * U
            else:
                gamma = _gamma_np(layer)
                C = kernels.scan_fwd((K * V)[None], gamma)[0]
                O = Q * C * U
            H = H + O
        return H

    def init_stream(self, l_max, dtype=np.float32):
        return StreamState(self, l_max, dtype)


def _gamma_np(layer):
    g = np.clip(layer.decay_logit.data, -GAMMA_LOGIT_MAX, GAMMA_LOGIT_MAX)
    gamma = 1.0 / (1.0 + np.exp(-g))
    if gamma.size == 1:
        gamma = np.full(layer.d_h, gamma[0], dtype=g.dtype)
    return gamma


def _rmsnorm_np(x, gain, eps=NORM_EPS):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    y = x * inv
    return y if gain is None else y * gain


def _silu_np(x):
    return x / (1.0 + np.exp(-x))


def _projections_np(H, layer):
    rn = _rmsnorm_np(H, layer.norm_gain.data)
    return (
        _silu_np(rn @ layer.w_q.data),
        _silu_np(rn @ layer.w_k.data),
        _silu_np(rn @ layer.w_v.data),
        _silu_np(rn @ layer.w_u.data),
    )


class StreamState:
    """Per-layer accumulated state enabling O(1)-per-step encoding.

    Single-owner: not shareable across threads mid-sequence.
    """

    def __init__(self, encoder, l_max, dtype=np.float32):
        if encoder.cfg.variant != "linear":
            raise EncoderError("streaming requires the linear variant")
        self.encoder = encoder
        self.l_max = l_max
        self.position = 0
        self.c = [np.zeros(encoder.cfg.d_h, dtype=dtype) for _ in encoder.layers]

    def step(self, h0_t):
        """Consume one input token; returns the top-layer output for it."""
        if self.position >= self.l_max:
            raise EncoderError(f"stream position {self.position} >= L_max {self.l_max}")
        h = np.ascontiguousarray(h0_t)
        for i, layer in enumerate(self.encoder.layers):
            row = h[None, :]
            q, k, v, u = _projections_np(row, layer)
            gamma = _gamma_np(layer)
            self.c[i] = gamma * self.c[i] + (k * v)[0]
            h = h + (q[0] * self.c[i] * u[0])
        self.position += 1
        return h


def _first_bad_position(arr):
    finite = np.isfinite(np.asarray(arr)).all(axis=-1)
    bad = np.argwhere(~finite)
    return bad[0].tolist() if bad.size else "n/a"
