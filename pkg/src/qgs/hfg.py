"""Heterogeneous feature-group fusion.

Feature groups are projected to a shared width, a stop-gradient projection of
the shared-DNN vector is appended as a global context token, and the token
sequence runs through one bidirectional multi-head pointwise-aggregated
attention block with its FFN retained (unlike the sequence encoder). The
pooled output joins the candidate embedding, the shared-DNN vector, and the
sequence representation in a LayerNorm'd tower producing the CTR logit.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .objective import PredictionHead


@dataclass
class HFGConfig:
    group_widths: tuple = (3, 3, 2)
    d_e: int = 16
    num_heads: int = 8
    ffn_mult: int = 4
    d_o: int = 128

    def __post_init__(self):
        if self.d_e % self.num_heads != 0:
            raise ValueError(f"d_e={self.d_e} not divisible by {self.num_heads} heads")

    @property
    def num_groups(self):
        return len(self.group_widths)


def _lin(rng, d_in, d_out, dtype):
    return (
        T.parameter(rng.normal(0, 1.0 / np.sqrt(d_in), (d_in, d_out)), dtype=dtype),
        T.parameter(np.zeros(d_out), dtype=dtype),
    )


class HFGAttention:
    def __init__(self, cfg: HFGConfig, d_dnn, rng, dtype=np.float32):
        self.cfg = cfg
        d_e = cfg.d_e
        self.group_proj = [_lin(rng, w, d_e, dtype) for w in cfg.group_widths]
        self.ctx_proj = _lin(rng, d_dnn, d_e, dtype)
        self.w_q, _ = _lin(rng, d_e, d_e, dtype)
        self.w_k, _ = _lin(rng, d_e, d_e, dtype)
        self.w_v, _ = _lin(rng, d_e, d_e, dtype)
        self.w_u, _ = _lin(rng, d_e, d_e, dtype)
        self.w_o, self.b_o = _lin(rng, d_e, d_e, dtype)
        self.norm_gain = T.parameter(np.ones(d_e), dtype=dtype)
        self.ffn1 = _lin(rng, d_e, cfg.ffn_mult * d_e, dtype)
        self.ffn2 = _lin(rng, cfg.ffn_mult * d_e, d_e, dtype)
        self.w_out, _ = _lin(rng, d_e, cfg.d_o, dtype)

    def params(self):
        p = {}
        for g, (w, b) in enumerate(self.group_proj):
            p[f"hfg.group{g}.w"] = w
            p[f"hfg.group{g}.b"] = b
        p["hfg.ctx.w"], p["hfg.ctx.b"] = self.ctx_proj
        p.update({
            "hfg.w_q": self.w_q, "hfg.w_k": self.w_k, "hfg.w_v": self.w_v,
            "hfg.w_u": self.w_u, "hfg.w_o": self.w_o, "hfg.b_o": self.b_o,
            "hfg.norm_gain": self.norm_gain,
            "hfg.ffn1.w": self.ffn1[0], "hfg.ffn1.b": self.ffn1[1],
            "hfg.ffn2.w": self.ffn2[0], "hfg.ffn2.b": self.ffn2[1],
            "hfg.w_out": self.w_out,
        })
        return p

    def project_groups(self, group_feats):
        """Per-group affine + ReLU to the unified width d_e."""
        toks = []
        for feats, (w, b) in zip(group_feats, self.group_proj):
            toks.append(T.relu(T.add(T.matmul(feats, w), b)))
        return toks

    def build_token_sequence(self, group_tokens, h_dnn):
        """Stack group tokens plus the stop-gradient global context token.

        ``group_tokens``: list of (B, d_e); ``h_dnn``: (B, d_dnn). Gradient
        flow from the context token back into the shared DNN is severed.
        """
        w, b = self.ctx_proj
        ctx = T.add(T.matmul(T.stop_gradient(h_dnn), w), b)
        rows = [T.reshape(t, (t.shape[0], 1, t.shape[1])) for t in group_tokens + [ctx]]
        return T.concat(rows, axis=1)  # (B, G+1, d_e)

    def attention(self, R):
        """Bidirectional multi-head pointwise-aggregated attention + FFN,
        residual around both sub-blocks. Position-agnostic by construction."""
        cfg = self.cfg
        B, n, d_e = R.shape
        dh = d_e // cfg.num_heads
        rn = T.rmsnorm(R, self.norm_gain)
        Q = T.silu(T.matmul(rn, self.w_q))
        K = T.silu(T.matmul(rn, self.w_k))
        V = T.silu(T.matmul(rn, self.w_v))
        U = T.silu(T.matmul(rn, self.w_u))

        def split(x):  # (B, n, d_e) -> (B*h, n, dh)
            x = T.reshape(x, (B, n, cfg.num_heads, dh))
            # move heads next to batch: einsum-free via reshape after transpose
            return T.reshape(_transpose_heads(x), (B * cfg.num_heads, n, dh))

        logits = T.scale(T.bmm_nt(split(Q), split(K)), 1.0 / dh)
        # fixed 1/(G+1) normalizer keeps magnitudes stable across group counts
        agg = T.scale(T.bmm(T.silu(logits), split(V)), 1.0 / n)
        agg = T.reshape(agg, (B, cfg.num_heads, n, dh))
        agg = T.reshape(_transpose_heads(agg), (B, n, d_e))
        gated = T.mul(agg, U)
        attn_out = T.add(T.matmul(gated, self.w_o), self.b_o)
        x = T.add(R, attn_out)

        (w1, b1), (w2, b2) = self.ffn1, self.ffn2
        ffn = T.add(T.matmul(T.relu(T.add(T.matmul(x, w1), b1)), w2), b2)
        return T.add(x, ffn)

    def pool_project(self, tokens, mask=None):
        """Masked average pooling over tokens, projected to d_o.

        ``mask``: (n,) or (B, n) bool, True = keep; default keeps all.
        """
        B, n, d_e = tokens.shape
        if mask is None:
            mask = np.ones(n, dtype=bool)
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), (B, n))
        counts = mask.sum(axis=1)
        if (counts == 0).any():
            raise ValueError("masked average pooling with all tokens masked")
        w = (mask / counts[:, None]).astype(tokens.dtype)
        pooled = T.reshape(
            T.bmm(T.constant(w[:, None, :], dtype=tokens.dtype), tokens), (B, d_e)
        )
        return T.matmul(pooled, self.w_out)

    def __call__(self, group_feats, h_dnn, mask=None):
        toks = self.project_groups(group_feats)
        R = self.build_token_sequence(toks, h_dnn)
        return self.pool_project(self.attention(R), mask)


def _transpose_heads(x):
    """Swap axes 1 and 2 of a rank-4 tensor."""
    data = np.ascontiguousarray(np.swapaxes(x.data, 1, 2))

    def bwd(g):
        x._accum(np.swapaxes(g, 1, 2))

    return T._make(data, (x,), bwd, "transpose_heads")


class SharedDNN:
    """Two-layer MLP over the request-level raw features."""

    def __init__(self, d_in, width, rng, dtype=np.float32):
        self.l1 = _lin(rng, d_in, width, dtype)
        self.l2 = _lin(rng, width, width, dtype)

    def params(self):
        return {
            "dnn.w1": self.l1[0], "dnn.b1": self.l1[1],
            "dnn.w2": self.l2[0], "dnn.b2": self.l2[1],
        }

    def __call__(self, x):
        h = T.relu(T.add(T.matmul(x, self.l1[0]), self.l1[1]))
        return T.add(T.matmul(h, self.l2[0]), self.l2[1])


class FusionTower:
    """LayerNorm over the fused vector, then a two-layer tower to one logit."""

    def __init__(self, d_in, width, rng, dtype=np.float32):
        self.ln_gain = T.parameter(np.ones(d_in), dtype=dtype)
        self.ln_bias = T.parameter(np.zeros(d_in), dtype=dtype)
        self.mlp = PredictionHead(d_in, width, 1, rng, dtype=dtype, prefix="tower")

    def params(self):
        p = {"tower.ln_gain": self.ln_gain, "tower.ln_bias": self.ln_bias}
        p.update(self.mlp.params())
        return p

    def __call__(self, parts):
        fused = T.concat(parts, axis=-1)
        normed = T.layernorm(fused, self.ln_gain, self.ln_bias)
        out = self.mlp(normed)
        return T.reshape(out, out.shape[:-1])
