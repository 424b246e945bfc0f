"""Query-item pair token construction and input projection.

Each interaction becomes x_t = [f_t || e_cls] where e_cls is a joint
query-item embedding and f_t the embedded context features; the query-level
embedding e_sep is held out for the prediction head and never enters the
encoder input. A deterministic id-embedding front end stands in for a text
encoder; tables can be overridden from an external checkpoint file (keys
"ext_cls" for items, "ext_sep" for queries), in which case they are frozen.
"""

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint


def _init(rng, shape, scale, dtype):
    return T.parameter(rng.normal(0.0, scale, size=shape), dtype=dtype)


class SemanticEmbedder:
    """Learnable item/query tables plus a one-layer mixer producing e_cls."""

    def __init__(self, item_vocab, query_vocab, d_b, rng, dtype=np.float32):
        self.item_vocab = item_vocab
        self.query_vocab = query_vocab
        self.d_b = d_b
        self.item_table = _init(rng, (item_vocab, d_b), 0.1, dtype)
        self.query_table = _init(rng, (query_vocab, d_b), 0.1, dtype)
        self.w_mix = _init(rng, (2 * d_b, d_b), 1.0 / np.sqrt(2 * d_b), dtype)
        self.b_mix = T.parameter(np.zeros(d_b), dtype=dtype)
        self.frozen_tables = False

    def params(self):
        p = {"embed.w_mix": self.w_mix, "embed.b_mix": self.b_mix}
        if not self.frozen_tables:
            p["embed.item_table"] = self.item_table
            p["embed.query_table"] = self.query_table
        return p

    def load_external(self, path):
        ext = load_checkpoint(path)
        for key in ("ext_cls", "ext_sep"):
            if key not in ext:
                raise KeyError(f"external embedding file missing {key!r}")
        if ext["ext_cls"].shape != (self.item_vocab, self.d_b):
            raise ValueError(
                f"ext_cls shape {ext['ext_cls'].shape} != {(self.item_vocab, self.d_b)}"
            )
        if ext["ext_sep"].shape != (self.query_vocab, self.d_b):
            raise ValueError(
                f"ext_sep shape {ext['ext_sep'].shape} != {(self.query_vocab, self.d_b)}"
            )
        dtype = self.item_table.dtype
        self.item_table = T.constant(ext["ext_cls"], dtype=dtype)
        self.query_table = T.constant(ext["ext_sep"], dtype=dtype)
        self.frozen_tables = True

    def embed(self, query_ids, item_ids):
        """Returns (e_cls, e_sep); e_cls depends on both ids, e_sep on the
        query only."""
        q = T.gather_rows(self.query_table, query_ids)
        d = T.gather_rows(self.item_table, item_ids)
        e_cls = T.add(T.matmul(T.concat([q, d], axis=-1), self.w_mix), self.b_mix)
        return e_cls, q


class FeatureEmbed:
    """Linear embed of the raw numeric context features to width d_f."""

    def __init__(self, d_raw, d_f, rng, dtype=np.float32):
        self.w = _init(rng, (d_raw, d_f), 1.0 / np.sqrt(d_raw), dtype)
        self.b = T.parameter(np.zeros(d_f), dtype=dtype)

    def params(self):
        return {"feat.w": self.w, "feat.b": self.b}

    def __call__(self, raw):
        return T.add(T.matmul(raw, self.w), self.b)


def build_pair_token(f_emb, e_cls):
    """x = [f || e_cls], feature slice first."""
    return T.concat([f_emb, e_cls], axis=-1)


class InputProjection:
    """h0_t = W_proj x_t + p_t with a learnable positional table."""

    def __init__(self, d_in, d_h, l_max, rng, dtype=np.float32):
        self.l_max = l_max
        self.w_proj = _init(rng, (d_in, d_h), 1.0 / np.sqrt(d_in), dtype)
        self.pos = _init(rng, (l_max, d_h), 0.02, dtype)

    def params(self):
        return {"proj.w": self.w_proj, "proj.pos": self.pos}

    def __call__(self, x, start=0):
        """Project (..., L, d_in) pair tokens at positions start..start+L-1."""
        L = x.shape[-2]
        if start + L > self.l_max:
            raise IndexError(f"position {start + L - 1} >= L_max {self.l_max}")
        p = T.slice_axis(self.pos, 0, start, start + L)
        return T.add(T.matmul(x, self.w_proj), p)
