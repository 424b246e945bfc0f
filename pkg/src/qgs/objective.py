"""Query-conditioned next-item prediction objective.

The prediction vector z_t comes from a shared two-layer head over the encoder
output at t concatenated with the *next* query's embedding (fused strictly
after the encoder, so the encoder stays causal). The positive target is the
linear projection of the next pair token; similarities are temperature-scaled
cosines against in-batch, same-position negatives, with padding and item-id
collision masks applied before the InfoNCE log-softmax.
"""

import numpy as np

from . import tensor as T

MASK_VALUE = -1e9  # additive stand-in for -inf; keeps gradient paths alive


class ObjectiveError(ValueError):
    pass


class PredictionHead:
    """Two-layer ReLU MLP shared between training and ranking inference."""

    def __init__(self, d_in, d_hidden, d_out, rng, dtype=np.float32, prefix="head"):
        self.prefix = prefix
        self.w1 = T.parameter(rng.normal(0, 1.0 / np.sqrt(d_in), (d_in, d_hidden)), dtype=dtype)
        self.b1 = T.parameter(np.zeros(d_hidden), dtype=dtype)
        self.w2 = T.parameter(rng.normal(0, 1.0 / np.sqrt(d_hidden), (d_hidden, d_out)), dtype=dtype)
        self.b2 = T.parameter(np.zeros(d_out), dtype=dtype)

    def params(self):
        return {
            f"{self.prefix}.w1": self.w1,
            f"{self.prefix}.b1": self.b1,
            f"{self.prefix}.w2": self.w2,
            f"{self.prefix}.b2": self.b2,
        }

    def __call__(self, x):
        h = T.relu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)


class TargetProjection:
    def __init__(self, d_in, d_z, rng, dtype=np.float32):
        self.w = T.parameter(rng.normal(0, 1.0 / np.sqrt(d_in), (d_in, d_z)), dtype=dtype)

    def params(self):
        return {"tgt.w": self.w}

    def __call__(self, x):
        return T.matmul(x, self.w)


def predict_vector(h, e_sep_next, head):
    """z = head([h || e_sep_next]); pass e_sep_next=None for the item-only
    ablation head."""
    if e_sep_next is None:
        return head(h)
    return head(T.concat([h, e_sep_next], axis=-1))


def similarity(z, v, temperature):
    """Per-position B x B cosine logits: (B, T, D) x (B, T, D) -> (T, B, B)."""
    if temperature <= 0:
        raise ObjectiveError(f"temperature must be > 0, got {temperature}")
    return T.scale(T.pair_logits(T.l2_normalize(z), T.l2_normalize(v)), 1.0 / temperature)


def collision_padding_mask(valid_mask, target_item_ids):
    """Additive mask (T, B, B) combining the padding and collision rules.

    ``valid_mask``: (B, T) bool, True where both position t and target t+1 are
    real. ``target_item_ids``: (B, T) ids of the item at t+1. Off-diagonal
    entry (t, b, c) is masked when column c's target is padding or duplicates
    row b's positive item. The diagonal is never masked.
    """
    B, Tn = valid_mask.shape
    col_pad = ~valid_mask.T[:, None, :]                      # (T, 1, B)
    ids = target_item_ids.T                                  # (T, B)
    collide = ids[:, :, None] == ids[:, None, :]             # (T, B, B)
    mask = np.broadcast_to(col_pad, (Tn, B, B)) | collide
    eye = np.eye(B, dtype=bool)[None]
    mask = mask & ~eye
    return np.where(mask, MASK_VALUE, 0.0)


def infonce_loss(logits, additive_mask, valid_mask):
    """Mean over valid positions of -log softmax at the diagonal."""
    if not valid_mask.any():
        raise ObjectiveError("InfoNCE over an empty set of valid positions")
    masked = T.add_const(logits, additive_mask)
    pos = T.take_diag(masked)                 # (T, B)
    lse = T.logsumexp(masked, axis=-1)        # (T, B)
    per_pos = T.sub(lse, pos)
    return T.masked_mean(per_pos, valid_mask.T)


def infonce_from_batch(z, v, temperature, valid_mask, target_item_ids):
    logits = similarity(z, v, temperature)
    add_mask = collision_padding_mask(valid_mask, target_item_ids)
    return infonce_loss(logits, add_mask, valid_mask)
