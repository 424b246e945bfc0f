import numpy as np
import pytest

from qgs import objective as O
from qgs import tensor as T


def make_head(d_in, d_out, seed=0, dtype=np.float64):
    return O.PredictionHead(d_in, 8, d_out, np.random.default_rng(seed), dtype=dtype)


def test_head_matches_manual_mlp():
    head = make_head(5, 3)
    x = np.random.default_rng(1).normal(size=(4, 5))
    got = head(T.constant(x, dtype=np.float64)).data
    h = np.maximum(x @ head.w1.data + head.b1.data, 0.0)
    want = h @ head.w2.data + head.b2.data
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_head_zero_weights_give_bias():
    head = make_head(5, 3)
    for p in (head.w1, head.w2, head.b1):
        p.data[:] = 0.0
    head.b2.data[:] = 7.0
    out = head(T.constant(np.ones((2, 5)), dtype=np.float64)).data
    np.testing.assert_array_equal(out, np.full((2, 3), 7.0))


def test_predict_vector_uses_next_query():
    head = make_head(8, 4)
    rng = np.random.default_rng(2)
    h = T.constant(rng.normal(size=(2, 5)), dtype=np.float64)
    sep_a = T.constant(rng.normal(size=(2, 3)), dtype=np.float64)
    sep_b = T.constant(rng.normal(size=(2, 3)), dtype=np.float64)
    za = O.predict_vector(h, sep_a, head).data
    zb = O.predict_vector(h, sep_b, head).data
    assert not np.allclose(za, zb)


def test_predict_vector_item_only():
    head = make_head(5, 4)
    h = T.constant(np.random.default_rng(3).normal(size=(2, 5)), dtype=np.float64)
    z = O.predict_vector(h, None, head)
    assert z.shape == (2, 4)


def test_similarity_identical_unit_vectors():
    # cosine 1 at temperature 0.1 gives diagonal logit 10
    z = np.zeros((2, 3, 4))
    z[..., 0] = 5.0  # arbitrary positive scale; cosine is scale-free
    logits = O.similarity(T.constant(z, dtype=np.float64), T.constant(z, dtype=np.float64), 0.1)
    assert logits.shape == (3, 2, 2)
    np.testing.assert_allclose(logits.data, 10.0, rtol=1e-10)


def test_similarity_orthogonal_zero():
    z = np.zeros((1, 1, 4))
    v = np.zeros((1, 1, 4))
    z[..., 0] = 1.0
    v[..., 1] = 1.0
    logits = O.similarity(T.constant(z, dtype=np.float64), T.constant(v, dtype=np.float64), 0.1)
    assert abs(logits.data[0, 0, 0]) < 1e-10


def test_similarity_temperature_validation():
    z = T.constant(np.ones((1, 1, 2)))
    with pytest.raises(O.ObjectiveError, match="temperature"):
        O.similarity(z, z, 0.0)


def test_loss_invariant_to_positive_rescaling():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 5, 6))
    v = rng.normal(size=(3, 5, 6))
    valid = np.ones((3, 5), dtype=bool)
    ids = np.arange(15).reshape(3, 5)
    base = O.infonce_from_batch(
        T.constant(z, dtype=np.float64), T.constant(v, dtype=np.float64), 0.1, valid, ids
    ).data
    scaled = O.infonce_from_batch(
        T.constant(3.7 * z, dtype=np.float64), T.constant(0.2 * v, dtype=np.float64), 0.1, valid, ids
    ).data
    assert abs(base - scaled) < 1e-6


def test_duplicated_batch_collision_gives_zero_loss():
    # a batch of two identical sequences: every off-diagonal negative is the
    # same item as the positive, so the collision mask removes them all
    rng = np.random.default_rng(5)
    z = rng.normal(size=(1, 4, 6))
    v = rng.normal(size=(1, 4, 6))
    z2, v2 = np.repeat(z, 2, axis=0), np.repeat(v, 2, axis=0)
    valid = np.ones((2, 4), dtype=bool)
    ids = np.repeat(np.arange(4)[None], 2, axis=0)
    loss = O.infonce_from_batch(
        T.constant(z2, dtype=np.float64), T.constant(v2, dtype=np.float64), 0.1, valid, ids
    ).data
    assert abs(loss) < 1e-9


def test_single_sequence_zero_loss():
    rng = np.random.default_rng(6)
    z = T.constant(rng.normal(size=(1, 3, 4)), dtype=np.float64)
    v = T.constant(rng.normal(size=(1, 3, 4)), dtype=np.float64)
    loss = O.infonce_from_batch(z, v, 0.1, np.ones((1, 3), dtype=bool), np.arange(3)[None])
    assert abs(loss.data) < 1e-9


def test_two_sequence_hand_case():
    # unit-cosine positives, orthogonal cross pairs, tau=1:
    # per position loss = -log(e / (e + 1))
    z = np.zeros((2, 1, 4))
    v = np.zeros((2, 1, 4))
    z[0, 0, 0] = v[0, 0, 0] = 1.0
    z[1, 0, 1] = v[1, 0, 1] = 1.0
    valid = np.ones((2, 1), dtype=bool)
    ids = np.array([[0], [1]])
    loss = O.infonce_from_batch(
        T.constant(z, dtype=np.float64), T.constant(v, dtype=np.float64), 1.0, valid, ids
    ).data
    want = -np.log(np.e / (np.e + 1.0))
    assert loss == pytest.approx(want, abs=1e-10)


def test_padded_column_probability_negligible():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(2, 3, 4))
    v = rng.normal(size=(2, 3, 4))
    valid = np.ones((2, 3), dtype=bool)
    valid[1, 2] = False  # sequence 1's last target is padding
    ids = np.arange(6).reshape(2, 3)
    logits = O.similarity(T.constant(z, dtype=np.float64), T.constant(v, dtype=np.float64), 0.1)
    masked = logits.data + O.collision_padding_mask(valid, ids)
    # at (t=2, row 0) the padded column 1 must carry ~zero probability
    row = masked[2, 0]
    p = np.exp(row - row.max())
    p /= p.sum()
    assert p[1] < 1e-30


def test_diagonal_never_masked():
    valid = np.zeros((3, 2), dtype=bool)  # everything padded
    ids = np.zeros((3, 2), dtype=np.int64)  # all colliding
    mask = O.collision_padding_mask(valid, ids)
    for t in range(2):
        np.testing.assert_array_equal(np.diag(mask[t]), 0.0)


def test_empty_valid_set_errors():
    z = T.constant(np.ones((1, 2, 3)))
    v = T.constant(np.ones((1, 2, 3)))
    with pytest.raises(O.ObjectiveError, match="valid"):
        O.infonce_from_batch(z, v, 0.1, np.zeros((1, 2), dtype=bool), np.zeros((1, 2), dtype=int))


def test_masked_positions_get_zero_gradient():
    rng = np.random.default_rng(8)
    z = T.parameter(rng.normal(size=(2, 3, 4)), dtype=np.float64)
    v = T.constant(rng.normal(size=(2, 3, 4)), dtype=np.float64)
    valid = np.ones((2, 3), dtype=bool)
    valid[:, 2] = False
    ids = np.arange(6).reshape(2, 3)
    loss = O.infonce_from_batch(z, v, 0.1, valid, ids)
    loss.backward()
    assert (z.grad[:, 2, :] == 0).all()
    assert np.abs(z.grad[:, :2, :]).sum() > 0


def test_loss_bounded_by_log_batch_size():
    # with all negatives live, the loss cannot exceed ln(B) by much at optimum;
    # here just sanity-check it is finite and positive for random inputs
    rng = np.random.default_rng(9)
    z = T.constant(rng.normal(size=(8, 4, 6)), dtype=np.float64)
    v = T.constant(rng.normal(size=(8, 4, 6)), dtype=np.float64)
    valid = np.ones((8, 4), dtype=bool)
    ids = np.arange(32).reshape(8, 4)
    loss = O.infonce_from_batch(z, v, 1.0, valid, ids).data
    assert 0 < loss < np.log(8) + 2.0 / 1.0  # cosine range adds at most 2/tau
