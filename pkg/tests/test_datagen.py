import dataclasses

import numpy as np
import pytest

from qgs import datagen
from qgs.datagen import GeneratorConfig


def small_cfg(**kw):
    base = dict(num_topics=4, items_per_topic=8, session_len=32, num_sessions=5)
    base.update(kw)
    return GeneratorConfig(**base)


def test_uniform_conditional_entropy():
    stats = datagen.oracle_entropies(small_cfg(items_per_topic=8))
    assert stats.h_item_given_query == pytest.approx(np.log(8), abs=1e-12)


def test_uniform_marginal_entropy():
    # 4 topics x 8 uniform items: marginal is uniform over 32
    stats = datagen.oracle_entropies(small_cfg(num_topics=4, items_per_topic=8))
    assert stats.h_item_marginal == pytest.approx(np.log(32), abs=1e-12)
    assert stats.mutual_info == pytest.approx(np.log(4), abs=1e-12)


def test_single_topic_zero_mutual_info():
    stats = datagen.oracle_entropies(small_cfg(num_topics=1))
    assert stats.mutual_info == pytest.approx(0.0, abs=1e-12)
    assert stats.h_item_given_query == pytest.approx(stats.h_item_marginal, abs=1e-12)


def test_zipf_entropy_matches_brute_force():
    cfg = small_cfg(within_topic="zipf", zipf_exponent=1.3)
    stats = datagen.oracle_entropies(cfg)
    w = np.arange(1, 9, dtype=np.float64) ** -1.3
    p = w / w.sum()
    h = -(p * np.log(p)).sum()
    assert stats.h_item_given_query == pytest.approx(h, abs=1e-12)
    assert stats.h_item_marginal == pytest.approx(h + np.log(4), abs=1e-12)


def test_zero_switch_prob_constant_topic():
    s = datagen.generate_session(small_cfg(query_switch_prob=0.0), seed=3)
    assert (s.query_topic_ids == s.query_topic_ids[0]).all()


def test_always_switch_never_repeats():
    s = datagen.generate_session(small_cfg(query_switch_prob=1.0), seed=4)
    assert (np.diff(s.query_topic_ids) != 0).all()


def test_items_stay_in_topic_block():
    cfg = small_cfg()
    for seed in range(20):
        s = datagen.generate_session(cfg, seed)
        blocks = s.item_ids // cfg.items_per_topic
        np.testing.assert_array_equal(blocks, s.query_topic_ids)


def test_query_text_encodes_topic():
    cfg = small_cfg(noise_vocab=3)
    s = datagen.generate_session(cfg, seed=5)
    np.testing.assert_array_equal(s.query_text_ids // 3, s.query_topic_ids)


def test_timestamps_strictly_increasing():
    s = datagen.generate_session(small_cfg(), seed=6)
    assert (np.diff(s.timestamps) > 0).all()


def test_session_determinism():
    cfg = small_cfg()
    assert datagen.generate_session(cfg, 7) == datagen.generate_session(cfg, 7)
    assert datagen.generate_session(cfg, 7) != datagen.generate_session(cfg, 8)


def test_switch_frequency_matches_p():
    # over 1e5 transitions, the realized switch rate sits within 0.01 of p
    cfg = GeneratorConfig(
        num_topics=8, items_per_topic=4, query_switch_prob=0.3,
        session_len=100_001, num_sessions=1,
    )
    s = datagen.generate_session(cfg, seed=0)
    rate = float((np.diff(s.query_topic_ids) != 0).mean())
    assert abs(rate - 0.3) < 0.01


def test_conditional_item_distribution():
    # empirical within-topic distribution close to the configured one (L1)
    cfg = GeneratorConfig(
        num_topics=2, items_per_topic=8, within_topic="zipf", zipf_exponent=1.2,
        session_len=100_000, num_sessions=1,
    )
    s = datagen.generate_session(cfg, seed=1)
    want = cfg.within_topic_dist()
    for topic in range(2):
        ranks = s.item_ids[s.query_topic_ids == topic] - topic * 8
        got = np.bincount(ranks, minlength=8) / ranks.size
        assert np.abs(got - want).sum() < 0.02


def test_per_session_permutation_keeps_blocks():
    cfg = small_cfg(per_session_item_perm=True)
    s = datagen.generate_session(cfg, seed=2)
    np.testing.assert_array_equal(s.item_ids // cfg.items_per_topic, s.query_topic_ids)


def test_valid_len_bounds():
    cfg = small_cfg(min_valid_frac=0.5)
    for seed in range(30):
        s = datagen.generate_session(cfg, seed)
        assert 16 <= s.valid_len <= 32
        assert s.click_labels[: s.valid_len].all()
        assert not s.click_labels[s.valid_len:].any()


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(num_topics=0)
    with pytest.raises(ValueError):
        GeneratorConfig(query_switch_prob=1.5)
    with pytest.raises(ValueError):
        GeneratorConfig(within_topic="gaussian")
    with pytest.raises(ValueError):
        GeneratorConfig(session_len=1)


def test_request_structure():
    cfg = small_cfg(num_eval_negatives=9)
    s = datagen.generate_session(cfg, seed=9)
    req = datagen.build_request(s, cfg, seed=9)
    assert req.candidate_ids.shape == (10,)
    assert req.labels.sum() == 1 and req.labels[0] == 1
    assert req.candidate_ids[0] == s.item_ids[s.valid_len - 1]
    assert len(set(req.candidate_ids[1:].tolist()) & {int(req.candidate_ids[0])}) == 0
    assert [g.shape for g in req.group_feats] == [(10, w) for w in datagen.GROUP_WIDTHS]
    assert req.request_feats.shape == (datagen.NUM_REQUEST_FEATURES,)


def test_roundtrip(tmp_path):
    cfg = small_cfg(num_sessions=7)
    sessions = datagen.generate_dataset(cfg)
    path = tmp_path / "d.qgsd"
    datagen.write_dataset(sessions, path)
    back = datagen.read_dataset(path)
    assert back == sessions


def test_roundtrip_empty(tmp_path):
    path = tmp_path / "empty.qgsd"
    datagen.write_dataset([], path)
    assert datagen.read_dataset(path) == []


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.qgsd"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(datagen.DatasetFormatError, match="magic"):
        datagen.read_dataset(path)


def test_truncated_file_names_offset(tmp_path):
    cfg = small_cfg(num_sessions=2)
    path = tmp_path / "t.qgsd"
    datagen.write_dataset(datagen.generate_dataset(cfg), path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(datagen.DatasetFormatError, match=r"byte \d+"):
        datagen.read_dataset(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.qgsd"
    datagen.write_dataset(datagen.generate_dataset(small_cfg(num_sessions=1)), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(datagen.DatasetFormatError, match="trailing"):
        datagen.read_dataset(path)


def test_oracle_permutation_invariant():
    # the entropy oracle does not depend on the per-session permutation flag
    a = datagen.oracle_entropies(small_cfg(per_session_item_perm=False))
    b = datagen.oracle_entropies(small_cfg(per_session_item_perm=True))
    assert dataclasses.asdict(a) == dataclasses.asdict(b)
