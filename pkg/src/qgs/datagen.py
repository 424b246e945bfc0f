"""Synthetic query-driven session generator.

Sessions follow a Markov topic chain: with probability ``query_switch_prob``
the topic jumps to a uniformly random *other* topic, otherwise it stays. Each
topic owns a disjoint block of ``items_per_topic`` items and the interacted
item is drawn from ``within_topic_dist`` over that block. Because blocks are
disjoint, H(item | query topic) is exactly the within-topic entropy and the
mutual information between query and item is known in closed form, giving the
training experiments an analytic oracle.
"""

import io
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"QGSD"
VERSION = 1
NUM_CONTEXT_FEATURES = 3  # position fraction, time gap, noisy topic scalar


class DatasetFormatError(ValueError):
    """Malformed dataset file; message carries the byte offset."""


@dataclass
class GeneratorConfig:
    num_topics: int = 8
    items_per_topic: int = 16
    query_switch_prob: float = 0.5
    within_topic: str = "uniform"  # "uniform" or "zipf"
    zipf_exponent: float = 1.1
    session_len: int = 64
    num_sessions: int = 2000
    feature_noise_std: float = 0.5
    rng_seed: int = 0
    # desk-scale extras (not part of the core chain definition)
    min_valid_frac: float = 0.5        # valid_len ~ U[frac*L, L]
    noise_vocab: int = 2               # query text ids per topic
    num_eval_negatives: int = 9        # candidates per request = 1 + this
    proxy_gap: float = 0.7             # mean shift of the clicked item's quality proxy
    proxy_noise: float = 1.0
    per_session_item_perm: bool = False  # per-session permutation of within-topic ranks

    def __post_init__(self):
        if self.num_topics < 1 or self.items_per_topic < 1:
            raise ValueError("num_topics and items_per_topic must be >= 1")
        if self.session_len < 2:
            raise ValueError("session_len must be >= 2")
        if not 0.0 <= self.query_switch_prob <= 1.0:
            raise ValueError("query_switch_prob must be in [0, 1]")
        if self.within_topic not in ("uniform", "zipf"):
            raise ValueError(f"unknown within_topic {self.within_topic!r}")

    @property
    def vocab_size(self):
        return self.num_topics * self.items_per_topic

    @property
    def query_vocab_size(self):
        return self.num_topics * self.noise_vocab

    def within_topic_dist(self):
        m = self.items_per_topic
        if self.within_topic == "uniform":
            return np.full(m, 1.0 / m)
        w = np.arange(1, m + 1, dtype=np.float64) ** (-self.zipf_exponent)
        return w / w.sum()


@dataclass
class Session:
    query_topic_ids: np.ndarray   # (L,) int32
    query_text_ids: np.ndarray    # (L,) int32
    item_ids: np.ndarray          # (L,) int32
    context_features: np.ndarray  # (L, NUM_CONTEXT_FEATURES) float32
    timestamps: np.ndarray        # (L,) float64, strictly increasing
    click_labels: np.ndarray      # (L,) uint8
    valid_len: int

    def __eq__(self, other):
        return (
            isinstance(other, Session)
            and self.valid_len == other.valid_len
            and np.array_equal(self.query_topic_ids, other.query_topic_ids)
            and np.array_equal(self.query_text_ids, other.query_text_ids)
            and np.array_equal(self.item_ids, other.item_ids)
            and np.array_equal(self.context_features, other.context_features)
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.click_labels, other.click_labels)
        )


@dataclass
class OracleStats:
    h_item_given_query: float
    h_item_marginal: float
    mutual_info: float


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def oracle_entropies(cfg: GeneratorConfig) -> OracleStats:
    """Closed-form entropies of the generator's stationary item distribution.

    The symmetric topic chain has a uniform stationary distribution, so the
    marginal item distribution is the uniform topic mixture of the (shared)
    within-topic distribution. With a per-session item permutation these are
    the per-session conditional quantities, which are permutation-invariant.
    """
    within = cfg.within_topic_dist()
    h_cond = _entropy(within)
    marginal = np.tile(within / cfg.num_topics, cfg.num_topics)
    h_marg = _entropy(marginal)
    return OracleStats(h_cond, h_marg, h_marg - h_cond)


def generate_session(cfg: GeneratorConfig, seed: int) -> Session:
    rng = np.random.default_rng(seed)
    k, m, L = cfg.num_topics, cfg.items_per_topic, cfg.session_len
    within = cfg.within_topic_dist()

    if cfg.per_session_item_perm:
        perms = np.stack([rng.permutation(m) for _ in range(k)])
    else:
        perms = np.tile(np.arange(m), (k, 1))

    topics = np.empty(L, dtype=np.int32)
    topics[0] = rng.integers(k)
    for t in range(1, L):
        if k > 1 and rng.random() < cfg.query_switch_prob:
            jump = rng.integers(k - 1)
            topics[t] = jump if jump < topics[t - 1] else jump + 1
        else:
            topics[t] = topics[t - 1]

    ranks = rng.choice(m, size=L, p=within)
    items = (topics * m + perms[topics, ranks]).astype(np.int32)
    text_ids = (topics * cfg.noise_vocab + rng.integers(cfg.noise_vocab, size=L)).astype(np.int32)

    gaps = rng.exponential(1.0, size=L) + 1e-3
    timestamps = np.cumsum(gaps)
    feats = np.empty((L, NUM_CONTEXT_FEATURES), dtype=np.float32)
    feats[:, 0] = np.arange(L, dtype=np.float32) / L
    feats[:, 1] = gaps.astype(np.float32)
    feats[:, 2] = (topics / k + rng.normal(0.0, cfg.feature_noise_std, size=L)).astype(np.float32)

    lo = max(2, int(np.ceil(cfg.min_valid_frac * L)))
    valid_len = int(rng.integers(lo, L + 1))
    labels = np.zeros(L, dtype=np.uint8)
    labels[:valid_len] = 1

    return Session(
        query_topic_ids=topics,
        query_text_ids=text_ids,
        item_ids=items,
        context_features=feats,
        timestamps=timestamps,
        click_labels=labels,
        valid_len=valid_len,
    )


def generate_dataset(cfg: GeneratorConfig):
    return [generate_session(cfg, cfg.rng_seed + i) for i in range(cfg.num_sessions)]


@dataclass
class Request:
    """One scoring request: candidate items for the last valid position."""
    position: int                 # index of the interaction being ranked
    candidate_ids: np.ndarray     # (R+1,) int32, position 0 is the clicked item
    labels: np.ndarray            # (R+1,) uint8
    group_feats: list             # G arrays of shape (R+1, width)
    request_feats: np.ndarray     # request-level raw features for the shared DNN


def build_request(session: Session, cfg: GeneratorConfig, seed: int) -> Request:
    """Candidates for ranking eval: the clicked item plus sampled negatives,
    half from the same topic block (hard) and half from other blocks (easy).
    """
    rng = np.random.default_rng(seed)
    r = session.valid_len - 1
    pos_item = int(session.item_ids[r])
    topic = int(session.query_topic_ids[r])
    m, k = cfg.items_per_topic, cfg.num_topics
    block = np.arange(topic * m, (topic + 1) * m)

    n_neg = cfg.num_eval_negatives
    n_hard = n_neg // 2 if (m > 1 and k > 1) else (n_neg if k == 1 else 0)
    n_easy = n_neg - n_hard
    hard_pool = block[block != pos_item]
    negs = []
    for _ in range(n_hard):
        negs.append(int(rng.choice(hard_pool)))
    other = np.setdiff1d(np.arange(cfg.vocab_size), block)
    for _ in range(n_easy):
        negs.append(int(rng.choice(other)) if other.size else int(rng.choice(hard_pool)))
    cand = np.array([pos_item] + negs, dtype=np.int32)
    labels = np.zeros(len(cand), dtype=np.uint8)
    labels[0] = 1

    hist = session.item_ids[:r]
    n = len(cand)
    g_inter = np.zeros((n, 3), dtype=np.float32)
    for i, c in enumerate(cand):
        where = np.flatnonzero(hist == c)
        g_inter[i, 0] = len(where) / max(1.0, np.sqrt(r)) if r else 0.0
        g_inter[i, 1] = 1.0 / (1.0 + (r - where[-1])) if len(where) else 0.0
        g_inter[i, 2] = 1.0 if len(where) else 0.0

    gap = session.context_features[r, 1]
    g_ctx = np.tile(
        np.array([r / cfg.session_len, gap, session.valid_len / cfg.session_len], dtype=np.float32),
        (n, 1),
    )

    # Quality proxy: noisy score elevated for the clicked item, the synthetic
    # stand-in for engineered relevance/CTR statistics.
    proxy = cfg.proxy_gap * labels + rng.normal(0.0, cfg.proxy_noise, size=n)
    g_qual = np.stack(
        [proxy, rng.normal(0.0, 1.0, size=n)], axis=1
    ).astype(np.float32)

    req_feats = np.array(
        [r / cfg.session_len, gap, session.valid_len / cfg.session_len,
         float(np.mean(session.context_features[:r, 2])) if r else 0.0],
        dtype=np.float32,
    )
    return Request(r, cand, labels, [g_inter, g_ctx, g_qual], req_feats)


GROUP_WIDTHS = (3, 3, 2)
NUM_REQUEST_FEATURES = 4


# ---------------------------------------------------------------------------
# dataset file format: magic "QGSD", version byte, u32 session count, then
# length-prefixed little-endian session records

def _session_bytes(s: Session) -> bytes:
    L = len(s.item_ids)
    buf = io.BytesIO()
    buf.write(struct.pack("<IIi", L, s.valid_len, NUM_CONTEXT_FEATURES))
    buf.write(s.query_topic_ids.astype("<i4").tobytes())
    buf.write(s.query_text_ids.astype("<i4").tobytes())
    buf.write(s.item_ids.astype("<i4").tobytes())
    buf.write(s.context_features.astype("<f4").tobytes())
    buf.write(s.timestamps.astype("<f8").tobytes())
    buf.write(s.click_labels.astype("u1").tobytes())
    return buf.getvalue()


def write_dataset(sessions, path):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BI", VERSION, len(sessions)))
        for s in sessions:
            rec = _session_bytes(s)
            f.write(struct.pack("<I", len(rec)))
            f.write(rec)


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise DatasetFormatError(
            f"truncated file: expected {n} bytes for {what} at byte {f.tell() - len(data)}"
        )
    return data


def read_dataset(path):
    sessions = []
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r} at byte 0")
        version, count = struct.unpack("<BI", _read_exact(f, 5, "header"))
        if version != VERSION:
            raise DatasetFormatError(f"unsupported version {version} at byte 4")
        for i in range(count):
            (rec_len,) = struct.unpack("<I", _read_exact(f, 4, f"record {i} length"))
            rec = _read_exact(f, rec_len, f"record {i} body")
            sessions.append(_parse_session(rec, i))
        trailing = f.read(1)
        if trailing:
            raise DatasetFormatError(f"trailing bytes at byte {f.tell() - 1}")
    return sessions


def _parse_session(rec, index):
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(rec):
            raise DatasetFormatError(
                f"record {index}: truncated {what} at record byte {off}"
            )
        chunk = rec[off:off + n]
        off += n
        return chunk

    L, valid_len, d = struct.unpack("<IIi", take(12, "session header"))
    if d != NUM_CONTEXT_FEATURES:
        raise DatasetFormatError(f"record {index}: unexpected feature width {d}")
    topics = np.frombuffer(take(4 * L, "query_topic_ids"), dtype="<i4")
    texts = np.frombuffer(take(4 * L, "query_text_ids"), dtype="<i4")
    items = np.frombuffer(take(4 * L, "item_ids"), dtype="<i4")
    feats = np.frombuffer(take(4 * L * d, "context_features"), dtype="<f4").reshape(L, d)
    ts = np.frombuffer(take(8 * L, "timestamps"), dtype="<f8")
    labels = np.frombuffer(take(L, "click_labels"), dtype="u1")
    if off != len(rec):
        raise DatasetFormatError(f"record {index}: {len(rec) - off} unparsed bytes")
    return Session(topics.copy(), texts.copy(), items.copy(), feats.copy(),
                   ts.copy(), labels.copy(), int(valid_len))
