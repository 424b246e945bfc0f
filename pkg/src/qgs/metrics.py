"""Ranking metrics: tie-aware AUC and per-request GAUC."""

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def compute_auc(scores, labels):
    """Mann-Whitney AUC with tie-averaged ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def compute_gauc(scores, labels, request_ids):
    """Impression-weighted mean of per-request AUCs.

    Requests lacking both classes are skipped; returns (gauc, num_skipped).
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    request_ids = np.asarray(request_ids)
    total = 0.0
    weight = 0
    skipped = 0
    for rid in np.unique(request_ids):
        sel = request_ids == rid
        try:
            auc = compute_auc(scores[sel], labels[sel])
        except MetricError:
            skipped += 1
            continue
        n = int(sel.sum())
        total += n * auc
        weight += n
    if weight == 0:
        raise MetricError("no scorable request (every request skipped)")
    return total / weight, skipped
