"""Deterministic Adagrad training loop, evaluation, and the ablation driver."""

import csv
import dataclasses
import logging
import time

import numpy as np

from .config import ModelConfig, TrainConfig, apply_variant
from .datagen import GeneratorConfig
from .metrics import compute_auc, compute_gauc
from .model import QGSModel, SessionBatch

log = logging.getLogger("qgs.trainer")

ADAGRAD_EPS = 1e-10

METRICS_HEADER = ["variant", "seed", "epoch", "loss_infonce", "loss_ctr", "auc", "gauc", "wall_ms"]


class DivergenceError(RuntimeError):
    """Training loss went non-finite; carries the last good state."""

    def __init__(self, epoch, state):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch
        self.last_good_state = state


class Adagrad:
    def __init__(self, params: dict, lr=0.01, eps=ADAGRAD_EPS):
        self.params = params
        self.lr = lr
        self.eps = eps
        self.accum = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, debug_check=False):
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad
            acc = self.accum[name]
            before = acc.copy() if debug_check else None
            acc += g * g
            if debug_check and (acc < before).any():
                raise AssertionError(f"adagrad accumulator decreased for {name}")
            t.data -= (self.lr * g / (np.sqrt(acc) + self.eps)).astype(t.dtype)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


@dataclasses.dataclass
class EpochStats:
    loss_infonce: float
    loss_ctr: float
    auc: float
    gauc: float
    wall_ms: float


@dataclasses.dataclass
class TrainResult:
    model: QGSModel
    curves: list          # EpochStats per epoch
    final_auc: float
    final_gauc: float


def split_dataset(sessions, eval_fraction):
    n_eval = max(1, int(len(sessions) * eval_fraction))
    return sessions[:-n_eval], sessions[-n_eval:]


def evaluate(model: QGSModel, sessions, gen_cfg, seed, batch_size=64):
    """AUC over all candidates and impression-weighted GAUC per request."""
    scores, labels, rids = [], [], []
    for start in range(0, len(sessions), batch_size):
        chunk = sessions[start:start + batch_size]
        batch = SessionBatch.from_sessions(chunk, gen_cfg, seed + start)
        s = model.ranking_scores(batch)
        for i in range(len(chunk)):
            scores.append(s[i])
            labels.append(batch.cand_labels[i])
            rids.append(np.full(s.shape[1], start + i))
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    rids = np.concatenate(rids)
    auc = compute_auc(scores, labels)
    gauc, _ = compute_gauc(scores, labels, rids)
    return auc, gauc


def train(cfg: TrainConfig, dataset, gen_cfg: GeneratorConfig,
          model_cfg: ModelConfig = None, grad_check_mode=False) -> TrainResult:
    """Train one model; deterministic given (cfg, dataset) in single-thread
    mode. Raises DivergenceError with the last good state on NaN loss."""
    model_cfg = apply_variant(model_cfg or ModelConfig(), cfg.variant)
    model = QGSModel(model_cfg, gen_cfg, seed=cfg.seed)
    train_set, eval_set = split_dataset(dataset, cfg.eval_fraction)
    opt = Adagrad(model.params(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed + 1)

    curves = []
    last_good = model.state_dict()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(train_set))
        nce_sum = ctr_sum = 0.0
        n_batches = 0
        for start in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = SessionBatch.from_sessions(
                [train_set[i] for i in idx], gen_cfg, cfg.seed + epoch * 100003 + start
            )
            opt.zero_grad()
            total, parts = model.total_loss(batch, train_mode=True, rng=rng)
            if not np.isfinite(total.item()):
                raise DivergenceError(epoch, last_good)
            total.backward()
            if cfg.grad_clip > 0:
                _clip_grads(opt.params, cfg.grad_clip)
            opt.step(debug_check=grad_check_mode)
            nce_sum += parts["infonce"].item()
            ctr_sum += parts["ctr"].item()
            n_batches += 1
        auc, gauc = evaluate(model, eval_set, gen_cfg, seed=cfg.seed + 555)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        stats = EpochStats(nce_sum / max(1, n_batches), ctr_sum / max(1, n_batches),
                           auc, gauc, wall_ms)
        curves.append(stats)
        last_good = model.state_dict()
        log.info(
            "variant=%s epoch=%d infonce=%.4f ctr=%.4f auc=%.4f gauc=%.4f (%.0f ms)",
            cfg.variant, epoch, stats.loss_infonce, stats.loss_ctr, auc, gauc, wall_ms,
        )
    return TrainResult(model, curves, curves[-1].auc, curves[-1].gauc)


def _clip_grads(params, max_norm):
    total = np.sqrt(sum(float((t.grad ** 2).sum()) for t in params.values()
                        if t.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale


def write_metrics_csv(path, variant, seed, curves):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for epoch, s in enumerate(curves):
            w.writerow([
                variant, seed, epoch,
                f"{s.loss_infonce:.6f}", f"{s.loss_ctr:.6f}",
                f"{s.auc:.6f}", f"{s.gauc:.6f}", f"{s.wall_ms:.3f}",
            ])


def run_ablation_matrix(cfg: TrainConfig, dataset, gen_cfg, model_cfg, variants):
    """Each variant trained on identical data and seeds.

    Returns rows of {variant, gauc, auc, mean_epoch_wall_ms, loss_infonce}.
    """
    rows = []
    for variant in variants:
        vcfg = dataclasses.replace(cfg, variant=variant)
        result = train(vcfg, dataset, gen_cfg, model_cfg)
        rows.append({
            "variant": variant,
            "gauc": result.final_gauc,
            "auc": result.final_auc,
            "mean_epoch_wall_ms": float(np.mean([s.wall_ms for s in result.curves])),
            "loss_infonce": result.curves[-1].loss_infonce,
        })
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(
            f, fieldnames=["variant", "gauc", "auc", "mean_epoch_wall_ms", "loss_infonce"]
        )
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v)
                        for k, v in row.items()})
