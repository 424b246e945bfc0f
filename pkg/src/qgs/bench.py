"""Latency harness for the encoder complexity and streaming claims.

Times eval-mode forward passes only. Measurement rounds are interleaved
across every (variant, length) cell so a transient host slowdown taxes all
cells roughly equally instead of whichever one was being timed. Rows report
min/median with p10/p90 spread; the log-log slope of runtime against
sequence length is fitted on the per-cell minimum, the sample least
contaminated by scheduler noise. Warmup iterations are excluded. A backend
comparison mode times the numba and pure-numpy kernel paths side by side.
"""

import csv
import platform
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import BenchConfig
from .encoder import Encoder, EncoderConfig


class BenchError(RuntimeError):
    pass


@dataclass
class BenchRow:
    variant: str
    length: int
    min_ms: float
    median_ms: float
    p10_ms: float
    p90_ms: float


@dataclass
class BenchResult:
    rows: list
    slopes: dict  # variant -> fitted log-log slope

    def median(self, variant, length):
        for row in self.rows:
            if row.variant == variant and row.length == length:
                return row.median_ms
        raise KeyError((variant, length))


_VARIANT_MAP = {"linear": "linear", "quadratic": "quadratic_reference"}


def _time_once(fn):
    t0 = time.perf_counter_ns()
    fn()
    return (time.perf_counter_ns() - t0) / 1e6


def bench_encoder(cfg: BenchConfig, seed=0) -> BenchResult:
    variants = list(cfg.variants)
    backends = (
        kernels.available_backends() if cfg.compare_backends else [kernels.get_backend()]
    )
    rng = np.random.default_rng(seed)
    inputs = {L: rng.normal(0, 1, (L, cfg.d_h)).astype(np.float32) for L in cfg.lengths}
    cells = []  # (name, L, backend, encoder, input)
    for variant in variants:
        enc = Encoder(
            EncoderConfig(cfg.num_layers, cfg.d_h, 0.0, _VARIANT_MAP[variant]),
            np.random.default_rng(seed + 1),
        )
        for backend in backends:
            name = variant if len(backends) == 1 else f"{variant}[{backend}]"
            for L in cfg.lengths:
                cells.append((name, L, backend, enc, inputs[L]))

    saved_backend = kernels.get_backend()
    try:
        for name, L, backend, enc, h0 in cells:
            kernels.set_backend(backend)
            for _ in range(cfg.warmup_iters):
                enc.forward_infer(h0)
        samples = {(name, L): [] for name, L, *_ in cells}
        for _ in range(cfg.measured_iters):
            for name, L, backend, enc, h0 in cells:
                kernels.set_backend(backend)
                samples[(name, L)].append(_time_once(lambda: enc.forward_infer(h0)))
    finally:
        kernels.set_backend(saved_backend)

    rows = []
    fit_pts = {}
    for name, L, *_ in cells:
        times = np.array(samples[(name, L)])
        if np.median(times) <= 0.0:
            raise BenchError("timer resolution insufficient even after batching")
        rows.append(BenchRow(
            name, L,
            float(times.min()),
            float(np.median(times)),
            float(np.percentile(times, 10)),
            float(np.percentile(times, 90)),
        ))
        fit_pts.setdefault(name, []).append((L, float(times.min())))
    slopes = {}
    for name, pts in fit_pts.items():
        ls = np.log([p[0] for p in pts])
        ts = np.log([p[1] for p in pts])
        slopes[name] = float(np.polyfit(ls, ts, 1)[0])
    return BenchResult(rows, slopes)


@dataclass
class StreamBenchResult:
    positions: list
    step_ms: list        # median per-step latency at each position
    slope: float         # linear-regression slope of latency vs position
    mean_step_ms: float
    state_bytes: list    # StreamState payload size at each position


def bench_stream(cfg: BenchConfig, seed=0, steps_per_probe=50) -> StreamBenchResult:
    enc = Encoder(
        EncoderConfig(cfg.num_layers, cfg.d_h, 0.0, "linear"),
        np.random.default_rng(seed),
    )
    l_max = max(cfg.stream_positions) + steps_per_probe + 1
    rng = np.random.default_rng(seed + 1)
    tokens = rng.normal(0, 1, (l_max, cfg.d_h)).astype(np.float32)
    state = enc.init_stream(l_max)
    # warmup compile on a throwaway state
    warm = enc.init_stream(4)
    for t in range(3):
        warm.step(tokens[t])

    med_ms = []
    state_bytes = []
    for pos in sorted(cfg.stream_positions):
        while state.position < pos:
            state.step(tokens[state.position])
        times = []
        for _ in range(cfg.measured_iters):
            t0 = time.perf_counter_ns()
            for _ in range(steps_per_probe):
                probe = _clone_state(state)
                probe.step(tokens[probe.position])
            times.append((time.perf_counter_ns() - t0) / 1e6 / steps_per_probe)
        med_ms.append(float(np.median(times)))
        state_bytes.append(sum(c.nbytes for c in state.c))
    positions = sorted(cfg.stream_positions)
    slope = float(np.polyfit(positions, med_ms, 1)[0])
    return StreamBenchResult(positions, med_ms, slope, float(np.mean(med_ms)), state_bytes)


def _clone_state(state):
    import copy

    probe = copy.copy(state)
    probe.c = [c.copy() for c in state.c]
    return probe


def emit_bench_csv(result: BenchResult, path):
    """CSV `variant,L,min_ms,median_ms,p10_ms,p90_ms`; header comment
    documents the timing environment."""
    with open(path, "w", newline="") as f:
        f.write(f"# host={platform.platform()} python={platform.python_version()} "
                f"backend={kernels.get_backend()}\n")
        w = csv.writer(f)
        w.writerow(["variant", "L", "min_ms", "median_ms", "p10_ms", "p90_ms"])
        for row in result.rows:
            w.writerow([
                row.variant, row.length, f"{row.min_ms:.6f}",
                f"{row.median_ms:.6f}", f"{row.p10_ms:.6f}", f"{row.p90_ms:.6f}",
            ])
