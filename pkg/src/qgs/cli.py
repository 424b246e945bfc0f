"""Command-line entry point: generate / train / eval / ablate / bench.

All randomness derives from the config seed (overridable with --seed); with
--threads 1 (the default) two identical invocations produce byte-identical
metric CSVs. Log verbosity comes from the QGS_LOG env var (e.g. DEBUG, INFO).
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_DATA_FORMAT = 4

_EPILOG = """\
exit codes:
  0  success
  1  unexpected error
  2  config error (unknown key, invalid value)
  3  missing input file (config, dataset, checkpoint)
  4  malformed dataset/checkpoint file

environment:
  QGS_LOG       log level (DEBUG, INFO, WARNING; default WARNING)
  QGS_NO_NUMBA  set to 1 to force the pure-numpy kernel backend

{keys}
"""


def _set_thread_env(threads):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))


def build_parser(key_help=""):
    parser = argparse.ArgumentParser(
        prog="qgs",
        description="Query-conditioned generative search ranking, desk scale.",
        epilog=_EPILOG.format(keys=key_help),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("generate", "generate a synthetic session dataset"),
        ("train", "train one model variant; emits checkpoint + metrics CSV"),
        ("eval", "evaluate a checkpoint; emits AUC/GAUC JSON"),
        ("ablate", "run the ablation matrix; emits a per-variant CSV"),
        ("bench", "encoder latency scaling and streaming benchmarks"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file (defaults used if omitted)")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=1)
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
    return parser


def _resolve(args):
    from .config import load_config

    if args.config and not Path(args.config).exists():
        raise FileNotFoundError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.generator = dataclasses.replace(cfg.generator, rng_seed=args.seed)
    cfg.train = dataclasses.replace(cfg.train, threads=args.threads)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .config import resolve_text

    (out / "resolved_config").write_text(resolve_text(cfg))
    return cfg, out


def _load_sessions(cfg):
    from .datagen import generate_dataset, read_dataset

    if cfg.dataset_path:
        if not Path(cfg.dataset_path).exists():
            raise FileNotFoundError(f"dataset not found: {cfg.dataset_path}")
        return read_dataset(cfg.dataset_path)
    return generate_dataset(cfg.generator)


def cmd_generate(cfg, out):
    from .datagen import generate_dataset, write_dataset

    sessions = generate_dataset(cfg.generator)
    path = out / "dataset.qgsd"
    write_dataset(sessions, path)
    print(f"wrote {len(sessions)} sessions to {path}")
    return EXIT_OK


def cmd_train(cfg, out):
    from .checkpoint import save_checkpoint
    from .trainer import train, write_metrics_csv

    sessions = _load_sessions(cfg)
    result = train(cfg.train, sessions, cfg.generator, cfg.model)
    ckpt = out / "model.qgsc"
    save_checkpoint(result.model.state_dict(), ckpt)
    write_metrics_csv(out / "metrics.csv", cfg.train.variant, cfg.train.seed, result.curves)
    print(f"trained {cfg.train.variant}: auc={result.final_auc:.4f} "
          f"gauc={result.final_gauc:.4f}; checkpoint at {ckpt}")
    return EXIT_OK


def cmd_eval(cfg, out, checkpoint):
    from .checkpoint import load_checkpoint
    from .config import apply_variant
    from .model import QGSModel
    from .trainer import evaluate, split_dataset

    if not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    sessions = _load_sessions(cfg)
    _, eval_set = split_dataset(sessions, cfg.train.eval_fraction)
    model = QGSModel(apply_variant(cfg.model, cfg.train.variant), cfg.generator,
                     seed=cfg.train.seed)
    model.load_state_dict(load_checkpoint(checkpoint))
    auc, gauc = evaluate(model, eval_set, cfg.generator, seed=cfg.train.seed + 555)
    payload = {"auc": auc, "gauc": gauc, "num_requests": len(eval_set)}
    (out / "eval.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload))
    return EXIT_OK


def cmd_ablate(cfg, out):
    from .trainer import run_ablation_matrix, train, write_ablation_csv

    sessions = _load_sessions(cfg)
    rows = run_ablation_matrix(cfg.train, sessions, cfg.generator, cfg.model,
                               cfg.ablate.variants)
    for n_layers, sess_len in cfg.ablate.scaling:
        gcfg = dataclasses.replace(cfg.generator, session_len=int(sess_len))
        mcfg = dataclasses.replace(cfg.model, num_layers=int(n_layers))
        from .datagen import generate_dataset

        data = sessions if sess_len == cfg.generator.session_len else generate_dataset(gcfg)
        result = train(cfg.train, data, gcfg, mcfg)
        rows.append({
            "variant": f"scaling_N{n_layers}_L{sess_len}",
            "gauc": result.final_gauc,
            "auc": result.final_auc,
            "mean_epoch_wall_ms": sum(s.wall_ms for s in result.curves) / len(result.curves),
            "loss_infonce": result.curves[-1].loss_infonce,
        })
    write_ablation_csv(out / "ablation.csv", rows)
    for row in rows:
        print(f"{row['variant']}: gauc={row['gauc']:.4f} auc={row['auc']:.4f}")
    return EXIT_OK


def cmd_bench(cfg, out):
    from .bench import bench_encoder, bench_stream, emit_bench_csv

    result = bench_encoder(cfg.bench, seed=cfg.train.seed)
    emit_bench_csv(result, out / "bench.csv")
    stream = bench_stream(cfg.bench, seed=cfg.train.seed)
    with open(out / "bench_stream.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["position", "step_ms", "state_bytes"])
        for pos, ms, nbytes in zip(stream.positions, stream.step_ms, stream.state_bytes):
            w.writerow([pos, f"{ms:.6f}", nbytes])
    for variant, slope in result.slopes.items():
        print(f"{variant}: log-log slope {slope:.3f}")
    print(f"stream: slope {stream.slope:.3e} ms/pos, mean step {stream.mean_step_ms:.4f} ms")
    return EXIT_OK


def main(argv=None):
    logging.basicConfig(level=os.environ.get("QGS_LOG", "WARNING").upper())
    from .config import ConfigError, default_help_text

    parser = build_parser(default_help_text())
    args = parser.parse_args(argv)
    _set_thread_env(args.threads)
    from .checkpoint import CheckpointError
    from .datagen import DatasetFormatError

    try:
        cfg, out = _resolve(args)
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg, out)
        if args.command == "bench":
            return cmd_bench(cfg, out)
        raise AssertionError(f"unreachable command {args.command}")
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: missing-file: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (DatasetFormatError, CheckpointError) as e:
        print(f"error: data-format: {e}", file=sys.stderr)
        return EXIT_DATA_FORMAT
    except Exception as e:  # noqa: BLE001 - single machine-parsable line
        print(f"error: internal: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
