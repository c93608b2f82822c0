"""Command-line entry point.

Commands:
    train      run one experiment; write trace.csv, router_log.jsonl,
               stats/*.csv and run_meta.json into --out
    ablate     run the arm x seed grid; write ablation.csv and run_meta.json
    stats      recompute stats/*.csv from an existing router_log.jsonl
    gradcheck  finite-difference gradient verification; exit 0 iff it passes

Exit codes: 0 success, 1 acceptance failure, 2 numeric failure, 3 I/O or
configuration failure. All CSV output uses '\\n' line endings, '.' decimals
and 17-significant-digit floats. Per-step wall-clock columns are the only
CSV fields that vary between identical reruns.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__
from ._alloc import tune_runtime
from .config import ExperimentConfig, config_from_dict, parse_config
from .gradcheck import run_gradcheck
from .metrics import RunStats, read_router_log, write_router_log, write_stats_csvs, _fmt
from .moe import ConfigError
from .train import ABLATION_COLUMNS, NonFiniteLossError, ablation_suite, run_experiment

EXIT_OK = 0
EXIT_ACCEPTANCE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

META_NAME = "run_meta.json"


def _log(verbose: bool, message: str) -> None:
    if verbose:
        print(message, file=sys.stderr)


def _load_config(args) -> ExperimentConfig:
    config = parse_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        config = config_from_dict({**config.to_dict(), "seed": args.seed})
    return config


def _prepare_out_dir(out: str, force: bool) -> Path:
    out_dir = Path(out)
    if (out_dir / META_NAME).exists() and not force:
        raise FileExistsError(
            f"{out_dir} holds a completed run ({META_NAME} present); use --force to overwrite"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_meta(out_dir: Path, config: ExperimentConfig, command: str, extra: dict | None = None) -> None:
    meta = {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
    }
    if extra:
        meta.update(extra)
    with open(out_dir / META_NAME, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_trace_csv(path: Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "task_loss", "balance_loss", "step_time_ms"])
        for step in range(trace.n_steps):
            writer.writerow(
                [
                    step,
                    _fmt(trace.task_loss[step]),
                    _fmt(trace.balance_loss[step]),
                    _fmt(trace.step_time_ms[step]),
                ]
            )


def command_train(args) -> int:
    config = _load_config(args)
    out_dir = _prepare_out_dir(args.out, args.force)
    _log(args.verbose, f"training arm={config.arm} seed={config.seed} steps={config.steps}")
    trace, stats, records = run_experiment(config)
    _write_trace_csv(out_dir / "trace.csv", trace)
    write_router_log(records, out_dir / "router_log.jsonl")
    write_stats_csvs(stats, out_dir / "stats")
    _write_meta(
        out_dir,
        config,
        "train",
        extra={"total_train_time_s": sum(trace.step_time_ms) / 1000.0},
    )
    _log(args.verbose, f"wrote {out_dir}")
    return EXIT_OK


def command_ablate(args) -> int:
    config = _load_config(args)
    out_dir = _prepare_out_dir(args.out, args.force)
    _log(args.verbose, f"ablation grid: arms={list(config.arms)} seeds={list(config.seeds)}")
    rows = ablation_suite(config, workers=max(1, args.workers))
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row["arm"],
                    row["seed"],
                    *(
                        "" if row[col] is None else _fmt(row[col])
                        for col in ABLATION_COLUMNS[2:-1]
                    ),
                    row["status"],
                ]
            )
    _write_meta(out_dir, config, "ablate")
    for row in rows:
        _log(args.verbose, f"  {row['arm']} seed={row['seed']}: {row['status']}")
    any_ok = any(row["status"] == "ok" for row in rows)
    return EXIT_OK if any_ok else EXIT_NUMERIC


def command_stats(args) -> int:
    records = read_router_log(args.router_log)
    if not records:
        raise ConfigError(f"{args.router_log} holds no router records")
    stats = RunStats.from_records(records)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = write_stats_csvs(stats, out_dir / "stats")
    _log(args.verbose, f"recomputed {len(files)} stats files from {len(records)} records")
    return EXIT_OK


def command_gradcheck(args) -> int:
    result = run_gradcheck(seed=args.seed if args.seed is not None else 0)
    print(result.report())
    if not result.passed:
        print(f"offending blocks: {', '.join(result.failing_blocks())}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltdr",
        description="Distribution-aware mixture-of-experts routing experiments",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--force", action="store_true", help="overwrite a completed run")
        p.add_argument("-v", "--verbose", action="store_true")

    p_train = sub.add_parser("train", help="run one experiment")
    common(p_train)
    p_train.set_defaults(func=command_train)

    p_ablate = sub.add_parser("ablate", help="run the arm x seed ablation grid")
    common(p_ablate)
    p_ablate.add_argument(
        "--workers", type=int, default=1, help="processes for fanning out cells"
    )
    p_ablate.set_defaults(func=command_ablate)

    p_stats = sub.add_parser("stats", help="recompute statistics from a router log")
    p_stats.add_argument("router_log", help="router_log.jsonl from a training run")
    p_stats.add_argument("--out", required=True, help="output directory")
    p_stats.add_argument("-v", "--verbose", action="store_true")
    p_stats.set_defaults(func=command_stats)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--seed", type=int, help="case seed (default 0)")
    p_grad.add_argument("-v", "--verbose", action="store_true")
    p_grad.set_defaults(func=command_gradcheck)

    return parser


def main(argv=None) -> int:
    tune_runtime()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        print(json.dumps(exc.snapshot, indent=2, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
