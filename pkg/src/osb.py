#!/usr/bin/env python3
"""
ODE Surrogate Bench CLI

Subcommands:
    gen              generate a synthetic CODES-DS dataset
    validate-config  expand a configuration into its task list (dry run)
    train            train every task of a configuration
    bench            train, evaluate and report
    report           evaluate and report an existing run directory

Exit codes: 0 clean, 1 configuration or I/O error, 2 some tasks failed.
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import yaml
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from dataset import DatasetError, describe_dataset, load_dataset, save_dataset
from harness import (
    DATASET_SUFFIX,
    ArtifactIndex,
    BenchmarkConfig,
    ConfigError,
    RunExistsError,
    Task,
    TaskResult,
    data_dir,
    evaluate_run,
    expand_tasks,
    load_index,
    parse_config,
    prepare_run,
    run_tasks,
    snapshot_config,
    with_seed,
    write_index,
)
from odegen import generate_dataset, get_system
from report import build_report, write_report

logger = logging.getLogger("osb")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2
DEFAULT_RUNS_DIR = "runs"

stderr = Console(stderr=True)


class RichProgress:
    """Progress rows for running tasks plus an overall bar."""

    def __init__(self, progress: Progress, total: int):
        self.progress = progress
        self.overall = progress.add_task("tasks", total=total)
        self.rows: dict[str, int] = {}

    def task_started(self, task: Task) -> None:
        self.rows[task.name] = self.progress.add_task(task.name, total=None)

    def task_finished(self, task: Task, result: TaskResult) -> None:
        row = self.rows.pop(task.name, None)
        if row is not None:
            self.progress.remove_task(row)
        self.progress.advance(self.overall)
        if not result.ok:
            self.progress.console.print(f"[red]failed[/red] {task.name}: {result.error}")


def _configure_logging(log_file: Optional[str], log_level: str) -> None:
    if log_file:
        logging.basicConfig(
            filename=log_file,
            level=getattr(logging, log_level),
            format="%(asctime)s %(name)s %(levelname)s: %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S"
        )
    else:
        logging.basicConfig(
            level=getattr(logging, log_level),
            format="%(message)s",
            datefmt="%H:%M:%S",
            handlers=[RichHandler(console=stderr, show_path=False)],
        )


def _read_config(path: str, seed: Optional[int]) -> tuple[BenchmarkConfig, str]:
    """Parse a config file; the returned text is the effective config with overrides applied."""
    text = Path(path).read_text()
    cfg = with_seed(parse_config(text), seed)
    if seed is not None:
        data = yaml.safe_load(text)
        data["seed"] = seed
        text = yaml.safe_dump(data, sort_keys=False)
    return cfg, text


def _emit_summary(args: argparse.Namespace, summary: dict) -> None:
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_gen(args: argparse.Namespace) -> int:
    system = get_system(args.dataset)
    out = Path(args.out) if args.out else data_dir() / f"{args.dataset}{DATASET_SUFFIX}"
    ds = generate_dataset(system, seed=args.seed)
    save_dataset(ds, out)
    summary = describe_dataset(ds)
    logger.info("Wrote %s", out)
    if args.json:
        _emit_summary(args, {"dataset": args.dataset, "path": str(out), "seed": args.seed,
                             "counts": list(ds.counts)})
    else:
        print(f"{args.dataset}: {summary} -> {out}")
    return EXIT_OK


def cmd_validate_config(args: argparse.Namespace) -> int:
    cfg, _ = _read_config(args.config, args.seed)
    tasks = expand_tasks(cfg)
    if args.json:
        _emit_summary(args, {
            "run_id": cfg.resolved_run_id,
            "task_count": len(tasks),
            "tasks": [{"surrogate": t.surrogate.value, "modality": t.tag, "seed": t.seed} for t in tasks],
        })
        return EXIT_OK
    table = Table(title=f"{cfg.resolved_run_id}")
    for column in ("#", "surrogate", "modality", "seed", "overrides"):
        table.add_column(column)
    for i, task in enumerate(tasks):
        overrides = ", ".join(f"{k}={v}" for k, v in sorted(task.hyperparameters.items()))
        table.add_row(str(i), task.surrogate.value, task.tag, str(task.seed), overrides)
    Console().print(table)
    print(f"{len(tasks)} tasks")
    return EXIT_OK


def _train(args: argparse.Namespace) -> tuple[BenchmarkConfig, Path, Path, ArtifactIndex]:
    cfg, text = _read_config(args.config, args.seed)
    run_dir, dataset_path, tasks = prepare_run(cfg, args.out, force=args.force)
    snapshot_config(text, run_dir)
    workers = args.workers if args.workers is not None else cfg.workers
    logger.info("Run %s: %d tasks on %d workers", cfg.resolved_run_id, len(tasks), workers)

    with Progress(
        SpinnerColumn(),
        TextColumn("{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=stderr,
        disable=args.json,
    ) as progress:
        index = asyncio.run(run_tasks(tasks, workers, RichProgress(progress, len(tasks))))
    write_index(run_dir, index)
    return cfg, run_dir, dataset_path, index


def _finish(args: argparse.Namespace, run_dir: Path, index: ArtifactIndex, report_dir: Optional[Path]) -> int:
    failed = [f"{r.surrogate}/{r.tag}" for r in index.failed]
    _emit_summary(args, {
        "run_dir": str(run_dir),
        "report_dir": str(report_dir) if report_dir is not None else None,
        "tasks": len(index.results),
        "failed": failed,
    })
    if failed:
        logger.warning("%d of %d tasks failed: %s", len(failed), len(index.results), ", ".join(failed))
        return EXIT_PARTIAL
    return EXIT_OK


def _evaluate_and_report(cfg: BenchmarkConfig, run_dir: Path, dataset_path: Path, index: ArtifactIndex) -> Path:
    ds = load_dataset(dataset_path)
    metrics = evaluate_run(cfg, run_dir, ds, index)
    return write_report(build_report(run_dir, metrics))


def cmd_train(args: argparse.Namespace) -> int:
    _, run_dir, _, index = _train(args)
    return _finish(args, run_dir, index, None)


def cmd_bench(args: argparse.Namespace) -> int:
    cfg, run_dir, dataset_path, index = _train(args)
    report_dir = _evaluate_and_report(cfg, run_dir, dataset_path, index)
    return _finish(args, run_dir, index, report_dir)


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "index.json").exists():
        raise FileNotFoundError(f"{run_dir} holds no finished run (index.json missing)")
    cfg = parse_config((run_dir / "config.yaml").read_text())
    run_info = json.loads((run_dir / "run.json").read_text())
    index = load_index(run_dir)
    report_dir = _evaluate_and_report(cfg, run_dir, Path(run_info["dataset_path"]), index)
    return _finish(args, run_dir, index, report_dir)


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", required=True, help="Run configuration (YAML)")
    parser.add_argument("--seed", "-s", type=int, default=None, help="Override the config seed")
    parser.add_argument(
        "--workers", "-w",
        type=int,
        default=None,
        help="Concurrent training tasks (default: config value)"
    )
    parser.add_argument(
        "--out", "-o",
        default=DEFAULT_RUNS_DIR,
        help=f"Directory holding run directories (default: {DEFAULT_RUNS_DIR})"
    )
    parser.add_argument("--force", "-f", action="store_true", help="Replace a completed run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Benchmark surrogate models of coupled ODE systems")
    parser.add_argument("--json", action="store_true", help="Print a machine-readable summary on stdout")
    parser.add_argument(
        "--log-file",
        type=str,
        default=None,
        help="Log file path (default: log to stderr)"
    )
    parser.add_argument(
        "--log-level",
        type=str,
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Log level (default: INFO)"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="Generate a synthetic dataset")
    gen.add_argument("dataset", help="Dataset id: lotka_volterra, simple_ode or simple_reaction")
    gen.add_argument("--seed", "-s", type=int, default=42, help="Generation seed (default: 42)")
    gen.add_argument("--out", "-o", default=None, help=f"Output file (default: $CODES_DATA_DIR/<id>{DATASET_SUFFIX})")
    gen.set_defaults(handler=cmd_gen)

    validate = commands.add_parser("validate-config", help="Print the expanded task list without training")
    validate.add_argument("--config", "-c", required=True, help="Run configuration (YAML)")
    validate.add_argument("--seed", "-s", type=int, default=None, help="Override the config seed")
    validate.set_defaults(handler=cmd_validate_config)

    for name, handler, help_text in (
        ("train", cmd_train, "Train every task of a configuration"),
        ("bench", cmd_bench, "Train, evaluate and write the report"),
    ):
        sub = commands.add_parser(name, help=help_text)
        _add_run_arguments(sub)
        sub.set_defaults(handler=handler)

    report = commands.add_parser("report", help="Evaluate and report an existing run directory")
    report.add_argument("run_dir", help="Run directory written by train or bench")
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.log_file, args.log_level)

    if getattr(args, "workers", None) is not None and args.workers < 1:
        parser.error("--workers must be at least 1")
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error("Configuration error at %s", e)
        print(f"Error: {e}", file=sys.stderr)
    except (RunExistsError, DatasetError, OSError) as e:
        logger.error("%s", e)
        print(f"Error: {e}", file=sys.stderr)
    except ValueError as e:
        # unknown dataset ids and invalid overrides
        logger.error("%s", e)
        print(f"Error: {e}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
