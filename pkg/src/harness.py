"""
Benchmark Harness Module

Parses the run configuration, expands it into an ordered task list,
derives per-task seeds, executes tasks on a pool of worker processes and
evaluates the finished run.

Run directory layout:
    <run_dir>/config.yaml, run.json, index.json
    <run_dir>/<surrogate>/<modality_tag>/
        checkpoint/          manifest.json + one CODES-CKPT file per block
        history.csv          per-epoch train/val loss
        predictions.npy      linear-space test-set predictions
        task.json            task description and status
        timing.json          wall-clock measurements
        metrics.json         deterministic metrics (after evaluation)
        *.csv                plot-ready series (after evaluation)

Every task runs in a spawned worker process with single-threaded BLAS, for
any worker count, so artifacts do not depend on how many workers ran.
"""

import asyncio
import contextlib
import functools
import hashlib
import logging
import multiprocessing
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from enum import StrEnum
from pathlib import Path
from typing import Any, Iterator, Optional, Protocol

import numpy as np
import pandas as pd
import yaml

from dataset import TrainingSubset, TrajectoryDataset, describe_dataset, load_dataset, save_dataset
from metrics import (
    CellMetrics,
    CellTiming,
    MetricsReport,
    data_gradients,
    ensemble_stats,
    error_metrics,
    error_over_time,
    histogram2d,
    mae_over_time,
    mean_uncertainty,
    measure_inference,
    measure_memory,
    pearson,
    read_json,
    write_json,
)
from odegen import SystemId, generate_dataset, get_system
from surrogates import (
    SpecError,
    SurrogateKind,
    SurrogateSpec,
    build,
    load_model,
    preset_overrides,
    save_model,
    train,
)

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "CODES_DATA_DIR"
DEFAULT_DATA_DIR = "datasets"
DATASET_SUFFIX = ".cds"
DEFAULT_ENSEMBLE_SIZE = 5
BLAS_THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class ConfigError(ValueError):
    """Raised for schema violations; carries the dotted key path."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class TaskError(RuntimeError):
    """A task could not be executed by its worker."""

    def __init__(self, name: str, detail: str):
        self.name = name
        super().__init__(f"{name}: {detail}")


class RunExistsError(FileExistsError):
    """Raised when a run directory already holds a completed run."""


# =============================================================================
# Configuration
# =============================================================================


@dataclass(frozen=True)
class DatasetConfig:
    name: Optional[str] = None
    path: Optional[str] = None
    log10: bool = False

    @property
    def label(self) -> str:
        return self.name if self.name is not None else Path(self.path).stem


@dataclass(frozen=True)
class SurrogateEntry:
    kind: SurrogateKind
    overrides: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ModalityConfig:
    intervals: tuple[int, ...] = ()
    cutoffs: tuple[int, ...] = ()
    factors: tuple[int, ...] = ()
    batch_sizes: tuple[int, ...] = ()
    uncertainty: bool = False
    ensemble_size: int = DEFAULT_ENSEMBLE_SIZE


@dataclass(frozen=True)
class EvaluationConfig:
    timing: bool = True
    gradients_pcc: bool = True
    uq_pcc: bool = True
    heatmaps: bool = True
    error_over_time: bool = True
    distributions: bool = True
    memory: bool = True


@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int
    dataset: DatasetConfig
    surrogates: tuple[SurrogateEntry, ...]
    modalities: ModalityConfig = ModalityConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    workers: int = 1
    run_id: Optional[str] = None
    use_presets: bool = True

    @property
    def resolved_run_id(self) -> str:
        return self.run_id if self.run_id is not None else f"seed{self.seed}_{self.dataset.label}"

    def check_dataset(self, n_timesteps: int) -> None:
        """Check modality settings that depend on the dataset's grid."""
        for i, interval in enumerate(self.modalities.intervals):
            if interval >= n_timesteps:
                raise ConfigError(f"modalities.interpolation.intervals[{i}]",
                                  f"{interval} must be below {n_timesteps} timesteps")
        for i, cutoff in enumerate(self.modalities.cutoffs):
            if cutoff >= n_timesteps:
                raise ConfigError(f"modalities.extrapolation.cutoffs[{i}]",
                                  f"{cutoff} must be below {n_timesteps} timesteps")


def _mapping(value: Any, key: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(key, f"expected a mapping, got {type(value).__name__}")
    return value


def _reject_unknown(mapping: dict, allowed: set[str], key: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        prefix = f"{key}." if key else ""
        raise ConfigError(f"{prefix}{unknown[0]}", "unknown key")


def _integer(value: Any, key: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(key, f"must be >= {minimum}, got {value}")
    return value


def _boolean(value: Any, key: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(key, f"expected true or false, got {value!r}")
    return value


def _integer_list(value: Any, key: str, minimum: int) -> tuple[int, ...]:
    if not isinstance(value, list):
        raise ConfigError(key, "expected a list of integers")
    return tuple(_integer(v, f"{key}[{i}]", minimum) for i, v in enumerate(value))


def _parse_dataset(value: Any) -> DatasetConfig:
    if isinstance(value, str):
        return DatasetConfig(name=value)
    data = _mapping(value, "dataset")
    _reject_unknown(data, {"name", "path", "log10"}, "dataset")
    name, path = data.get("name"), data.get("path")
    if name is None and path is None:
        raise ConfigError("dataset", "needs a name or a path")
    for key, item in (("name", name), ("path", path)):
        if item is not None and not isinstance(item, str):
            raise ConfigError(f"dataset.{key}", "expected a string")
    return DatasetConfig(name=name, path=path, log10=_boolean(data.get("log10", False), "dataset.log10"))


_OVERRIDABLE = {f.name for f in fields(SurrogateSpec)} - {"kind", "n_quantities"}


def _parse_surrogates(value: Any) -> tuple[SurrogateEntry, ...]:
    if not isinstance(value, list) or not value:
        raise ConfigError("surrogates", "expected a non-empty list")
    entries = []
    for i, item in enumerate(value):
        key = f"surrogates[{i}]"
        if isinstance(item, str):
            item = {"name": item}
        item = dict(_mapping(item, key))
        name = item.pop("name", None)
        try:
            kind = SurrogateKind(name)
        except ValueError:
            known = ", ".join(k.value for k in SurrogateKind)
            raise ConfigError(f"{key}.name", f"unknown surrogate {name!r} (known: {known})") from None
        _reject_unknown(item, _OVERRIDABLE, key)
        for list_key in ("hidden", "branch_hidden", "trunk_hidden", "encoder_hidden", "ode_hidden"):
            if list_key in item:
                item[list_key] = _integer_list(item[list_key], f"{key}.{list_key}", 1)
        try:
            spec = SurrogateSpec.default(kind, 1).with_overrides(item)
        except SpecError as e:
            raise ConfigError(f"{key}.{e.key}" if e.key else key, str(e)) from None
        for float_key in ("learning_rate", "lr_floor"):
            if item.get(float_key) is not None:
                item[float_key] = getattr(spec, float_key)
        entries.append(SurrogateEntry(kind, item))
    kinds = [e.kind for e in entries]
    if len(set(kinds)) != len(kinds):
        raise ConfigError("surrogates", "each surrogate may appear only once")
    return tuple(entries)


def _modality_values(data: dict, name: str, list_key: str, minimum: int) -> tuple[int, ...]:
    section = data.get(name)
    if section is None:
        return ()
    key = f"modalities.{name}"
    section = _mapping(section, key)
    _reject_unknown(section, {"enabled", list_key}, key)
    if not _boolean(section.get("enabled", True), f"{key}.enabled"):
        return ()
    return _integer_list(section.get(list_key, []), f"{key}.{list_key}", minimum)


def _parse_modalities(value: Any) -> ModalityConfig:
    if value is None:
        return ModalityConfig()
    data = _mapping(value, "modalities")
    _reject_unknown(data, {"interpolation", "extrapolation", "sparse", "batch", "uncertainty"}, "modalities")
    uncertainty = False
    ensemble_size = DEFAULT_ENSEMBLE_SIZE
    if data.get("uncertainty") is not None:
        section = _mapping(data["uncertainty"], "modalities.uncertainty")
        _reject_unknown(section, {"enabled", "ensemble_size"}, "modalities.uncertainty")
        uncertainty = _boolean(section.get("enabled", True), "modalities.uncertainty.enabled")
        ensemble_size = _integer(section.get("ensemble_size", DEFAULT_ENSEMBLE_SIZE),
                                 "modalities.uncertainty.ensemble_size", 1)
        if uncertainty and ensemble_size < 2:
            raise ConfigError("modalities.uncertainty.ensemble_size",
                              "must be >= 2 when uncertainty is enabled")
    return ModalityConfig(
        intervals=_modality_values(data, "interpolation", "intervals", 2),
        cutoffs=_modality_values(data, "extrapolation", "cutoffs", 1),
        factors=_modality_values(data, "sparse", "factors", 2),
        batch_sizes=_modality_values(data, "batch", "sizes", 1),
        uncertainty=uncertainty,
        ensemble_size=ensemble_size,
    )


def _parse_evaluation(value: Any) -> EvaluationConfig:
    if value is None:
        return EvaluationConfig()
    data = _mapping(value, "evaluation")
    allowed = {f.name for f in fields(EvaluationConfig)}
    _reject_unknown(data, allowed, "evaluation")
    return EvaluationConfig(**{k: _boolean(v, f"evaluation.{k}") for k, v in data.items()})


def parse_config(text: str) -> BenchmarkConfig:
    """
    Parse and validate a YAML run configuration.

    Raises:
        ConfigError: On malformed YAML, unknown keys or invalid values
    """
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("<document>", f"invalid YAML: {e}") from e
    data = _mapping(data, "<document>")
    _reject_unknown(data, {"seed", "dataset", "surrogates", "modalities", "evaluation",
                           "workers", "run_id", "use_presets"}, "")
    for required in ("seed", "dataset", "surrogates"):
        if required not in data:
            raise ConfigError(required, "missing required key")
    run_id = data.get("run_id")
    if run_id is not None and (not isinstance(run_id, str) or not run_id or "/" in run_id):
        raise ConfigError("run_id", "expected a non-empty name without '/'")
    return BenchmarkConfig(
        seed=_integer(data["seed"], "seed", 0),
        dataset=_parse_dataset(data["dataset"]),
        surrogates=_parse_surrogates(data["surrogates"]),
        modalities=_parse_modalities(data.get("modalities")),
        evaluation=_parse_evaluation(data.get("evaluation")),
        workers=_integer(data.get("workers", 1), "workers", 1),
        run_id=run_id,
        use_presets=_boolean(data.get("use_presets", True), "use_presets"),
    )


def load_config(path: str | os.PathLike) -> BenchmarkConfig:
    return parse_config(Path(path).read_text())


# =============================================================================
# Tasks
# =============================================================================


class ModalityKind(StrEnum):
    MAIN = "main"
    INTERPOLATION = "interpolation"
    EXTRAPOLATION = "extrapolation"
    SPARSE = "sparse"
    BATCH = "batch"
    ENSEMBLE = "ensemble"


@dataclass(frozen=True)
class Modality:
    kind: ModalityKind
    value: Optional[int] = None

    @property
    def tag(self) -> str:
        return self.kind.value if self.value is None else f"{self.kind.value}_{self.value}"


MAIN = Modality(ModalityKind.MAIN)


@dataclass(frozen=True)
class Task:
    """One training job: a surrogate under one modality setting."""
    surrogate: SurrogateKind
    modality: Modality
    seed: int
    hyperparameters: dict[str, Any]
    output_dir: str = ""
    dataset_path: str = ""
    log10: bool = False

    @property
    def tag(self) -> str:
        return self.modality.tag

    @property
    def name(self) -> str:
        return f"{self.surrogate}/{self.tag}"


def derive_seed(global_seed: int, surrogate: str, tag: str) -> int:
    """Stable 64-bit seed from BLAKE2b of (global seed, surrogate, modality tag)."""
    digest = hashlib.blake2b(f"{global_seed}|{surrogate}|{tag}".encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


def task_modalities(modalities: ModalityConfig) -> list[Modality]:
    """Ordered modality settings trained for every surrogate."""
    settings = [MAIN]
    settings += [Modality(ModalityKind.INTERPOLATION, v) for v in modalities.intervals]
    settings += [Modality(ModalityKind.EXTRAPOLATION, v) for v in modalities.cutoffs]
    settings += [Modality(ModalityKind.SPARSE, v) for v in modalities.factors]
    settings += [Modality(ModalityKind.BATCH, v) for v in modalities.batch_sizes]
    if modalities.uncertainty:
        settings += [Modality(ModalityKind.ENSEMBLE, k) for k in range(1, modalities.ensemble_size)]
    return settings


def expand_tasks(
    cfg: BenchmarkConfig,
    run_dir: Optional[str | os.PathLike] = None,
    dataset_path: Optional[str | os.PathLike] = None,
) -> list[Task]:
    """
    Expand a configuration into its ordered task list.

    Per surrogate: main, then interpolation, extrapolation, sparse and batch
    settings in configuration order, then ensemble members 1..n-1.
    """
    tasks = []
    for entry in cfg.surrogates:
        hyper = preset_overrides(cfg.dataset.name, entry.kind) if cfg.use_presets else {}
        hyper.update(entry.overrides)
        for modality in task_modalities(cfg.modalities):
            task_hyper = dict(hyper)
            if modality.kind == ModalityKind.BATCH:
                task_hyper["batch_size"] = modality.value
            output_dir = Path(run_dir, entry.kind.value, modality.tag) if run_dir is not None else ""
            tasks.append(Task(
                surrogate=entry.kind,
                modality=modality,
                seed=derive_seed(cfg.seed, entry.kind.value, modality.tag),
                hyperparameters=task_hyper,
                output_dir=str(output_dir),
                dataset_path=str(dataset_path) if dataset_path is not None else "",
                log10=cfg.dataset.log10,
            ))
    return tasks


def subset_interpolation(ds: TrajectoryDataset, interval: int) -> TrainingSubset:
    """Keep timestep indices 0, interval, 2*interval, ... of the train split."""
    if not 2 <= interval < ds.n_timesteps:
        raise ValueError(f"interval must be in [2, {ds.n_timesteps}), got {interval}")
    return TrainingSubset(ds, np.arange(ds.n_train), np.arange(0, ds.n_timesteps, interval))


def subset_extrapolation(ds: TrajectoryDataset, cutoff: int) -> TrainingSubset:
    """Keep train timestep indices below cutoff."""
    if not 0 < cutoff < ds.n_timesteps:
        raise ValueError(f"cutoff must be in (0, {ds.n_timesteps}), got {cutoff}")
    return TrainingSubset(ds, np.arange(ds.n_train), np.arange(cutoff))


def subset_sparse(ds: TrajectoryDataset, factor: int) -> TrainingSubset:
    """Keep train samples 0, factor, 2*factor, ..."""
    if factor < 2:
        raise ValueError(f"factor must be at least 2, got {factor}")
    return TrainingSubset(ds, np.arange(0, ds.n_train, factor), np.arange(ds.n_timesteps))


def training_subset(ds: TrajectoryDataset, modality: Modality) -> TrainingSubset:
    match modality.kind:
        case ModalityKind.INTERPOLATION:
            return subset_interpolation(ds, modality.value)
        case ModalityKind.EXTRAPOLATION:
            return subset_extrapolation(ds, modality.value)
        case ModalityKind.SPARSE:
            return subset_sparse(ds, modality.value)
    return TrainingSubset.full(ds)


# =============================================================================
# Execution
# =============================================================================


class TaskStatus(StrEnum):
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class TaskResult:
    surrogate: str
    tag: str
    status: TaskStatus
    output_dir: str
    epochs: int = 0
    train_time_s: float = 0.0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == TaskStatus.COMPLETED


@functools.lru_cache(maxsize=4)
def _cached_dataset(path: str) -> TrajectoryDataset:
    return load_dataset(path)


def execute_task(task: Task) -> TaskResult:
    """
    Train one task and write its artifacts; failures are returned, not raised.

    Runs inside a worker process.
    """
    out = Path(task.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "surrogate": task.surrogate.value,
        "modality": task.tag,
        "seed": task.seed,
        "hyperparameters": {k: list(v) if isinstance(v, tuple) else v
                            for k, v in task.hyperparameters.items()},
    }
    start = time.perf_counter()
    try:
        ds = _cached_dataset(task.dataset_path)
        subset = training_subset(ds, task.modality)
        spec = SurrogateSpec.default(task.surrogate, ds.n_quantities).with_overrides(task.hyperparameters)
        model = build(spec, task.seed)
        history = train(model, subset, log10=task.log10)
        train_time = time.perf_counter() - start

        save_model(model, out / "checkpoint")
        pd.DataFrame(
            [(r.epoch, r.train_loss, r.val_loss) for r in history],
            columns=["epoch", "train_loss", "val_loss"],
        ).to_csv(out / "history.csv", index=False)
        predictions = model.predict(ds.test[:, 0, :], ds.time_grid())
        np.save(out / "predictions.npy", predictions)
    except Exception as e:
        logger.error("Task %s/%s failed: %s", task.surrogate, task.tag, e)
        meta.update(status=TaskStatus.FAILED.value, error=str(e))
        write_json(out / "task.json", meta)
        return TaskResult(task.surrogate.value, task.tag, TaskStatus.FAILED, str(out), error=str(e))

    meta.update(
        status=TaskStatus.COMPLETED.value,
        epochs=model.epochs_trained,
        param_count=model.param_count,
        train_samples=subset.n_train,
        train_timesteps=subset.n_timesteps,
    )
    write_json(out / "task.json", meta)
    write_json(out / "timing.json", {"train_time_s": train_time})
    return TaskResult(task.surrogate.value, task.tag, TaskStatus.COMPLETED, str(out),
                      epochs=model.epochs_trained, train_time_s=train_time)


class ProgressListener(Protocol):
    def task_started(self, task: Task) -> None: ...
    def task_finished(self, task: Task, result: TaskResult) -> None: ...


@dataclass
class ArtifactIndex:
    """Results of a run in task-list order."""
    results: list[TaskResult] = field(default_factory=list)

    @property
    def failed(self) -> list[TaskResult]:
        return [r for r in self.results if not r.ok]

    @property
    def completed(self) -> list[TaskResult]:
        return [r for r in self.results if r.ok]

    def to_dict(self, root: Optional[Path] = None) -> dict:
        def relative(path: str) -> str:
            return Path(path).relative_to(root).as_posix() if root is not None else path
        return {
            "tasks": [
                {"surrogate": r.surrogate, "modality": r.tag, "status": r.status.value,
                 "output_dir": relative(r.output_dir), "epochs": r.epochs, "error": r.error}
                for r in self.results
            ]
        }


@contextlib.contextmanager
def _single_threaded_blas() -> Iterator[None]:
    """Environment inherited by spawned workers: one BLAS thread each."""
    saved = {name: os.environ.get(name) for name in BLAS_THREAD_VARIABLES}
    os.environ.update({name: "1" for name in BLAS_THREAD_VARIABLES})
    try:
        yield
    finally:
        for name, value in saved.items():
            if value is None:
                os.environ.pop(name, None)
            else:
                os.environ[name] = value


async def run_tasks(
    tasks: list[Task],
    workers: int = 1,
    listener: Optional[ProgressListener] = None,
) -> ArtifactIndex:
    """
    Execute tasks on `workers` concurrent slots pulling from the ordered list.

    A failed task is recorded and the run continues.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    if not tasks:
        return ArtifactIndex()

    loop = asyncio.get_running_loop()
    slots = asyncio.Semaphore(workers)

    with _single_threaded_blas(), ProcessPoolExecutor(
        max_workers=workers, mp_context=multiprocessing.get_context("spawn")
    ) as pool:

        async def run_one(task: Task) -> TaskResult:
            async with slots:
                logger.info("Starting task %s (seed %d)", task.name, task.seed)
                if listener is not None:
                    listener.task_started(task)
                try:
                    result = await loop.run_in_executor(pool, execute_task, task)
                except Exception as e:
                    error = TaskError(task.name, f"worker crashed: {e}")
                    logger.error("%s", error)
                    result = TaskResult(task.surrogate.value, task.tag, TaskStatus.FAILED,
                                        task.output_dir, error=str(error))
                if listener is not None:
                    listener.task_finished(task, result)
                logger.info("Task %s %s", task.name, result.status.value)
                return result

        results = await asyncio.gather(*(run_one(task) for task in tasks))
    return ArtifactIndex(list(results))


# =============================================================================
# Datasets and runs
# =============================================================================


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, DEFAULT_DATA_DIR))


def resolve_dataset(cfg: DatasetConfig, seed: int) -> Path:
    """
    Locate the dataset file, generating a synthetic dataset when missing.

    Raises:
        FileNotFoundError: If a path or non-synthetic dataset does not exist
    """
    if cfg.path is not None:
        path = Path(cfg.path)
        if not path.exists():
            raise FileNotFoundError(f"dataset file {path} not found")
        return path
    path = data_dir() / f"{cfg.name}{DATASET_SUFFIX}"
    if path.exists():
        return path
    if cfg.name not in {s.value for s in SystemId}:
        raise FileNotFoundError(f"dataset {cfg.name!r} not found in {data_dir()}")
    logger.info("Dataset %s not found in %s, generating it", cfg.name, data_dir())
    save_dataset(generate_dataset(get_system(cfg.name), seed=seed), path)
    return path


def prepare_run(cfg: BenchmarkConfig, runs_root: str | os.PathLike, force: bool = False) -> tuple[Path, Path, list[Task]]:
    """
    Resolve the dataset, create the run directory and expand the task list.

    Raises:
        RunExistsError: If the run directory holds a completed run and not force
        ConfigError: If modality settings do not fit the dataset
    """
    run_dir = Path(runs_root) / cfg.resolved_run_id
    if (run_dir / "index.json").exists():
        if not force:
            raise RunExistsError(f"run directory {run_dir} already holds a run (use --force)")
        logger.warning("Removing previous run in %s", run_dir)
        shutil.rmtree(run_dir)
    dataset_path = resolve_dataset(cfg.dataset, cfg.seed)
    ds = _cached_dataset(str(dataset_path))
    cfg.check_dataset(ds.n_timesteps)
    logger.info("Dataset %s: %s", dataset_path, describe_dataset(ds))
    run_dir.mkdir(parents=True, exist_ok=True)
    tasks = expand_tasks(cfg, run_dir, dataset_path.resolve())
    write_json(run_dir / "run.json", {
        "run_id": cfg.resolved_run_id,
        "dataset": cfg.dataset.label,
        "dataset_path": str(dataset_path.resolve()),
        "task_count": len(tasks),
    })
    return run_dir, dataset_path, tasks


def write_index(run_dir: Path, index: ArtifactIndex) -> None:
    write_json(run_dir / "index.json", index.to_dict(run_dir))


# =============================================================================
# Evaluation
# =============================================================================


def _series_frame(columns: dict[str, np.ndarray]) -> pd.DataFrame:
    return pd.DataFrame({name: np.asarray(values) for name, values in columns.items()})


def _write_heatmap(path: Path, x: np.ndarray, y: np.ndarray) -> None:
    hist = histogram2d(x, y)
    i, j = np.meshgrid(np.arange(hist.counts.shape[0]), np.arange(hist.counts.shape[1]), indexing="ij")
    _series_frame({
        "x_low": hist.x_edges[i.ravel()],
        "x_high": hist.x_edges[i.ravel() + 1],
        "y_low": hist.y_edges[j.ravel()],
        "y_high": hist.y_edges[j.ravel() + 1],
        "count": hist.counts.ravel(),
    }).to_csv(path, index=False)


def evaluate_run(
    cfg: BenchmarkConfig,
    run_dir: str | os.PathLike,
    ds: TrajectoryDataset,
    index: ArtifactIndex,
) -> MetricsReport:
    """
    Compute metrics.json and series CSVs for every completed task.

    Main cells also receive gradient correlations and, when the ensemble is
    complete enough (main plus at least one member), uncertainty metrics of
    the ensemble mean.
    """
    run_dir = Path(run_dir)
    report = MetricsReport()
    truth = ds.test
    t_grid = ds.time_grid()
    gradients = data_gradients(truth, t_grid) if cfg.evaluation.gradients_pcc else None
    evaluation = cfg.evaluation

    predictions: dict[tuple[str, str], np.ndarray] = {}
    for result in index.results:
        key = (result.surrogate, result.tag)
        if not result.ok:
            report.failed[key] = result.error or "failed"
            continue
        out = Path(result.output_dir)
        pred = np.load(out / "predictions.npy")
        predictions[key] = pred
        meta = read_json(out / "task.json")
        errors = error_metrics(pred, truth)
        cell = CellMetrics(
            surrogate=result.surrogate,
            modality=result.tag,
            mse=errors.mse,
            mae=errors.mae,
            mre=errors.mre,
            epochs=meta["epochs"],
            param_count=meta["param_count"],
        )
        abs_error = np.abs(pred - truth)
        if evaluation.error_over_time:
            mean_rel, median_rel = error_over_time(pred, truth)
            _series_frame({"time": t_grid, "mean_relative_error": mean_rel,
                           "median_relative_error": median_rel,
                           "mae": mae_over_time(pred, truth)}).to_csv(out / "error_over_time.csv", index=False)
        if result.tag == MAIN.tag and gradients is not None:
            cell.gradients_evaluated = True
            cell.pcc_gradient = pearson(gradients.ravel(), abs_error.ravel())
            if evaluation.heatmaps:
                _write_heatmap(out / "heatmap_gradient.csv", gradients.ravel(), abs_error.ravel())
        report.add(cell)

        timing = CellTiming(**read_json(out / "timing.json"))
        if result.tag == MAIN.tag and (evaluation.timing or evaluation.memory):
            model = load_model(out / "checkpoint")
            if evaluation.timing:
                measured = measure_inference(model, truth, t_grid)
                timing.inference_mean_ms = measured.mean_ms
                timing.inference_std_ms = measured.std_ms
            if evaluation.memory:
                timing.peak_memory_mb = measure_memory(model, truth, t_grid) / 1e6
            write_json(out / "timing.json", vars(timing))
        report.timings[key] = timing

    if cfg.modalities.uncertainty:
        for entry in cfg.surrogates:
            surrogate = entry.kind.value
            members = [predictions[(surrogate, m.tag)] for m in task_modalities(cfg.modalities)
                       if m.kind in (ModalityKind.MAIN, ModalityKind.ENSEMBLE)
                       and (surrogate, m.tag) in predictions]
            cell = report.cells.get((surrogate, MAIN.tag))
            if cell is None or len(members) < 2:
                logger.warning("Skipping uncertainty for %s: %d ensemble members available",
                               surrogate, len(members))
                continue
            mean, sigma = ensemble_stats(members)
            ens_error = np.abs(mean - truth)
            cell.mean_uncertainty = mean_uncertainty(sigma)
            out = run_dir / surrogate / MAIN.tag
            _series_frame({"time": t_grid, "uncertainty": sigma.mean(axis=(0, 2)),
                           "mae": ens_error.mean(axis=(0, 2))}).to_csv(out / "uq_over_time.csv", index=False)
            if evaluation.uq_pcc:
                cell.uq_evaluated = True
                cell.pcc_uq = pearson(sigma.ravel(), ens_error.ravel())
            if evaluation.heatmaps:
                _write_heatmap(out / "heatmap_uq.csv", sigma.ravel(), ens_error.ravel())

    for (surrogate, tag), cell in report.cells.items():
        write_json(run_dir / surrogate / tag / "metrics.json", cell.to_dict())
    return report


def load_index(run_dir: str | os.PathLike) -> ArtifactIndex:
    run_dir = Path(run_dir)
    data = read_json(run_dir / "index.json")
    return ArtifactIndex([
        TaskResult(t["surrogate"], t["modality"], TaskStatus(t["status"]),
                   str(run_dir / t["output_dir"]), epochs=t["epochs"], error=t["error"])
        for t in data["tasks"]
    ])


def snapshot_config(cfg_text: str, run_dir: Path) -> None:
    (run_dir / "config.yaml").write_text(cfg_text)


def with_seed(cfg: BenchmarkConfig, seed: Optional[int]) -> BenchmarkConfig:
    if seed is None:
        return cfg
    if seed < 0:
        raise ConfigError("seed", f"must be >= 0, got {seed}")
    return replace(cfg, seed=seed)
