"""Tests for harness module."""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dataset import load_dataset, save_dataset
from harness import (
    MAIN,
    ArtifactIndex,
    ConfigError,
    DatasetConfig,
    Modality,
    ModalityConfig,
    ModalityKind,
    RunExistsError,
    Task,
    TaskStatus,
    derive_seed,
    evaluate_run,
    execute_task,
    expand_tasks,
    load_config,
    load_index,
    parse_config,
    prepare_run,
    resolve_dataset,
    run_tasks,
    subset_extrapolation,
    subset_interpolation,
    subset_sparse,
    task_modalities,
    training_subset,
    with_seed,
    write_index,
)
from odegen import generate_dataset, get_system
from surrogates import SurrogateKind

CONFIG_DIR = Path(__file__).parent.parent / "configs"


# =============================================================================
# Fixtures
# =============================================================================


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_dataset(get_system("simple_ode"), n_train=8, n_val=4, n_test=4,
                            n_timesteps=10, seed=3)


@pytest.fixture
def dataset_path(tiny_dataset, tmp_path):
    path = tmp_path / "tiny.cds"
    save_dataset(tiny_dataset, path)
    return path


def tiny_config(dataset_path: Path, extra: str = "") -> str:
    return f"""
seed: 7
dataset:
  path: {dataset_path}
surrogates:
  - name: FCNN
    hidden: [4]
    epochs: 2
    batch_size: 4
{extra}
"""


class RecordingListener:
    def __init__(self):
        self.started = []
        self.finished = []

    def task_started(self, task):
        self.started.append(task.name)

    def task_finished(self, task, result):
        self.finished.append((task.name, result.status))


# =============================================================================
# Configuration Tests
# =============================================================================


class TestParseConfig:
    def test_minimal(self):
        cfg = parse_config("seed: 1\ndataset: simple_ode\nsurrogates: [FCNN]\n")
        assert cfg.seed == 1
        assert cfg.dataset == DatasetConfig(name="simple_ode")
        assert [e.kind for e in cfg.surrogates] == [SurrogateKind.FCNN]
        assert cfg.modalities == ModalityConfig()
        assert cfg.workers == 1
        assert cfg.resolved_run_id == "seed1_simple_ode"

    def test_shipped_configs(self):
        tasks = expand_tasks(load_config(CONFIG_DIR / "benchmark.yaml"))
        assert len(tasks) == 96
        assert len({t.seed for t in tasks}) == 96
        assert len(expand_tasks(load_config(CONFIG_DIR / "minimal.yaml"))) == 1

    def test_overrides(self):
        cfg = parse_config(
            "seed: 1\ndataset: simple_ode\n"
            "surrogates:\n  - name: LNODE\n    ode_hidden: [32, 32]\n    substeps: 4\n"
        )
        assert cfg.surrogates[0].overrides == {"ode_hidden": (32, 32), "substeps": 4}

    def test_dataset_path_label(self):
        cfg = parse_config("seed: 1\ndataset:\n  path: data/custom.cds\n  log10: true\nsurrogates: [LP]\n")
        assert cfg.dataset.log10
        assert cfg.resolved_run_id == "seed1_custom"

    def test_disabled_modality(self):
        cfg = parse_config(
            "seed: 1\ndataset: simple_ode\nsurrogates: [FCNN]\n"
            "modalities:\n  sparse:\n    enabled: false\n    factors: [2, 4]\n"
        )
        assert cfg.modalities.factors == ()

    @pytest.mark.parametrize("text, key", [
        ("seed: -1\ndataset: simple_ode\nsurrogates: [FCNN]\n", "seed"),
        ("seed: 1.5\ndataset: simple_ode\nsurrogates: [FCNN]\n", "seed"),
        ("dataset: simple_ode\nsurrogates: [FCNN]\n", "seed"),
        ("seed: 1\nsurrogates: [FCNN]\n", "dataset"),
        ("seed: 1\ndataset: simple_ode\nsurrogates: []\n", "surrogates"),
        ("seed: 1\ndataset: simple_ode\nsurrogates: [FCNN]\ncolour: red\n", "colour"),
        ("seed: 1\ndataset: simple_ode\nsurrogates: [GPR]\n", "surrogates[0].name"),
        ("seed: 1\ndataset: simple_ode\nsurrogates: [FCNN, FCNN]\n", "surrogates"),
        ("seed: 1\ndataset: simple_ode\nsurrogates:\n  - name: FCNN\n    dropout: 0.1\n",
         "surrogates[0].dropout"),
        ("seed: 1\ndataset: simple_ode\nsurrogates: [FCNN]\nworkers: 0\n", "workers"),
        ("seed: 1\ndataset: simple_ode\nsurrogates: [FCNN]\n"
         "modalities:\n  interpolation:\n    intervals: [1]\n", "modalities.interpolation.intervals[0]"),
        ("seed: 1\ndataset: simple_ode\nsurrogates: [FCNN]\n"
         "modalities:\n  uncertainty:\n    ensemble_size: 1\n", "modalities.uncertainty.ensemble_size"),
        ("seed: 1\ndataset: simple_ode\nsurrogates: [FCNN]\nevaluation:\n  timing: 3\n", "evaluation.timing"),
        ("seed: 1\ndataset: {}\nsurrogates: [FCNN]\n", "dataset"),
        ("[1, 2]\n", "<document>"),
        ("seed: [\n", "<document>"),
        ("seed: 1\ndataset: simple_ode\nsurrogates:\n  - name: LP\n    latent_dim: 0\n",
         "surrogates[0].latent_dim"),
        ("seed: 1\ndataset: simple_ode\nsurrogates:\n  - name: FCNN\n    epochs: 10.5\n",
         "surrogates[0].epochs"),
        ("seed: 1\ndataset: simple_ode\nsurrogates:\n  - name: FCNN\n    learning_rate: fast\n",
         "surrogates[0].learning_rate"),
        ("seed: 1\ndataset: simple_ode\nsurrogates:\n  - name: FCNN\n    learning_rate: -1.0e-3\n",
         "surrogates[0].learning_rate"),
        ("seed: 1\ndataset: simple_ode\nsurrogates:\n  - name: MON\n    activation: swish\n",
         "surrogates[0].activation"),
        ("seed: 1\ndataset: simple_ode\nsurrogates:\n  - name: FCNN\n    batch_size: true\n",
         "surrogates[0].batch_size"),
    ])
    def test_errors_name_the_key(self, text, key):
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert info.value.key == key

    def test_exponent_floats_without_dot(self):
        # YAML 1.1 loads these as strings
        cfg = parse_config(
            "seed: 1\ndataset: simple_ode\nsurrogates:\n"
            "  - name: LNODE\n    learning_rate: 1e-3\n    lr_floor: 1e-5\n"
        )
        overrides = cfg.surrogates[0].overrides
        assert overrides["learning_rate"] == 1e-3 and isinstance(overrides["learning_rate"], float)
        assert overrides["lr_floor"] == 1e-5 and isinstance(overrides["lr_floor"], float)

    def test_check_dataset(self):
        cfg = parse_config(
            "seed: 1\ndataset: simple_ode\nsurrogates: [FCNN]\n"
            "modalities:\n  extrapolation:\n    cutoffs: [5, 100]\n"
        )
        cfg.check_dataset(101)
        with pytest.raises(ConfigError) as info:
            cfg.check_dataset(100)
        assert info.value.key == "modalities.extrapolation.cutoffs[1]"

    def test_with_seed(self):
        cfg = parse_config("seed: 1\ndataset: simple_ode\nsurrogates: [FCNN]\n")
        assert with_seed(cfg, None) is cfg
        assert with_seed(cfg, 9).seed == 9
        with pytest.raises(ConfigError):
            with_seed(cfg, -2)


# =============================================================================
# Task Tests
# =============================================================================


class TestTasks:
    def test_derive_seed(self):
        assert derive_seed(42, "FCNN", "main") == 18119274718428789968
        assert derive_seed(42, "LNODE", "sparse_4") == 2189347312879409741
        assert derive_seed(42, "FCNN", "main") != derive_seed(43, "FCNN", "main")

    def test_modality_tags(self):
        assert MAIN.tag == "main"
        assert Modality(ModalityKind.SPARSE, 4).tag == "sparse_4"

    def test_order(self):
        modalities = ModalityConfig(intervals=(3, 2), cutoffs=(5,), factors=(2,),
                                    batch_sizes=(4,), uncertainty=True, ensemble_size=3)
        assert [m.tag for m in task_modalities(modalities)] == [
            "main", "interpolation_3", "interpolation_2", "extrapolation_5",
            "sparse_2", "batch_4", "ensemble_1", "ensemble_2",
        ]

    @settings(max_examples=50, deadline=None)
    @given(
        n_surrogates=st.integers(1, 4),
        intervals=st.lists(st.integers(2, 50), max_size=6),
        cutoffs=st.lists(st.integers(1, 99), max_size=6),
        factors=st.lists(st.integers(2, 64), max_size=6),
        sizes=st.lists(st.integers(1, 128), max_size=6),
        uncertainty=st.booleans(),
        ensemble_size=st.integers(2, 8),
    )
    def test_task_count(self, n_surrogates, intervals, cutoffs, factors, sizes, uncertainty, ensemble_size):
        names = [k.value for k in SurrogateKind][:n_surrogates]
        text = (
            f"seed: 0\ndataset: simple_ode\nsurrogates: {json.dumps(names)}\nmodalities:\n"
            f"  interpolation: {{intervals: {intervals}}}\n"
            f"  extrapolation: {{cutoffs: {cutoffs}}}\n"
            f"  sparse: {{factors: {factors}}}\n"
            f"  batch: {{sizes: {sizes}}}\n"
            f"  uncertainty: {{enabled: {str(uncertainty).lower()}, ensemble_size: {ensemble_size}}}\n"
        )
        per_surrogate = (1 + len(intervals) + len(cutoffs) + len(factors) + len(sizes)
                         + (ensemble_size - 1 if uncertainty else 0))
        assert len(expand_tasks(parse_config(text))) == n_surrogates * per_surrogate

    def test_expansion(self, tmp_path):
        cfg = parse_config(
            "seed: 5\ndataset: simple_ode\n"
            "surrogates:\n  - name: MON\n    learning_rate: 0.01\n"
            "modalities:\n  batch:\n    sizes: [32]\n"
        )
        main, batch = expand_tasks(cfg, tmp_path / "run", tmp_path / "data.cds")
        assert main.hyperparameters["learning_rate"] == 0.01
        assert main.hyperparameters["epochs"] == 100
        assert main.hyperparameters["batch_size"] == 8
        assert batch.hyperparameters["batch_size"] == 32
        assert batch.name == "MON/batch_32"
        assert batch.seed == derive_seed(5, "MON", "batch_32")
        assert batch.output_dir == str(tmp_path / "run" / "MON" / "batch_32")

    def test_without_presets(self):
        cfg = parse_config("seed: 5\ndataset: simple_ode\nsurrogates: [LNODE]\nuse_presets: false\n")
        assert expand_tasks(cfg)[0].hyperparameters == {}


class TestSubsets:
    def test_interpolation(self, tiny_dataset):
        subset = subset_interpolation(tiny_dataset, 3)
        assert subset.timestep_indices.tolist() == [0, 3, 6, 9]
        assert subset.n_train == 8

    def test_interpolation_partial_stride(self, tiny_dataset):
        assert subset_interpolation(tiny_dataset, 4).timestep_indices.tolist() == [0, 4, 8]

    def test_extrapolation(self, tiny_dataset):
        assert subset_extrapolation(tiny_dataset, 4).timestep_indices.tolist() == [0, 1, 2, 3]

    def test_sparse(self, tiny_dataset):
        subset = subset_sparse(tiny_dataset, 3)
        assert subset.sample_indices.tolist() == [0, 3, 6]
        assert subset.n_timesteps == 10

    @pytest.mark.parametrize("call", [
        lambda ds: subset_interpolation(ds, 1),
        lambda ds: subset_interpolation(ds, 10),
        lambda ds: subset_extrapolation(ds, 0),
        lambda ds: subset_extrapolation(ds, 10),
        lambda ds: subset_sparse(ds, 1),
    ])
    def test_out_of_range(self, tiny_dataset, call):
        with pytest.raises(ValueError):
            call(tiny_dataset)

    def test_batch_and_ensemble_use_full_split(self, tiny_dataset):
        for modality in (Modality(ModalityKind.BATCH, 4), Modality(ModalityKind.ENSEMBLE, 1), MAIN):
            subset = training_subset(tiny_dataset, modality)
            assert subset.train.shape == tiny_dataset.train.shape


# =============================================================================
# Execution Tests
# =============================================================================


def make_task(dataset_path: Path, out: Path, **hyper) -> Task:
    settings = dict(hidden=(4,), epochs=2, batch_size=4)
    settings.update(hyper)
    return Task(SurrogateKind.FCNN, MAIN, seed=11, hyperparameters=settings,
                output_dir=str(out), dataset_path=str(dataset_path))


class TestExecuteTask:
    def test_artifacts(self, dataset_path, tmp_path):
        result = execute_task(make_task(dataset_path, tmp_path / "out"))
        assert result.ok and result.epochs == 2
        out = tmp_path / "out"
        for name in ("checkpoint/manifest.json", "checkpoint/net.ckpt", "history.csv",
                     "predictions.npy", "task.json", "timing.json"):
            assert (out / name).exists(), name
        history = pd.read_csv(out / "history.csv")
        assert list(history.columns) == ["epoch", "train_loss", "val_loss"]
        assert history["epoch"].tolist() == [1, 2]
        meta = json.loads((out / "task.json").read_text())
        assert meta["status"] == "completed"
        assert meta["param_count"] == (6 * 4 + 4) + (4 * 5 + 5)
        assert np.load(out / "predictions.npy").shape == (4, 10, 5)

    def test_failure_is_recorded(self, dataset_path, tmp_path):
        result = execute_task(make_task(dataset_path, tmp_path / "out", dropout=0.5))
        assert result.status == TaskStatus.FAILED
        assert "dropout" in result.error
        assert json.loads((tmp_path / "out" / "task.json").read_text())["status"] == "failed"


class TestRunTasks:
    @pytest.mark.asyncio
    async def test_empty(self):
        assert (await run_tasks([])).results == []

    @pytest.mark.asyncio
    async def test_invalid_workers(self):
        with pytest.raises(ValueError):
            await run_tasks([], workers=0)

    @pytest.mark.asyncio
    async def test_results_keep_task_order(self, dataset_path, tmp_path):
        tasks = [
            make_task(dataset_path, tmp_path / "a"),
            make_task(dataset_path, tmp_path / "b", dropout=0.5),
            make_task(dataset_path, tmp_path / "c", epochs=1),
        ]
        listener = RecordingListener()
        index = await run_tasks(tasks, workers=2, listener=listener)
        assert [Path(r.output_dir).name for r in index.results] == ["a", "b", "c"]
        assert [r.ok for r in index.results] == [True, False, True]
        assert len(index.failed) == 1 and len(index.completed) == 2
        assert len(listener.started) == 3
        assert sorted(status for _, status in listener.finished) == ["completed", "completed", "failed"]

    @pytest.mark.asyncio
    async def test_worker_count_does_not_change_artifacts(self, dataset_path, tmp_path):
        tasks_one = [make_task(dataset_path, tmp_path / "one" / str(i), epochs=2 + i) for i in range(3)]
        tasks_two = [make_task(dataset_path, tmp_path / "two" / str(i), epochs=2 + i) for i in range(3)]
        await run_tasks(tasks_one, workers=1)
        await run_tasks(tasks_two, workers=3)
        for i in range(3):
            one = (tmp_path / "one" / str(i) / "predictions.npy").read_bytes()
            two = (tmp_path / "two" / str(i) / "predictions.npy").read_bytes()
            assert one == two


# =============================================================================
# Run Lifecycle Tests
# =============================================================================


class TestRuns:
    def test_resolve_dataset_path(self, dataset_path):
        assert resolve_dataset(DatasetConfig(path=str(dataset_path)), 0) == dataset_path

    def test_resolve_missing_path(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            resolve_dataset(DatasetConfig(path=str(tmp_path / "missing.cds")), 0)

    def test_resolve_unknown_name(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CODES_DATA_DIR", str(tmp_path))
        with pytest.raises(FileNotFoundError):
            resolve_dataset(DatasetConfig(name="chemistry_net"), 0)

    def test_resolve_finds_named_file(self, tiny_dataset, tmp_path, monkeypatch):
        monkeypatch.setenv("CODES_DATA_DIR", str(tmp_path))
        save_dataset(tiny_dataset, tmp_path / "simple_ode.cds")
        assert resolve_dataset(DatasetConfig(name="simple_ode"), 0) == tmp_path / "simple_ode.cds"

    def test_prepare_run(self, dataset_path, tmp_path):
        cfg = parse_config(tiny_config(dataset_path))
        run_dir, path, tasks = prepare_run(cfg, tmp_path / "runs")
        assert run_dir == tmp_path / "runs" / "seed7_tiny"
        assert path == dataset_path
        assert len(tasks) == 1
        meta = json.loads((run_dir / "run.json").read_text())
        assert meta["task_count"] == 1 and meta["dataset"] == "tiny"

    def test_prepare_rejects_bad_cutoff(self, dataset_path, tmp_path):
        cfg = parse_config(tiny_config(dataset_path, "modalities:\n  extrapolation:\n    cutoffs: [10]\n"))
        with pytest.raises(ConfigError):
            prepare_run(cfg, tmp_path / "runs")

    def test_completed_run_is_protected(self, dataset_path, tmp_path):
        cfg = parse_config(tiny_config(dataset_path))
        run_dir, _, _ = prepare_run(cfg, tmp_path / "runs")
        write_index(run_dir, ArtifactIndex())
        (run_dir / "marker").write_text("x")
        with pytest.raises(RunExistsError):
            prepare_run(cfg, tmp_path / "runs")
        prepare_run(cfg, tmp_path / "runs", force=True)
        assert not (run_dir / "marker").exists()


class TestEvaluateRun:
    @pytest.fixture
    def evaluated(self, dataset_path, tiny_dataset, tmp_path):
        cfg = parse_config(tiny_config(
            dataset_path,
            "modalities:\n  sparse:\n    factors: [2]\n  uncertainty:\n    ensemble_size: 3\n",
        ))
        run_dir, _, tasks = prepare_run(cfg, tmp_path / "runs")
        index = ArtifactIndex([execute_task(task) for task in tasks])
        write_index(run_dir, index)
        report = evaluate_run(cfg, run_dir, tiny_dataset, index)
        return cfg, run_dir, report

    def test_cells(self, evaluated):
        _, run_dir, report = evaluated
        assert set(report.cells) == {("FCNN", t) for t in ("main", "sparse_2", "ensemble_1", "ensemble_2")}
        main = report.cells[("FCNN", "main")]
        assert main.epochs == 2
        assert main.mse >= 0 and main.mae >= 0 and main.mre >= 0
        assert main.uq_evaluated and main.gradients_evaluated
        assert main.mean_uncertainty > 0
        assert -1 <= main.pcc_uq <= 1
        assert report.cells[("FCNN", "sparse_2")].pcc_gradient is None

    def test_files(self, evaluated):
        _, run_dir, _ = evaluated
        main = run_dir / "FCNN" / "main"
        metrics = json.loads((main / "metrics.json").read_text())
        assert metrics["modality"] == "main"
        series = pd.read_csv(main / "error_over_time.csv")
        assert list(series.columns) == ["time", "mean_relative_error", "median_relative_error", "mae"]
        assert len(series) == 10
        assert list(pd.read_csv(main / "uq_over_time.csv").columns) == ["time", "uncertainty", "mae"]
        heatmap = pd.read_csv(main / "heatmap_gradient.csv")
        assert len(heatmap) == 100 * 100
        assert heatmap["count"].sum() == 4 * 10 * 5
        assert (main / "heatmap_uq.csv").exists()
        timing = json.loads((main / "timing.json").read_text())
        assert timing["inference_mean_ms"] > 0
        assert timing["peak_memory_mb"] > 0
        assert "peak_memory_mb" not in metrics

    def test_metrics_are_reproducible(self, evaluated, tiny_dataset):
        cfg, run_dir, _ = evaluated
        before = (run_dir / "FCNN" / "main" / "metrics.json").read_bytes()
        evaluate_run(cfg, run_dir, tiny_dataset, load_index(run_dir))
        assert (run_dir / "FCNN" / "main" / "metrics.json").read_bytes() == before

    def test_failed_task(self, dataset_path, tiny_dataset, tmp_path):
        cfg = parse_config(tiny_config(dataset_path, "modalities:\n  uncertainty:\n    ensemble_size: 2\n"))
        run_dir, _, tasks = prepare_run(cfg, tmp_path / "runs")
        main, member = tasks
        broken = Task(member.surrogate, member.modality, member.seed, {"dropout": 1},
                      member.output_dir, member.dataset_path)
        index = ArtifactIndex([execute_task(main), execute_task(broken)])
        report = evaluate_run(cfg, run_dir, tiny_dataset, index)
        assert ("FCNN", "ensemble_1") in report.failed
        cell = report.cells[("FCNN", "main")]
        assert cell.mean_uncertainty is None and not cell.uq_evaluated


@pytest.mark.slow
class TestFullRun:
    @pytest.mark.asyncio
    async def test_extrapolation_error_grows_past_cutoff(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CODES_DATA_DIR", str(tmp_path / "data"))
        cfg = parse_config(
            "seed: 42\ndataset: simple_ode\nsurrogates: [FCNN]\n"
            "modalities:\n  extrapolation:\n    cutoffs: [50]\n"
        )
        run_dir, path, tasks = prepare_run(cfg, tmp_path / "runs")
        index = await run_tasks(tasks, workers=2)
        ds = load_dataset(path)
        evaluate_run(cfg, run_dir, ds, index)
        series = pd.read_csv(run_dir / "FCNN" / "extrapolation_50" / "error_over_time.csv")
        mae = series["mae"].to_numpy()
        assert mae[51:].mean() >= 2 * mae[:51].mean()
