"""Tests for the osb command line."""

import json
from pathlib import Path

import pytest

from dataset import load_dataset, save_dataset
from odegen import generate_dataset, get_system
from osb import EXIT_ERROR, EXIT_OK, EXIT_PARTIAL, main

CONFIG_DIR = Path(__file__).parent.parent / "configs"


@pytest.fixture
def tiny_config(tmp_path):
    ds = generate_dataset(get_system("simple_ode"), n_train=8, n_val=4, n_test=4, n_timesteps=10, seed=3)
    save_dataset(ds, tmp_path / "tiny.cds")

    def write(surrogates: str = "  - name: FCNN\n    hidden: [4]\n    epochs: 2\n    batch_size: 4\n") -> Path:
        path = tmp_path / "config.yaml"
        path.write_text(f"seed: 7\ndataset:\n  path: {tmp_path / 'tiny.cds'}\nsurrogates:\n{surrogates}")
        return path

    return write


# =============================================================================
# gen / validate-config
# =============================================================================


class TestGen:
    def test_unknown_dataset(self, capsys):
        assert main(["gen", "bogus"]) == EXIT_ERROR
        assert "unknown dataset" in capsys.readouterr().err

    @pytest.mark.slow
    def test_writes_dataset(self, tmp_path, capsys):
        out = tmp_path / "lv.cds"
        assert main(["--json", "gen", "lotka_volterra", "--seed", "1", "--out", str(out)]) == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["counts"] == [500, 50, 150, 100, 6]
        assert load_dataset(out).counts == (500, 50, 150, 100, 6)


class TestValidateConfig:
    def test_benchmark_task_count(self, capsys):
        assert main(["--json", "validate-config", "--config", str(CONFIG_DIR / "benchmark.yaml")]) == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["task_count"] == 96
        assert summary["run_id"] == "seed42_simple_ode"
        assert summary["tasks"][0] == {"surrogate": "FCNN", "modality": "main",
                                       "seed": 18119274718428789968}

    def test_seed_override(self, capsys):
        config = str(CONFIG_DIR / "minimal.yaml")
        assert main(["--json", "validate-config", "-c", config, "--seed", "3"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["run_id"] == "seed3_simple_ode"

    def test_table_output(self, capsys):
        assert main(["validate-config", "-c", str(CONFIG_DIR / "minimal.yaml")]) == EXIT_OK
        assert "1 tasks" in capsys.readouterr().out

    def test_invalid_config(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("seed: -4\ndataset: simple_ode\nsurrogates: [FCNN]\n")
        assert main(["validate-config", "-c", str(path)]) == EXIT_ERROR
        assert "seed" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["validate-config", "-c", str(tmp_path / "missing.yaml")]) == EXIT_ERROR


# =============================================================================
# train / bench / report
# =============================================================================


class TestRuns:
    def test_bench(self, tiny_config, tmp_path, capsys):
        runs = tmp_path / "runs"
        args = ["--json", "bench", "-c", str(tiny_config()), "-o", str(runs), "-w", "1"]
        assert main(args) == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["tasks"] == 1 and summary["failed"] == []
        run_dir = runs / "seed7_tiny"
        assert (run_dir / "config.yaml").exists()
        assert (run_dir / "index.json").exists()
        assert (run_dir / "report" / "report.md").exists()
        assert (run_dir / "report" / "manifest.json").exists()

        assert main(args) == EXIT_ERROR
        assert "already holds a run" in capsys.readouterr().err
        assert main(args + ["--force"]) == EXIT_OK

    def test_partial_failure(self, tiny_config, tmp_path, capsys):
        # the first Adam step pushes every weight to ~1e300, so the next loss overflows
        config = tiny_config(
            "  - name: FCNN\n    hidden: [4]\n    epochs: 1\n    batch_size: 4\n"
            "  - name: LP\n    encoder_hidden: [4]\n    latent_dim: 2\n    degree: 2\n"
            "    epochs: 2\n    batch_size: 4\n    learning_rate: 1.0e+300\n"
        )
        assert main(["--json", "bench", "-c", str(config), "-o", str(tmp_path / "runs")]) == EXIT_PARTIAL
        summary = json.loads(capsys.readouterr().out)
        assert summary["failed"] == ["LP/main"]
        markdown = (tmp_path / "runs" / "seed7_tiny" / "report" / "report.md").read_text()
        assert "Failed tasks: LP/main" in markdown
        assert "diverged" in markdown

    def test_invalid_hyperparameter_fails_before_training(self, tiny_config, tmp_path, capsys):
        config = tiny_config("  - name: LP\n    latent_dim: 0\n")
        assert main(["bench", "-c", str(config), "-o", str(tmp_path / "runs")]) == EXIT_ERROR
        assert "surrogates[0].latent_dim" in capsys.readouterr().err
        assert not (tmp_path / "runs" / "seed7_tiny").exists()

    def test_train_then_report(self, tiny_config, tmp_path, capsys):
        runs = tmp_path / "runs"
        assert main(["--json", "train", "-c", str(tiny_config()), "-o", str(runs), "-s", "9"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["report_dir"] is None
        run_dir = runs / "seed9_tiny"
        assert "seed: 9" in (run_dir / "config.yaml").read_text()
        assert not (run_dir / "report").exists()
        assert main(["--json", "report", str(run_dir)]) == EXIT_OK
        assert (run_dir / "report" / "report.csv").exists()

    @pytest.mark.slow
    def test_bench_artifacts_independent_of_worker_count(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CODES_DATA_DIR", str(tmp_path / "data"))
        config = tmp_path / "config.yaml"
        config.write_text(
            "seed: 42\ndataset: simple_ode\n"
            "surrogates:\n"
            "  - {name: FCNN, epochs: 3}\n"
            "  - {name: MON, epochs: 2}\n"
            "  - {name: LNODE, epochs: 2}\n"
            "  - {name: LP, epochs: 3}\n"
            "modalities:\n"
            "  sparse:\n    factors: [4]\n"
            "  uncertainty:\n    ensemble_size: 2\n"
        )
        runs = {}
        for workers in ("1", "4"):
            root = tmp_path / f"runs_w{workers}"
            assert main(["--json", "bench", "-c", str(config), "-o", str(root), "-w", workers]) == EXIT_OK
            runs[workers] = root / "seed42_simple_ode"

        def artifacts(run_dir: Path) -> dict[str, bytes]:
            paths = [*run_dir.glob("*/*/checkpoint/*.ckpt"), *run_dir.glob("*/*/metrics.json"),
                     run_dir / "report" / "report.csv"]
            return {str(p.relative_to(run_dir)): p.read_bytes() for p in paths}

        single, pooled = artifacts(runs["1"]), artifacts(runs["4"])
        ckpt_dirs = {Path(name).parts[:2] for name in single if name.endswith(".ckpt")}
        assert len(ckpt_dirs) == 4 * 3
        assert any(name.endswith("metrics.json") for name in single)
        assert single == pooled

    def test_report_without_run(self, tmp_path, capsys):
        assert main(["report", str(tmp_path)]) == EXIT_ERROR
        assert "index.json missing" in capsys.readouterr().err

    def test_invalid_workers(self, tiny_config):
        with pytest.raises(SystemExit):
            main(["train", "-c", str(tiny_config()), "-w", "0"])
