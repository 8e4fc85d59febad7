"""
Report Module

Aggregates the evaluated cells of a run into the comparison table and
emits SVG plots, each with a sibling CSV holding exactly the plotted
numbers.

Output layout (default <run_dir>/report/):
    report.md       comparison table, best value per row in bold
    report.csv      deterministic table rows at full precision
    timing.csv      wall-clock measurements per cell
    plots/*.svg     figures
    plots/*.csv     data of each figure
    manifest.json   emitted and skipped plots
"""

import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.colors import LogNorm  # noqa: E402
from scipy.stats import gaussian_kde  # noqa: E402

from dataset import TrajectoryDataset, load_dataset  # noqa: E402
from harness import (  # noqa: E402
    MAIN,
    BenchmarkConfig,
    ModalityKind,
    load_index,
    parse_config,
    task_modalities,
)
from metrics import (  # noqa: E402
    UNDEFINED,
    CellMetrics,
    CellTiming,
    MetricsReport,
    read_json,
    relative_errors,
    write_json,
)

logger = logging.getLogger(__name__)

SVG_HASH_SALT = "osb"
KDE_POINTS = 200
LOG_ERROR_FLOOR = 1e-20
COMPARED_MODALITIES = (
    ModalityKind.INTERPOLATION,
    ModalityKind.EXTRAPOLATION,
    ModalityKind.SPARSE,
    ModalityKind.BATCH,
)

# Table rows: (label, lower_is_better or None when no best value is marked)
TABLE_ROWS = (
    ("MSE", True),
    ("MAE", True),
    ("MRE", True),
    ("Inference Time", True),
    ("Peak Memory", True),
    ("Mean uncertainty", True),
    ("PCC UQ", False),
    ("PCC Gradient", None),
    ("Epochs", None),
    ("Train Time", True),
    ("# Trainable Params", True),
)
VOLATILE_ROWS = {"Inference Time", "Peak Memory", "Train Time"}


@dataclass
class RunReport:
    """Everything rendered for one run."""
    run_id: str
    config_text: str
    config: BenchmarkConfig
    metrics: MetricsReport
    run_dir: Path
    dataset_path: Optional[Path] = None
    manifest: dict = field(default_factory=lambda: {"plots": [], "skipped": []})

    @property
    def surrogates(self) -> list[str]:
        return [entry.kind.value for entry in self.config.surrogates]

    def cell_dir(self, surrogate: str, tag: str) -> Path:
        return self.run_dir / surrogate / tag

    def main_cell(self, surrogate: str) -> Optional[CellMetrics]:
        return self.metrics.cells.get((surrogate, MAIN.tag))


def build_report(run_dir: str | os.PathLike, metrics: Optional[MetricsReport] = None) -> RunReport:
    """
    Collect a run's configuration, index and evaluated cells.

    Args:
        run_dir: Run directory written by the harness
        metrics: Already computed metrics; read from metrics.json files if None
    """
    run_dir = Path(run_dir)
    config_text = (run_dir / "config.yaml").read_text()
    config = parse_config(config_text)
    run_info = read_json(run_dir / "run.json")

    if metrics is None:
        metrics = MetricsReport()
        for result in load_index(run_dir).results:
            key = (result.surrogate, result.tag)
            if not result.ok:
                metrics.failed[key] = result.error or "failed"
                continue
            out = Path(result.output_dir)
            metrics.add(CellMetrics.from_dict(read_json(out / "metrics.json")))
            metrics.timings[key] = CellTiming(**read_json(out / "timing.json"))

    dataset_path = run_info.get("dataset_path")
    return RunReport(
        run_id=run_info["run_id"],
        config_text=config_text,
        config=config,
        metrics=metrics,
        run_dir=run_dir,
        dataset_path=Path(dataset_path) if dataset_path else None,
    )


# =============================================================================
# Table
# =============================================================================


def _row_values(report: RunReport, label: str) -> dict[str, object]:
    """Raw values of one table row per surrogate; None where absent."""
    values: dict[str, object] = {}
    for surrogate in report.surrogates:
        cell = report.main_cell(surrogate)
        timing = report.metrics.timings.get((surrogate, MAIN.tag))
        if cell is None:
            values[surrogate] = None
            continue
        match label:
            case "MSE":
                value = cell.mse
            case "MAE":
                value = cell.mae
            case "MRE":
                value = cell.mre
            case "Inference Time":
                value = None if timing is None else timing.inference_mean_ms
            case "Peak Memory":
                value = None if timing is None else timing.peak_memory_mb
            case "Mean uncertainty":
                value = cell.mean_uncertainty
            case "PCC UQ":
                value = UNDEFINED if cell.uq_evaluated and cell.pcc_uq is None else cell.pcc_uq
            case "PCC Gradient":
                value = (UNDEFINED if cell.gradients_evaluated and cell.pcc_gradient is None
                         else cell.pcc_gradient)
            case "Epochs":
                value = cell.epochs
            case "Train Time":
                value = None if timing is None else timing.train_time_s
            case "# Trainable Params":
                value = cell.param_count
            case _:
                raise KeyError(label)
        values[surrogate] = value
    return values


def _best(values: dict[str, object], lower_is_better: Optional[bool]) -> set[str]:
    if lower_is_better is None:
        return set()
    numeric = {k: v for k, v in values.items() if isinstance(v, (int, float)) and not isinstance(v, bool)}
    if len(numeric) < 2:
        return set()
    target = min(numeric.values()) if lower_is_better else max(numeric.values())
    return {k for k, v in numeric.items() if v == target}


def _format(label: str, value: object, report: RunReport, surrogate: str) -> str:
    if value is None:
        return "failed" if (surrogate, MAIN.tag) in report.metrics.failed else "n/a"
    if isinstance(value, str):
        return value
    match label:
        case "Inference Time":
            std = report.metrics.timings[(surrogate, MAIN.tag)].inference_std_ms
            return f"{value:.2f} ± {std:.2f} ms"
        case "Peak Memory":
            return f"{value:.2f} MB"
        case "Train Time":
            return f"{value:.1f} s"
        case "Epochs" | "# Trainable Params":
            return str(value)
        case "PCC UQ" | "PCC Gradient":
            return f"{value:.3f}"
    return f"{value:.3e}"


def render_table(report: RunReport) -> tuple[str, str]:
    """
    Render the comparison table.

    Returns:
        (markdown, csv): markdown holds all rows with the best value per row
        in bold and a footnote listing failed cells; the CSV holds only the
        deterministic rows at full precision.
    """
    surrogates = report.surrogates
    lines = [
        "| Metric | " + " | ".join(surrogates) + " |",
        "|---|" + "---|" * len(surrogates),
    ]
    csv_rows = {}
    for label, lower_is_better in TABLE_ROWS:
        values = _row_values(report, label)
        best = _best(values, lower_is_better)
        cells = []
        for surrogate in surrogates:
            text = _format(label, values[surrogate], report, surrogate)
            cells.append(f"**{text}**" if surrogate in best else text)
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
        if label not in VOLATILE_ROWS:
            csv_rows[label] = values

    if report.metrics.failed:
        lines.append("")
        failures = "; ".join(f"{s}/{tag}: {error}"
                             for (s, tag), error in sorted(report.metrics.failed.items()))
        lines.append(f"Failed tasks: {failures}")

    frame = pd.DataFrame.from_dict(csv_rows, orient="index", columns=surrogates, dtype=object)
    frame.index.name = "metric"
    buffer = io.StringIO()
    frame.to_csv(buffer, lineterminator="\n")
    return "\n".join(lines) + "\n", buffer.getvalue()


def timing_frame(report: RunReport) -> pd.DataFrame:
    rows = [
        {"surrogate": s, "modality": tag, "train_time_s": t.train_time_s,
         "inference_mean_ms": t.inference_mean_ms, "inference_std_ms": t.inference_std_ms,
         "peak_memory_mb": t.peak_memory_mb}
        for (s, tag), t in report.metrics.timings.items()
    ]
    return pd.DataFrame(rows, columns=["surrogate", "modality", "train_time_s",
                                       "inference_mean_ms", "inference_std_ms", "peak_memory_mb"])


# =============================================================================
# Plots
# =============================================================================


class PlotWriter:
    """Writes SVG figures with sibling CSVs and tracks the manifest."""

    def __init__(self, outdir: Path, manifest: dict):
        self.plots_dir = outdir / "plots"
        self.plots_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest

    def emit(self, name: str, frame: pd.DataFrame, draw: Callable[[plt.Axes, pd.DataFrame], None]) -> None:
        frame.to_csv(self.plots_dir / f"{name}.csv", index=False, lineterminator="\n")
        with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT}):
            fig, ax = plt.subplots(figsize=(7, 4.5))
            try:
                draw(ax, frame)
                fig.tight_layout()
                fig.savefig(self.plots_dir / f"{name}.svg", format="svg", metadata={"Date": None})
            finally:
                plt.close(fig)
        self.manifest["plots"].append({"plot": f"plots/{name}.svg", "data": f"plots/{name}.csv"})
        logger.debug("Wrote plot %s", name)

    def skip(self, name: str, reason: str) -> None:
        logger.warning("Skipping plot %s: %s", name, reason)
        self.manifest["skipped"].append({"plot": name, "reason": reason})


def _read_series(path: Path) -> Optional[pd.DataFrame]:
    return pd.read_csv(path) if path.exists() else None


def _draw_lines(x: str, ylabel: str, logy: bool = True) -> Callable[[plt.Axes, pd.DataFrame], None]:
    def draw(ax: plt.Axes, frame: pd.DataFrame) -> None:
        for column in frame.columns:
            if column == x:
                continue
            series = frame[[x, column]].dropna()
            ax.plot(series[x], series[column], label=column)
        if logy and (frame.drop(columns=x).to_numpy(dtype=float) > 0).any():
            ax.set_yscale("log")
        ax.set_xlabel(x)
        ax.set_ylabel(ylabel)
        ax.legend()
    return draw


def _draw_heatmap(xlabel: str) -> Callable[[plt.Axes, pd.DataFrame], None]:
    def draw(ax: plt.Axes, frame: pd.DataFrame) -> None:
        x_edges = np.append(np.unique(frame["x_low"]), frame["x_high"].max())
        y_edges = np.append(np.unique(frame["y_low"]), frame["y_high"].max())
        counts = frame["count"].to_numpy().reshape(len(x_edges) - 1, len(y_edges) - 1)
        masked = np.ma.masked_less_equal(counts.T, 0)
        mesh = ax.pcolormesh(x_edges, y_edges, masked, norm=LogNorm(vmin=1, vmax=max(counts.max(), 1)))
        ax.figure.colorbar(mesh, ax=ax, label="count")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("absolute error")
    return draw


def _draw_bars(ax: plt.Axes, frame: pd.DataFrame) -> None:
    ax.bar(frame["surrogate"], frame["inference_mean_ms"], yerr=frame["inference_std_ms"], capsize=4)
    ax.set_ylabel("inference time [ms]")


def _draw_modality(xlabel: str) -> Callable[[plt.Axes, pd.DataFrame], None]:
    def draw(ax: plt.Axes, frame: pd.DataFrame) -> None:
        for column in frame.columns[1:]:
            series = frame[["value", column]].dropna()
            ax.plot(series["value"], series[column], marker="o", label=column)
        if (frame.drop(columns="value").to_numpy(dtype=float) > 0).any():
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("MAE")
        ax.legend()
    return draw


def error_density(pred: np.ndarray, truth: np.ndarray, grid: np.ndarray) -> Optional[np.ndarray]:
    """Gaussian KDE (Silverman bandwidth) of log10 relative errors on `grid`."""
    values = np.log10(np.maximum(relative_errors(pred, truth).ravel(), LOG_ERROR_FLOOR))
    try:
        return gaussian_kde(values, bw_method="silverman")(grid)
    except (np.linalg.LinAlgError, ValueError) as e:
        logger.warning("Error density undefined: %s", e)
        return None


def _log_error_grid(errors: list[np.ndarray]) -> np.ndarray:
    logs = [np.log10(np.maximum(e.ravel(), LOG_ERROR_FLOOR)) for e in errors]
    low = min(float(v.min()) for v in logs)
    high = max(float(v.max()) for v in logs)
    if low == high:
        low, high = low - 0.5, high + 0.5
    return np.linspace(low, high, KDE_POINTS)


def _surrogate_plots(report: RunReport, writer: PlotWriter, surrogate: str,
                     ds: Optional[TrajectoryDataset]) -> None:
    evaluation = report.config.evaluation
    main_dir = report.cell_dir(surrogate, MAIN.tag)
    if report.main_cell(surrogate) is None:
        writer.skip(f"{surrogate}_*", "main model failed")
        return

    if evaluation.error_over_time:
        series = _read_series(main_dir / "error_over_time.csv")
        if series is None:
            writer.skip(f"{surrogate}_error_over_time", "error_over_time.csv missing")
        else:
            writer.emit(f"{surrogate}_error_over_time",
                        series[["time", "mean_relative_error", "median_relative_error"]],
                        _draw_lines("time", "relative error"))

    if report.config.modalities.uncertainty:
        series = _read_series(main_dir / "uq_over_time.csv")
        if series is None:
            writer.skip(f"{surrogate}_uq_over_time", "uq_over_time.csv missing")
        else:
            writer.emit(f"{surrogate}_uq_over_time", series, _draw_lines("time", "uncertainty / MAE"))

    history = _read_series(main_dir / "history.csv")
    if history is None:
        writer.skip(f"{surrogate}_loss_curves", "history.csv missing")
    else:
        writer.emit(f"{surrogate}_loss_curves", history, _draw_lines("epoch", "MSE (normalized)"))

    if evaluation.error_over_time:
        for kind in COMPARED_MODALITIES:
            tags = [m.tag for m in task_modalities(report.config.modalities) if m.kind == kind]
            columns = {}
            time = None
            for tag in tags:
                series = _read_series(report.cell_dir(surrogate, tag) / "error_over_time.csv")
                if series is not None:
                    time = series["time"]
                    columns[tag] = series["mae"]
            if not tags:
                continue
            if not columns:
                writer.skip(f"{surrogate}_mae_over_time_{kind}", "no completed cells")
                continue
            writer.emit(f"{surrogate}_mae_over_time_{kind}",
                        pd.DataFrame({"time": time, **columns}),
                        _draw_lines("time", "MAE"))

    if evaluation.distributions:
        pred_path = main_dir / "predictions.npy"
        if ds is None or not pred_path.exists():
            writer.skip(f"{surrogate}_error_distribution", "predictions or dataset missing")
        else:
            pred = np.load(pred_path)
            labels = ds.labels or tuple(f"q{i}" for i in range(ds.n_quantities))
            grid = _log_error_grid([relative_errors(pred, ds.test)])
            columns = {"log10_relative_error": grid}
            for q, label in enumerate(labels):
                density = error_density(pred[..., q], ds.test[..., q], grid)
                if density is not None:
                    columns[label] = density
            writer.emit(f"{surrogate}_error_distribution", pd.DataFrame(columns),
                        _draw_lines("log10_relative_error", "density", logy=False))

    if evaluation.heatmaps:
        for which, xlabel in (("gradient", "normalized |dy/dt|"), ("uq", "ensemble sigma")):
            series = _read_series(main_dir / f"heatmap_{which}.csv")
            if series is None:
                if which == "gradient" or report.config.modalities.uncertainty:
                    writer.skip(f"{surrogate}_heatmap_{which}", f"heatmap_{which}.csv missing")
                continue
            writer.emit(f"{surrogate}_heatmap_{which}", series, _draw_heatmap(xlabel))


def _comparative_plots(report: RunReport, writer: PlotWriter, ds: Optional[TrajectoryDataset]) -> None:
    evaluation = report.config.evaluation
    present = [s for s in report.surrogates if report.main_cell(s) is not None]
    if not present:
        writer.skip("comparative", "no completed main models")
        return

    if evaluation.error_over_time:
        columns, time = {}, None
        for s in present:
            series = _read_series(report.cell_dir(s, MAIN.tag) / "error_over_time.csv")
            if series is not None:
                time = series["time"]
                columns[s] = series["mean_relative_error"]
        if columns:
            writer.emit("error_over_time", pd.DataFrame({"time": time, **columns}),
                        _draw_lines("time", "mean relative error"))
        else:
            writer.skip("error_over_time", "no error series")

    curves = []
    for s in present:
        history = _read_series(report.cell_dir(s, MAIN.tag) / "history.csv")
        if history is not None:
            curves.append(history.set_index("epoch")["val_loss"].rename(s))
    if curves:
        writer.emit("loss_curves", pd.concat(curves, axis=1).reset_index(),
                    _draw_lines("epoch", "validation MSE (normalized)"))

    for kind in COMPARED_MODALITIES:
        settings = [m for m in task_modalities(report.config.modalities) if m.kind == kind]
        if not settings:
            continue
        frame = pd.DataFrame({"value": [m.value for m in settings]})
        for s in present:
            cells = [report.metrics.cells.get((s, m.tag)) for m in settings]
            frame[s] = [np.nan if c is None else c.mae for c in cells]
        writer.emit(f"modality_{kind}", frame, _draw_modality(kind.value))

    if evaluation.distributions:
        preds = {s: report.cell_dir(s, MAIN.tag) / "predictions.npy" for s in present}
        preds = {s: np.load(p) for s, p in preds.items() if p.exists()}
        if ds is None or not preds:
            writer.skip("error_distribution", "predictions or dataset missing")
        else:
            grid = _log_error_grid([relative_errors(p, ds.test) for p in preds.values()])
            columns = {"log10_relative_error": grid}
            for s, pred in preds.items():
                density = error_density(pred, ds.test, grid)
                if density is not None:
                    columns[s] = density
            writer.emit("error_distribution", pd.DataFrame(columns),
                        _draw_lines("log10_relative_error", "density", logy=False))

    if evaluation.timing:
        timings = [(s, report.metrics.timings.get((s, MAIN.tag))) for s in present]
        rows = [(s, t.inference_mean_ms, t.inference_std_ms) for s, t in timings
                if t is not None and t.inference_mean_ms is not None]
        if rows:
            writer.emit("inference_time",
                        pd.DataFrame(rows, columns=["surrogate", "inference_mean_ms", "inference_std_ms"]),
                        _draw_bars)
        else:
            writer.skip("inference_time", "no inference timings")


def emit_plots(report: RunReport, outdir: str | os.PathLike) -> dict:
    """
    Write all per-surrogate and comparative plots into outdir/plots.

    Missing series skip their plot; skipped plots are listed in the manifest.

    Returns:
        The manifest {"plots": [...], "skipped": [...]}
    """
    outdir = Path(outdir)
    writer = PlotWriter(outdir, report.manifest)
    ds = None
    if report.dataset_path is not None and report.dataset_path.exists():
        ds = load_dataset(report.dataset_path)
    for surrogate in report.surrogates:
        _surrogate_plots(report, writer, surrogate, ds)
    _comparative_plots(report, writer, ds)
    return report.manifest


def write_report(report: RunReport, outdir: Optional[str | os.PathLike] = None) -> Path:
    """Write report.md, report.csv, timing.csv, plots and manifest.json."""
    outdir = Path(outdir) if outdir is not None else report.run_dir / "report"
    outdir.mkdir(parents=True, exist_ok=True)
    markdown, csv_text = render_table(report)
    (outdir / "report.md").write_text(f"# Benchmark {report.run_id}\n\n{markdown}")
    (outdir / "report.csv").write_text(csv_text)
    timing_frame(report).to_csv(outdir / "timing.csv", index=False, lineterminator="\n")
    manifest = emit_plots(report, outdir)
    write_json(outdir / "manifest.json", {
        "run_id": report.run_id,
        "files": ["report.md", "report.csv", "timing.csv"],
        **manifest,
    })
    logger.info("Report written to %s (%d plots, %d skipped)", outdir,
                len(manifest["plots"]), len(manifest["skipped"]))
    return outdir
