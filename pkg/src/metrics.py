"""
Evaluation Metrics Module

Error metrics, per-timestep error series, ensemble statistics, Pearson
correlations, normalized data gradients, inference time and memory, and 2D
histograms.
All functions are pure and operate on linear-space float64 arrays.

Standard deviations are population (ddof=0) throughout. An undefined Pearson
correlation (a constant argument) is returned as None and serialized as
"undefined".
"""

import json
import logging
import os
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from dataset import ShapeError

logger = logging.getLogger(__name__)

RELATIVE_ERROR_EPS = 1e-10
PEARSON_VARIANCE_FLOOR = 1e-24
TIMING_REPEATS = 5
HEATMAP_BINS = 100
UNDEFINED = "undefined"


def _pair(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    return pred, truth


def relative_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """|p - y| / (|y| + 1e-10), elementwise."""
    pred, truth = _pair(pred, truth)
    return np.abs(pred - truth) / (np.abs(truth) + RELATIVE_ERROR_EPS)


@dataclass(frozen=True)
class ErrorMetrics:
    mse: float
    mae: float
    mre: float


def error_metrics(pred: np.ndarray, truth: np.ndarray) -> ErrorMetrics:
    """MSE, MAE and MRE over every (sample, timestep, quantity) element."""
    pred, truth = _pair(pred, truth)
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(truth))):
        raise ValueError("error metrics require finite inputs")
    diff = pred - truth
    return ErrorMetrics(
        mse=float(np.mean(diff * diff)),
        mae=float(np.mean(np.abs(diff))),
        mre=float(np.mean(relative_errors(pred, truth))),
    )


def _sorted_median(values: np.ndarray, axis: int) -> np.ndarray:
    ordered = np.sort(values, axis=axis)
    n = ordered.shape[axis]
    upper = np.take(ordered, n // 2, axis=axis)
    if n % 2:
        return upper
    return 0.5 * (np.take(ordered, n // 2 - 1, axis=axis) + upper)


def error_over_time(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and median relative error per timestep over (sample, quantity)."""
    rel = relative_errors(pred, truth)
    per_time = np.moveaxis(rel, 1, 0).reshape(rel.shape[1], -1)
    return per_time.mean(axis=1), _sorted_median(per_time, axis=1)


def mae_over_time(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred, truth = _pair(pred, truth)
    return np.abs(pred - truth).mean(axis=(0, 2))


def ensemble_stats(preds: Sequence[np.ndarray] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Elementwise ensemble mean and population standard deviation.

    Members are sorted per element before reduction, so the result does not
    depend on member order.

    Raises:
        ValueError: For fewer than two members
        ShapeError: If member shapes differ
    """
    if len(preds) < 2:
        raise ValueError("an ensemble needs at least two members")
    shapes = {np.shape(p) for p in preds}
    if len(shapes) != 1:
        raise ShapeError(f"ensemble members differ in shape: {sorted(shapes)}")
    stacked = np.sort(np.stack([np.asarray(p, dtype=np.float64) for p in preds]), axis=0)
    mean = stacked.mean(axis=0)
    sigma = np.sqrt(np.mean((stacked - mean) ** 2, axis=0))
    return mean, sigma


def mean_uncertainty(sigma: np.ndarray) -> float:
    return float(np.mean(sigma))


def pearson(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    """
    Pearson correlation of two flat vectors.

    Returns:
        r in [-1, 1], or None when either variance is below 1e-24

    Raises:
        ShapeError: On length mismatch or fewer than two elements
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"pearson arguments differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise ShapeError("pearson needs at least two elements")
    dx = x - x.mean()
    dy = y - y.mean()
    var_x = float(np.mean(dx * dx))
    var_y = float(np.mean(dy * dy))
    if var_x < PEARSON_VARIANCE_FLOOR or var_y < PEARSON_VARIANCE_FLOOR:
        return None
    r = float(np.mean(dx * dy)) / np.sqrt(var_x * var_y)
    return float(np.clip(r, -1.0, 1.0))


def data_gradients(truth: np.ndarray, t_grid: np.ndarray) -> np.ndarray:
    """
    Normalized absolute time derivative of the ground truth.

    Central differences (y[i+1] - y[i-1]) / (t[i+1] - t[i-1]) inside the grid,
    one-sided differences at both ends, absolute value, then division by the
    per-quantity maximum over (sample, time). Quantities with zero maximum
    stay zero.

    Raises:
        ValueError: For fewer than two timesteps or non-increasing times
    """
    truth = np.asarray(truth, dtype=np.float64)
    t = np.asarray(t_grid, dtype=np.float64)
    if truth.ndim != 3 or t.shape != (truth.shape[1],):
        raise ShapeError(f"truth {truth.shape} does not match time grid {t.shape}")
    if t.size < 2:
        raise ValueError("data gradients need at least two timesteps")
    if np.any(np.diff(t) <= 0):
        raise ValueError("degenerate time grid spacing")

    grad = np.empty_like(truth)
    grad[:, 0] = (truth[:, 1] - truth[:, 0]) / (t[1] - t[0])
    grad[:, -1] = (truth[:, -1] - truth[:, -2]) / (t[-1] - t[-2])
    if t.size > 2:
        span = (t[2:] - t[:-2])[None, :, None]
        grad[:, 1:-1] = (truth[:, 2:] - truth[:, :-2]) / span
    grad = np.abs(grad)
    peak = grad.max(axis=(0, 1))
    return np.divide(grad, peak, out=np.zeros_like(grad), where=peak > 0)


class Predictor(Protocol):
    def predict(self, y0: np.ndarray, t_grid: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class TimingResult:
    mean_ms: float
    std_ms: float
    samples_ms: tuple[float, ...]


def measure_inference(
    model: Predictor,
    test: np.ndarray,
    t_grid: np.ndarray,
    repeats: int = TIMING_REPEATS,
    clock: Callable[[], float] = time.perf_counter,
) -> TimingResult:
    """
    Time full predictions of the test split.

    One untimed warm-up call, then `repeats` timed calls on a monotonic clock.

    Returns:
        Mean and population std in milliseconds
    """
    y0 = np.asarray(test)[:, 0, :]
    model.predict(y0, t_grid)
    samples = []
    for _ in range(repeats):
        start = clock()
        model.predict(y0, t_grid)
        samples.append((clock() - start) * 1e3)
    return TimingResult(
        mean_ms=float(np.mean(samples)),
        std_ms=float(np.std(samples)),
        samples_ms=tuple(samples),
    )


def measure_memory(model: Predictor, test: np.ndarray, t_grid: np.ndarray) -> int:
    """
    Peak bytes allocated above the baseline during one full prediction of the
    test split, as traced by tracemalloc (numpy buffers included).
    """
    y0 = np.asarray(test)[:, 0, :]
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        baseline, _ = tracemalloc.get_traced_memory()
        model.predict(y0, t_grid)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if started:
            tracemalloc.stop()
    return max(peak - baseline, 0)


@dataclass(frozen=True, eq=False)
class Histogram2D:
    counts: np.ndarray
    x_edges: np.ndarray
    y_edges: np.ndarray


def histogram2d(x: np.ndarray, y: np.ndarray, bins: int = HEATMAP_BINS) -> Histogram2D:
    """
    Counts on a bins x bins grid with uniform edges spanning [min, max].

    The maximum falls into the last bin. Counts stay raw; log scaling is
    left to rendering. counts[i, j] holds points in x bin i and y bin j.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"histogram arguments differ in length: {x.size} vs {y.size}")
    if x.size == 0:
        raise ValueError("histogram2d needs at least one point")
    counts, x_edges, y_edges = np.histogram2d(
        x, y, bins=bins,
        range=[_axis_range(x), _axis_range(y)],
    )
    return Histogram2D(counts.astype(np.int64), x_edges, y_edges)


def _axis_range(values: np.ndarray) -> tuple[float, float]:
    low, high = float(values.min()), float(values.max())
    if low == high:
        return low - 0.5, high + 0.5
    return low, high


# =============================================================================
# Report cells
# =============================================================================


@dataclass
class CellMetrics:
    """Deterministic metrics of one (surrogate, modality) cell."""
    surrogate: str
    modality: str
    mse: float
    mae: float
    mre: float
    epochs: int
    param_count: int
    mean_uncertainty: Optional[float] = None
    pcc_uq: Optional[float] = None
    pcc_gradient: Optional[float] = None
    uq_evaluated: bool = False
    gradients_evaluated: bool = False

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("pcc_uq", "pcc_gradient"):
            evaluated = self.uq_evaluated if key == "pcc_uq" else self.gradients_evaluated
            if data[key] is None and evaluated:
                data[key] = UNDEFINED
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CellMetrics":
        data = dict(data)
        for key in ("pcc_uq", "pcc_gradient"):
            if data.get(key) == UNDEFINED:
                data[key] = None
        return cls(**data)


@dataclass
class CellTiming:
    """Wall-clock measurements of one cell; not reproducible across runs."""
    train_time_s: float
    inference_mean_ms: Optional[float] = None
    inference_std_ms: Optional[float] = None
    peak_memory_mb: Optional[float] = None


@dataclass
class MetricsReport:
    """All cells of a run, keyed by (surrogate, modality)."""
    cells: dict[tuple[str, str], CellMetrics] = field(default_factory=dict)
    timings: dict[tuple[str, str], CellTiming] = field(default_factory=dict)
    failed: dict[tuple[str, str], str] = field(default_factory=dict)

    def add(self, cell: CellMetrics) -> None:
        self.cells[(cell.surrogate, cell.modality)] = cell


def write_json(path: str | os.PathLike, data: dict) -> None:
    """Deterministic JSON: sorted keys, shortest round-trip floats."""
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path: str | os.PathLike) -> dict:
    return json.loads(Path(path).read_text())
