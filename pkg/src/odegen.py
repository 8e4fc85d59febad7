"""
Synthetic ODE Systems Module

The three low-dimensional baseline systems (lotka_volterra, simple_ode,
simple_reaction), an adaptive Dormand-Prince 5(4) integrator, and seeded
generation of trajectory datasets.

Random streams use numpy's Philox counter-based generator. The train, val
and test initial conditions come from keys seed ^ TRAIN_TAG, seed ^ VAL_TAG
and seed ^ TEST_TAG, so the three splits never share a stream.
"""

import logging
from dataclasses import dataclass
from enum import StrEnum
from typing import Callable, Optional

import numpy as np

from dataset import TrajectoryDataset

logger = logging.getLogger(__name__)

TRAIN_TAG = 0x7472_6169_6E00_0001
VAL_TAG = 0x7661_6C00_0000_0002
TEST_TAG = 0x7465_7374_0000_0003

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10
DEFAULT_SPLIT = (500, 50, 150)
DEFAULT_TIMESTEPS = 100


class IntegrationError(RuntimeError):
    """Raised when the integrator cannot advance the solution."""


class StepSizeUnderflowError(IntegrationError):
    """Raised when the adaptive step size collapses."""

    def __init__(self, t: float, h: float):
        self.t = t
        self.h = h
        super().__init__(f"step size underflow at t={t!r} (h={h!r})")


class SystemId(StrEnum):
    LOTKA_VOLTERRA = "lotka_volterra"
    SIMPLE_ODE = "simple_ode"
    SIMPLE_REACTION = "simple_reaction"


# =============================================================================
# Right-hand sides and Jacobians
# =============================================================================


def _lotka_volterra_rhs(y: np.ndarray) -> np.ndarray:
    p1, p2, p3, q1, q2, q3 = y
    return np.array([
        0.5 * p1 - 0.02 * p1 * q1 - 0.01 * p1 * q2,
        0.6 * p2 - 0.03 * p2 * q1 - 0.015 * p2 * q3,
        0.4 * p3 - 0.01 * p3 * q2 - 0.025 * p3 * q3,
        -0.1 * q1 + 0.005 * p1 * q1 + 0.007 * p2 * q1,
        -0.08 * q2 + 0.006 * p1 * q2 + 0.009 * p3 * q2,
        -0.12 * q3 + 0.008 * p2 * q3 + 0.01 * p3 * q3,
    ])


def _lotka_volterra_jacobian(y: np.ndarray) -> np.ndarray:
    p1, p2, p3, q1, q2, q3 = y
    return np.array([
        [0.5 - 0.02 * q1 - 0.01 * q2, 0, 0, -0.02 * p1, -0.01 * p1, 0],
        [0, 0.6 - 0.03 * q1 - 0.015 * q3, 0, -0.03 * p2, 0, -0.015 * p2],
        [0, 0, 0.4 - 0.01 * q2 - 0.025 * q3, 0, -0.01 * p3, -0.025 * p3],
        [0.005 * q1, 0.007 * q1, 0, -0.1 + 0.005 * p1 + 0.007 * p2, 0, 0],
        [0.006 * q2, 0, 0.009 * q2, 0, -0.08 + 0.006 * p1 + 0.009 * p3, 0],
        [0, 0.008 * q3, 0.01 * q3, 0, 0, -0.12 + 0.008 * p2 + 0.01 * p3],
    ], dtype=np.float64)


def _simple_ode_rhs(y: np.ndarray) -> np.ndarray:
    n0, n1, n2, n3, n4 = y
    return np.array([
        -0.8 * n0 - 0.2 * n0 * n2,
        0.8 * n0 - 0.5 * n1 + 0.4 * n0 * n2,
        0.5 * n1 - 0.2 * n0 * n2,
        0.2 * n0 + 0.625 * n1,
        # Production 1.6 n0 n2 and consumption 0.5 n0 n2; net 1.1 n0 n2.
        1.6 * n0 * n2 - 0.5 * n0 * n2,
    ])


def _simple_ode_jacobian(y: np.ndarray) -> np.ndarray:
    n0, n1, n2, n3, n4 = y
    return np.array([
        [-0.8 - 0.2 * n2, 0, -0.2 * n0, 0, 0],
        [0.8 + 0.4 * n2, -0.5, 0.4 * n0, 0, 0],
        [-0.2 * n2, 0.5, -0.2 * n0, 0, 0],
        [0.2, 0.625, 0, 0, 0],
        [1.1 * n2, 0, 1.1 * n0, 0, 0],
    ], dtype=np.float64)


SIMPLE_REACTION_MATRIX = np.array([
    [-0.1, 0.1, 0, 0, 0, 0],
    [0.1, -0.15, 0.05, 0, 0, 0],
    [0, 0.15, -0.1, 0.03, 0, 0],
    [0, 0, 0.1, -0.07, 0.01, 0],
    [0, 0, 0, 0.07, -0.05, 0],
    [0, 0, 0, 0, 0.05, 0],
], dtype=np.float64)
SIMPLE_REACTION_MATRIX.setflags(write=False)


def _simple_reaction_rhs(y: np.ndarray) -> np.ndarray:
    return SIMPLE_REACTION_MATRIX @ y


def _simple_reaction_jacobian(y: np.ndarray) -> np.ndarray:
    return SIMPLE_REACTION_MATRIX.copy()


@dataclass(frozen=True, eq=False)
class ODESystem:
    """An autonomous polynomial ODE system with its IC sampling box."""
    id: SystemId
    dim: int
    labels: tuple[str, ...]
    ic_low: np.ndarray
    ic_high: np.ndarray
    t_end: float
    _rhs: Callable[[np.ndarray], np.ndarray]
    _jacobian: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.ic_low.shape != (self.dim,) or self.ic_high.shape != (self.dim,):
            raise ValueError(f"{self.id}: IC bounds must have length {self.dim}")
        if np.any(self.ic_low < 0) or np.any(self.ic_low > self.ic_high):
            raise ValueError(f"{self.id}: IC bounds must satisfy 0 <= low <= high")
        if self.t_end <= 0:
            raise ValueError(f"{self.id}: t_end must be positive")

    def with_bounds(self, ic_low, ic_high) -> "ODESystem":
        """Copy of this system with different IC sampling bounds."""
        return ODESystem(
            self.id, self.dim, self.labels,
            np.broadcast_to(np.asarray(ic_low, dtype=np.float64), (self.dim,)).copy(),
            np.broadcast_to(np.asarray(ic_high, dtype=np.float64), (self.dim,)).copy(),
            self.t_end, self._rhs, self._jacobian,
        )


def _make_system(
    system_id: SystemId,
    labels: tuple[str, ...],
    t_end: float,
    rhs_fn: Callable[[np.ndarray], np.ndarray],
    jacobian_fn: Callable[[np.ndarray], np.ndarray],
) -> ODESystem:
    dim = len(labels)
    return ODESystem(
        id=system_id,
        dim=dim,
        labels=labels,
        ic_low=np.full(dim, 0.1),
        ic_high=np.full(dim, 2.0),
        t_end=t_end,
        _rhs=rhs_fn,
        _jacobian=jacobian_fn,
    )


SYSTEMS: dict[SystemId, ODESystem] = {
    SystemId.LOTKA_VOLTERRA: _make_system(
        SystemId.LOTKA_VOLTERRA,
        ("p1", "p2", "p3", "q1", "q2", "q3"),
        100.0,
        _lotka_volterra_rhs,
        _lotka_volterra_jacobian,
    ),
    SystemId.SIMPLE_ODE: _make_system(
        SystemId.SIMPLE_ODE,
        ("n0", "n1", "n2", "n3", "n4"),
        10.0,
        _simple_ode_rhs,
        _simple_ode_jacobian,
    ),
    SystemId.SIMPLE_REACTION: _make_system(
        SystemId.SIMPLE_REACTION,
        ("s1", "s2", "s3", "s4", "s5", "s6"),
        10.0,
        _simple_reaction_rhs,
        _simple_reaction_jacobian,
    ),
}


def get_system(name: str) -> ODESystem:
    """Look up a system by id; raises ValueError for unknown ids."""
    try:
        return SYSTEMS[SystemId(name)]
    except ValueError:
        known = ", ".join(s.value for s in SystemId)
        raise ValueError(f"unknown dataset {name!r} (known: {known})") from None


def _check_state(system: ODESystem, state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (system.dim,):
        raise ValueError(f"{system.id} expects a state of length {system.dim}, got {state.shape}")
    return state


def rhs(system: ODESystem, state: np.ndarray) -> np.ndarray:
    """Time derivative of `state` under `system`."""
    return system._rhs(_check_state(system, state))


def jacobian(system: ODESystem, state: np.ndarray) -> np.ndarray:
    """Analytic Jacobian d(rhs)/d(state)."""
    return system._jacobian(_check_state(system, state))


# =============================================================================
# Dormand-Prince 5(4)
# =============================================================================

DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
DP_B4 = np.array([
    5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40,
])
DP_E = DP_B5 - DP_B4

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
MAX_STEPS = 1_000_000


@dataclass
class IntegrationStats:
    """Step counters of one integrate() call."""
    accepted: int = 0
    rejected: int = 0
    evaluations: int = 0


def _dopri_step(
    f: Callable[[np.ndarray], np.ndarray],
    y: np.ndarray,
    f0: np.ndarray,
    h: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One Dormand-Prince step; returns (y5, f(y5), error estimate)."""
    k = np.empty((7, y.shape[0]))
    k[0] = f0
    for i in range(1, 7):
        k[i] = f(y + h * (DP_A[i] @ k[:i]))
    # Stage 7 is evaluated at the 5th-order solution (FSAL).
    y_new = y + h * (DP_A[6] @ k[:6])
    return y_new, k[6], h * (DP_E @ k)


def _initial_step(
    f: Callable[[np.ndarray], np.ndarray],
    y0: np.ndarray,
    f0: np.ndarray,
    rtol: float,
    atol: float,
) -> float:
    # Hairer, Norsett & Wanner, Solving ODEs I, II.4.
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = f(y0 + h0 * f0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def integrate(
    system: ODESystem,
    y0: np.ndarray,
    t_grid: np.ndarray,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    stats: Optional[IntegrationStats] = None,
) -> np.ndarray:
    """
    Integrate `system` from y0 and sample the solution on t_grid.

    Adaptive Dormand-Prince 5(4) with local extrapolation. A step is
    accepted when every component of the error estimate is within
    atol + rtol * max(|y|, |y_new|). Steps are shortened to land exactly on
    each grid time, so every row is a step endpoint.

    Args:
        system: System to integrate
        y0: Initial state, length system.dim
        t_grid: Strictly increasing output times starting at 0
        rtol: Relative tolerance
        atol: Absolute tolerance
        stats: Optional counters filled in place

    Returns:
        Array [len(t_grid), dim]; row 0 equals y0 exactly.

    Raises:
        StepSizeUnderflowError: If the step size collapses
        IntegrationError: On non-finite states or too many steps
    """
    y = _check_state(system, y0).copy()
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or t_grid.size == 0:
        raise ValueError("t_grid must be a non-empty vector")
    if t_grid[0] != 0.0:
        raise ValueError("t_grid must start at 0")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    if not np.all(np.isfinite(y)):
        raise IntegrationError("initial state is not finite")

    stats = stats if stats is not None else IntegrationStats()
    f = system._rhs
    out = np.empty((t_grid.size, system.dim))
    out[0] = y
    if t_grid.size == 1:
        return out

    t = 0.0
    f0 = f(y)
    stats.evaluations += 1
    h = _initial_step(f, y, f0, rtol, atol)
    stats.evaluations += 1

    for index in range(1, t_grid.size):
        target = t_grid[index]
        while t < target:
            if stats.accepted + stats.rejected >= MAX_STEPS:
                raise IntegrationError(f"exceeded {MAX_STEPS} steps at t={t!r}")
            min_step = 16 * np.spacing(max(abs(t), abs(target)))
            if h < min_step:
                raise StepSizeUnderflowError(t, h)
            last = t + h >= target
            step = target - t if last else h

            y_new, f_new, err = _dopri_step(f, y, f0, step)
            stats.evaluations += 6
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            with np.errstate(invalid="ignore"):
                err_norm = float(np.max(np.abs(err) / scale))

            if not np.isfinite(err_norm):
                if not np.all(np.isfinite(y_new)):
                    raise IntegrationError(f"non-finite state near t={t!r}")
                err_norm = np.inf

            if err_norm <= 1.0:
                t = target if last else t + step
                y, f0 = y_new, f_new
                stats.accepted += 1
                factor = MAX_FACTOR if err_norm == 0 else min(
                    MAX_FACTOR, max(MIN_FACTOR, SAFETY * err_norm ** -0.2)
                )
                # A step shortened to hit the grid says little about the
                # next one, so never shrink h after it.
                h = max(h, step * factor) if last else step * factor
            else:
                stats.rejected += 1
                h = step * max(MIN_FACTOR, SAFETY * err_norm ** -0.2)
        out[index] = y

    if not np.all(np.isfinite(out)):
        raise IntegrationError("solution contains non-finite values")
    logger.debug(
        "%s integrated: %d accepted, %d rejected, %d evaluations",
        system.id, stats.accepted, stats.rejected, stats.evaluations,
    )
    return out


# =============================================================================
# Dataset generation
# =============================================================================


def make_rng(seed: int) -> np.random.Generator:
    """Philox generator keyed by a non-negative 64-bit seed."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.Philox(key=seed & 0xFFFF_FFFF_FFFF_FFFF))


def sample_initial_conditions(system: ODESystem, n: int, seed: int) -> np.ndarray:
    """Draw n initial states i.i.d. uniform on [ic_low, ic_high]."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = make_rng(seed)
    return rng.uniform(system.ic_low, system.ic_high, size=(n, system.dim))


def uniform_time_grid(system: ODESystem, n_timesteps: int) -> np.ndarray:
    return np.linspace(0.0, system.t_end, n_timesteps)


def _integrate_split(
    system: ODESystem,
    ics: np.ndarray,
    t_grid: np.ndarray,
    rtol: float,
    atol: float,
    split: str,
) -> np.ndarray:
    out = np.empty((ics.shape[0], t_grid.size, system.dim))
    for i, y0 in enumerate(ics):
        try:
            out[i] = integrate(system, y0, t_grid, rtol=rtol, atol=atol)
        except IntegrationError as e:
            raise IntegrationError(f"{split} sample {i}: {e}") from e
    return out


def generate_dataset(
    system: ODESystem,
    n_train: int = DEFAULT_SPLIT[0],
    n_val: int = DEFAULT_SPLIT[1],
    n_test: int = DEFAULT_SPLIT[2],
    n_timesteps: int = DEFAULT_TIMESTEPS,
    seed: int = 42,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> TrajectoryDataset:
    """
    Generate a seeded trajectory dataset for `system`.

    Returns:
        Dataset on a uniform grid over [0, t_end] with labels and timesteps.

    Raises:
        IntegrationError: Naming the split and sample index that failed
    """
    for name, count in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test),
                        ("n_timesteps", n_timesteps)):
        if count < 1:
            raise ValueError(f"{name} must be at least 1")

    t_grid = uniform_time_grid(system, n_timesteps)
    logger.info(
        "Generating %s: %d/%d/%d samples, %d timesteps, seed %d",
        system.id, n_train, n_val, n_test, n_timesteps, seed,
    )
    splits = []
    for split, count, tag in (("train", n_train, TRAIN_TAG), ("val", n_val, VAL_TAG),
                              ("test", n_test, TEST_TAG)):
        ics = sample_initial_conditions(system, count, seed ^ tag)
        splits.append(_integrate_split(system, ics, t_grid, rtol, atol, split))

    return TrajectoryDataset.from_arrays(
        *splits,
        timesteps=t_grid,
        labels=list(system.labels),
    )
