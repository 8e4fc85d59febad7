"""
Surrogate Models Module

Four surrogate architectures mapping initial abundances (and time) to
abundances at later times:

- FCNN: fully-connected net on [y0, t]
- MON: branch/trunk operator net combined by a split scalar product
- LNODE: autoencoder whose latent state follows a learned vector field,
  integrated with fixed-step RK4 and differentiated through the unrolled steps
- LP: autoencoder whose latent state moves along a learnable polynomial in t

All models share build/predict/train. Inputs and targets are normalized
with a NormalizationTransform fitted on the training subset; predictions
are returned in linear space. Time enters every model as t / time_scale.
"""

import json
import logging
import os
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, fields, replace
from enum import StrEnum
from pathlib import Path
from typing import Any, Callable, Optional, Self

import numpy as np

from dataset import (
    NormalizationTransform,
    ShapeError,
    TrainingSubset,
    TrajectoryDataset,
    fit_normalization,
)
from nncore import (
    MLP,
    Activation,
    AdamState,
    ForwardCache,
    LearningRateSchedule,
    MLPSpec,
    NonFiniteGradientError,
    ParamStore,
    adam_step,
    init_params,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from odegen import make_rng

logger = logging.getLogger(__name__)

SHUFFLE_TAG = 0x5348_5546_464C_4500
MANIFEST_NAME = "manifest.json"


class SurrogateKind(StrEnum):
    FCNN = "FCNN"
    MON = "MON"
    LNODE = "LNODE"
    LP = "LP"


# Full-scale epoch budgets; desk-scale defaults are 1/10.
TABLE_EPOCHS = {
    SurrogateKind.FCNN: 1000,
    SurrogateKind.MON: 1000,
    SurrogateKind.LNODE: 15000,
    SurrogateKind.LP: 10000,
}
DESK_EPOCHS = {kind: epochs // 10 for kind, epochs in TABLE_EPOCHS.items()}


class SpecError(ValueError):
    """Raised for invalid surrogate hyperparameters; key names the field when known."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(message)


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss or its gradient becomes non-finite."""

    def __init__(self, kind: str, epoch: int, detail: str):
        self.kind = kind
        self.epoch = epoch
        super().__init__(f"{kind} diverged in epoch {epoch}: {detail}")


class PredictionError(FloatingPointError):
    """Raised when a surrogate produces non-finite outputs."""


_LAYER_FIELDS = ("hidden", "branch_hidden", "trunk_hidden", "encoder_hidden", "ode_hidden")
_INT_FIELDS = ("n_quantities", "epochs", "batch_size", "basis_per_quantity",
               "latent_dim", "substeps", "degree")
_FLOAT_FIELDS = ("learning_rate", "lr_floor")


def _is_int(value: Any) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool)


def _to_float(value: Any, name: str) -> float:
    # YAML 1.1 reads 1e-3 (no dot) as a string
    if isinstance(value, bool):
        raise SpecError(f"{name} must be a number, got {value!r}", name)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            raise SpecError(f"{name} must be a number, got {value!r} (write e.g. 1.0e-3)", name) from None
    if isinstance(value, (int, float, np.integer, np.floating)):
        return float(value)
    raise SpecError(f"{name} must be a number, got {value!r}", name)


@dataclass(frozen=True)
class SurrogateSpec:
    """Architecture and training hyperparameters of one surrogate."""
    kind: SurrogateKind
    n_quantities: int
    learning_rate: float
    epochs: int
    batch_size: int
    lr_floor: Optional[float] = None
    activation: Activation = Activation.TANH
    # FCNN
    hidden: tuple[int, ...] = ()
    # MON
    branch_hidden: tuple[int, ...] = ()
    trunk_hidden: tuple[int, ...] = ()
    basis_per_quantity: int = 40
    # LNODE / LP
    encoder_hidden: tuple[int, ...] = ()
    latent_dim: int = 0
    ode_hidden: tuple[int, ...] = ()
    ode_activation: Activation = Activation.SOFTPLUS
    substeps: int = 16
    degree: int = 6

    def __post_init__(self):
        object.__setattr__(self, "kind", SurrogateKind(self.kind))
        for name in ("activation", "ode_activation"):
            value = getattr(self, name)
            if not isinstance(value, str):
                raise SpecError(f"{name} must be an activation name, got {value!r}", name)
            try:
                object.__setattr__(self, name, Activation.parse(value))
            except ValueError as e:
                raise SpecError(str(e), name) from None
        for name in _LAYER_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, (tuple, list)) or not all(_is_int(n) for n in value):
                raise SpecError(f"{name} must be a list of integers, got {value!r}", name)
            object.__setattr__(self, name, tuple(int(n) for n in value))
        for name in _INT_FIELDS:
            if not _is_int(getattr(self, name)):
                raise SpecError(f"{name} must be an integer, got {getattr(self, name)!r}", name)
        for name in _FLOAT_FIELDS:
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _to_float(value, name))
        self.validate()

    def validate(self) -> None:
        if self.n_quantities < 1:
            raise SpecError("n_quantities must be at least 1", "n_quantities")
        if not 0 < self.learning_rate < np.inf:
            raise SpecError("learning_rate must be positive and finite", "learning_rate")
        if self.lr_floor is not None and not 0 < self.lr_floor < np.inf:
            raise SpecError("lr_floor must be positive and finite", "lr_floor")
        if self.epochs < 0:
            raise SpecError("epochs must be non-negative", "epochs")
        if self.batch_size < 1:
            raise SpecError("batch_size must be at least 1", "batch_size")
        for name in _LAYER_FIELDS:
            if any(n < 1 for n in getattr(self, name)):
                raise SpecError("hidden layer widths must be positive", name)
        match self.kind:
            case SurrogateKind.FCNN:
                pass
            case SurrogateKind.MON:
                if self.basis_per_quantity < 1:
                    raise SpecError("basis_per_quantity must be at least 1", "basis_per_quantity")
            case SurrogateKind.LNODE | SurrogateKind.LP:
                if self.latent_dim < 1:
                    raise SpecError("latent_dim must be at least 1", "latent_dim")
                if self.kind == SurrogateKind.LNODE and self.substeps < 1:
                    raise SpecError("substeps must be at least 1", "substeps")
                if self.kind == SurrogateKind.LP and self.degree < 1:
                    raise SpecError("degree must be at least 1", "degree")

    @classmethod
    def default(cls, kind: "SurrogateKind | str", n_quantities: int, **overrides: Any) -> Self:
        """Architecture defaults with desk-scale epochs."""
        kind = SurrogateKind(kind)
        base: dict[str, Any]
        match kind:
            case SurrogateKind.FCNN:
                base = dict(hidden=(400, 400), activation=Activation.TANH,
                            learning_rate=1.5e-5, batch_size=16)
            case SurrogateKind.MON:
                base = dict(branch_hidden=(150,) * 4, trunk_hidden=(150,) * 7,
                            basis_per_quantity=40, activation=Activation.LEAKY_RELU,
                            learning_rate=5e-4, batch_size=16)
            case SurrogateKind.LNODE:
                base = dict(encoder_hidden=(184, 92, 46), latent_dim=9,
                            ode_hidden=(128, 128), ode_activation=Activation.SOFTPLUS,
                            activation=Activation.RELU, substeps=16,
                            learning_rate=5e-3, lr_floor=1e-5, batch_size=64)
            case SurrogateKind.LP:
                base = dict(encoder_hidden=(200, 100, 50), latent_dim=5, degree=6,
                            activation=Activation.RELU, learning_rate=2e-3, batch_size=64)
        base["epochs"] = DESK_EPOCHS[kind]
        base.update(overrides)
        return cls(kind=kind, n_quantities=n_quantities, **base)

    def with_overrides(self, overrides: dict[str, Any]) -> Self:
        known = {f.name for f in fields(self)} - {"kind", "n_quantities"}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise SpecError(f"unknown hyperparameter(s) for {self.kind}: {', '.join(unknown)}")
        return replace(self, **overrides)

    def to_dict(self) -> dict:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
            elif isinstance(value, StrEnum):
                data[key] = value.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        return cls(**data)

    def schedule(self) -> LearningRateSchedule:
        return LearningRateSchedule(
            initial=self.learning_rate,
            floor=self.lr_floor,
            final_epoch=max(self.epochs - 1, 0),
        )


# Tuned desk-scale settings for the synthetic datasets; applied on top of the
# architecture defaults unless presets are disabled.
_SYNTHETIC_PRESETS: dict[SurrogateKind, dict[str, Any]] = {
    SurrogateKind.FCNN: dict(learning_rate=1e-3, batch_size=8, epochs=100),
    SurrogateKind.MON: dict(learning_rate=5e-4, batch_size=8, epochs=100),
    SurrogateKind.LNODE: dict(learning_rate=5e-3, lr_floor=1e-5, batch_size=50,
                              epochs=300, substeps=2),
    SurrogateKind.LP: dict(learning_rate=2e-3, batch_size=50, epochs=500),
}
DATASET_PRESETS: dict[str, dict[SurrogateKind, dict[str, Any]]] = {
    "lotka_volterra": _SYNTHETIC_PRESETS,
    "simple_ode": _SYNTHETIC_PRESETS,
    "simple_reaction": _SYNTHETIC_PRESETS,
}


def preset_overrides(dataset_id: Optional[str], kind: "SurrogateKind | str") -> dict[str, Any]:
    if dataset_id is None:
        return {}
    return dict(DATASET_PRESETS.get(dataset_id, {}).get(SurrogateKind(kind), {}))


# =============================================================================
# Building blocks
# =============================================================================


def multionet_combine(
    branch_out: np.ndarray,
    trunk_out: np.ndarray,
    n_quantities: int,
    p: Optional[int] = None,
) -> np.ndarray:
    """
    Split scalar product of branch and trunk outputs.

    output[b, q] = sum_j branch[b, q*P + j] * trunk[b, q*P + j]

    Raises:
        ShapeError: If the widths differ or are not P * n_quantities
    """
    branch_out = np.asarray(branch_out, dtype=np.float64)
    trunk_out = np.asarray(trunk_out, dtype=np.float64)
    if branch_out.shape != trunk_out.shape or branch_out.ndim != 2:
        raise ShapeError(f"branch {branch_out.shape} and trunk {trunk_out.shape} must match")
    width = branch_out.shape[1]
    if width % n_quantities != 0:
        raise ShapeError(f"width {width} is not divisible by {n_quantities} quantities")
    if p is None:
        p = width // n_quantities
    if width != p * n_quantities:
        raise ShapeError(f"width {width} != {p} * {n_quantities}")
    batch = branch_out.shape[0]
    return (branch_out * trunk_out).reshape(batch, n_quantities, p).sum(axis=2)


def _time_powers(t: np.ndarray, degree: int) -> np.ndarray:
    """Matrix [len(t), degree] of t^1 .. t^degree."""
    return np.power.outer(np.atleast_1d(np.asarray(t, dtype=np.float64)), np.arange(1, degree + 1))


def latentpoly_evolve(z0: np.ndarray, coeffs: np.ndarray, t: float | np.ndarray) -> np.ndarray:
    """
    z(t)[k] = z0[k] + sum_{d=1..D} coeffs[k, d-1] * t^d, by Horner's scheme.

    Args:
        z0: Latent initial state [..., L]
        coeffs: Polynomial coefficients [L, D], no constant term
        t: Scalar time, or vector [T] to evaluate several times at once

    Returns:
        [..., L] for scalar t, [..., T, L] for vector t
    """
    z0 = np.asarray(z0, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None]
    acc = np.broadcast_to(coeffs[:, -1], (t.shape[0], coeffs.shape[0])).copy()
    for d in range(coeffs.shape[1] - 2, -1, -1):
        acc = acc * t + coeffs[:, d]
    poly = acc * t
    z = z0[..., None, :] + poly
    return z[..., 0, :] if scalar else z


class LatentStateError(FloatingPointError):
    """Raised when a latent ODE trajectory becomes non-finite."""


@dataclass
class LatentTrajectory:
    """Substep states of an unrolled RK4 solve, kept for the reverse pass."""
    states: list[np.ndarray]
    step_sizes: np.ndarray
    substeps: int
    outputs: np.ndarray


def _rk4_step(f: MLP, z: np.ndarray, h: float, caches: Optional[list[ForwardCache]] = None):
    c = caches if caches is not None else [None] * 4
    k1 = f(z, c[0])
    u2 = z + 0.5 * h * k1
    k2 = f(u2, c[1])
    u3 = z + 0.5 * h * k2
    k3 = f(u3, c[2])
    u4 = z + h * k3
    k4 = f(u4, c[3])
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), (z, u2, u3, u4)


def _rk4_step_backward(f: MLP, z: np.ndarray, h: float, adjoint: np.ndarray, grads: ParamStore) -> np.ndarray:
    """Pull the adjoint of z_{n+1} back to z_n, accumulating parameter gradients."""
    caches = [ForwardCache() for _ in range(4)]
    _, (u1, u2, u3, u4) = _rk4_step(f, z, h, caches)
    g_k1 = adjoint * (h / 6.0)
    g_k2 = adjoint * (h / 3.0)
    g_k3 = adjoint * (h / 3.0)
    g_k4 = adjoint * (h / 6.0)
    _, g_u4 = f.backward(u4, g_k4, caches[3], grads)
    g_k3 = g_k3 + h * g_u4
    _, g_u3 = f.backward(u3, g_k3, caches[2], grads)
    g_k2 = g_k2 + 0.5 * h * g_u3
    _, g_u2 = f.backward(u2, g_k2, caches[1], grads)
    g_k1 = g_k1 + 0.5 * h * g_u2
    _, g_u1 = f.backward(u1, g_k1, caches[0], grads)
    return adjoint + g_u1 + g_u2 + g_u3 + g_u4


def solve_latent_ode(f: MLP, z0: np.ndarray, t_grid: np.ndarray, substeps: int) -> LatentTrajectory:
    """Fixed-step RK4 over t_grid with `substeps` equal steps per interval."""
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or t_grid.size == 0 or t_grid[0] != 0.0:
        raise ValueError("t_grid must be a vector starting at 0")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    step_sizes = np.repeat(np.diff(t_grid) / substeps, substeps)
    z = np.asarray(z0, dtype=np.float64)
    outputs = np.empty(z.shape[:-1] + (t_grid.size, z.shape[-1]))
    outputs[..., 0, :] = z
    states = []
    for n, h in enumerate(step_sizes):
        states.append(z)
        z, _ = _rk4_step(f, z, h)
        if not np.all(np.isfinite(z)):
            raise LatentStateError(f"latent state became non-finite at step {n}")
        if (n + 1) % substeps == 0:
            outputs[..., (n + 1) // substeps, :] = z
    return LatentTrajectory(states, step_sizes, substeps, outputs)


def latentode_evolve(
    z0: np.ndarray,
    ode_net: MLP,
    t_grid: np.ndarray,
    substeps: int = 16,
) -> np.ndarray:
    """
    Integrate dz/dt = f(z) from z0 and sample at t_grid.

    Args:
        z0: Latent initial state [L] or [batch, L]
        ode_net: Vector field f (input and output width L)
        t_grid: Strictly increasing normalized times starting at 0
        substeps: RK4 steps per output interval

    Returns:
        [T, L] or [batch, T, L]
    """
    z0 = np.asarray(z0, dtype=np.float64)
    batch = z0[None, :] if z0.ndim == 1 else z0
    outputs = solve_latent_ode(ode_net, batch, t_grid, substeps).outputs
    return outputs[0] if z0.ndim == 1 else outputs


def latentode_backward(
    ode_net: MLP,
    trajectory: LatentTrajectory,
    grad_outputs: np.ndarray,
    grads: ParamStore,
) -> np.ndarray:
    """
    Reverse pass through the unrolled RK4 steps.

    Stage evaluations are recomputed per step from the stored substep states.

    Args:
        ode_net: Vector field used in the forward solve
        trajectory: Result of solve_latent_ode
        grad_outputs: dL/d(outputs) [batch, T, L]
        grads: Parameter gradients of ode_net, accumulated in place

    Returns:
        dL/dz0 [batch, L]
    """
    k = trajectory.substeps
    adjoint = grad_outputs[:, -1, :].copy()
    for n in reversed(range(len(trajectory.states))):
        adjoint = _rk4_step_backward(ode_net, trajectory.states[n], trajectory.step_sizes[n], adjoint, grads)
        if n % k == 0:
            adjoint += grad_outputs[:, n // k, :]
    return adjoint


# =============================================================================
# Surrogate models
# =============================================================================


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


class SurrogateModel(ABC):
    """
    Base class of all surrogates.

    Parameters of all sub-networks share the flat buffer `params`; gradient
    buffers use the same layout, so one Adam state covers the whole model.
    """

    def __init__(self, spec: SurrogateSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.params = np.zeros(self.param_count_for(spec))
        self.transform: Optional[NormalizationTransform] = None
        self.history: list[EpochRecord] = []
        self.epochs_trained = 0
        self._bind_params()

    @staticmethod
    @abstractmethod
    def layout(spec: SurrogateSpec) -> list[tuple[str, MLPSpec | tuple[int, ...]]]:
        """Ordered (name, MLPSpec or array shape) blocks of the parameter buffer."""

    @classmethod
    def param_count_for(cls, spec: SurrogateSpec) -> int:
        total = 0
        for _, block in cls.layout(spec):
            total += param_count(block) if isinstance(block, MLPSpec) else int(np.prod(block))
        return total

    def _views(self, buffer: np.ndarray) -> dict[str, ParamStore | np.ndarray]:
        views: dict[str, ParamStore | np.ndarray] = {}
        offset = 0
        for name, block in self.layout(self.spec):
            if isinstance(block, MLPSpec):
                n = param_count(block)
                views[name] = ParamStore(block, buffer[offset:offset + n])
            else:
                n = int(np.prod(block))
                views[name] = buffer[offset:offset + n].reshape(block)
            offset += n
        return views

    def _bind_params(self) -> None:
        self.blocks = self._views(self.params)

    def net(self, name: str) -> MLP:
        store = self.blocks[name]
        return MLP(store.spec, store)

    def initialize(self, rng: np.random.Generator) -> None:
        for name, block in self.layout(self.spec):
            if isinstance(block, MLPSpec):
                init_params(block, rng, self.blocks[name].flat)

    @property
    def param_count(self) -> int:
        return self.params.shape[0]

    @property
    def kind(self) -> SurrogateKind:
        return self.spec.kind

    @abstractmethod
    def forward(self, y0: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, Any]:
        """Normalized y0 [B, Q] and times [T] -> normalized output [B, T, Q] and a cache."""

    @abstractmethod
    def backward(self, cache: Any, grad_out: np.ndarray, grads: dict) -> None:
        """Accumulate dL/dparams into the gradient views `grads`."""

    def loss_and_grad(self, y0: np.ndarray, t: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
        """Normalized-space MSE over all (sample, t, quantity) and its flat gradient."""
        out, cache = self.forward(y0, t)
        diff = out - target
        loss = float(np.mean(diff * diff))
        grad = np.zeros_like(self.params)
        self.backward(cache, (2.0 / diff.size) * diff, self._views(grad))
        return loss, grad

    def loss(self, y0: np.ndarray, t: np.ndarray, target: np.ndarray) -> float:
        out, _ = self.forward(y0, t)
        return float(np.mean((out - target) ** 2))

    def predict(self, y0: np.ndarray, t_grid: np.ndarray) -> np.ndarray:
        """
        Predict linear-space abundances [batch, T, Q] from initial abundances.

        Raises:
            PredictionError: If the model output is not finite
        """
        if self.transform is None:
            raise RuntimeError("model has no normalization; train it or attach a transform")
        y0 = np.asarray(y0, dtype=np.float64)
        if y0.ndim != 2 or y0.shape[1] != self.spec.n_quantities:
            raise ShapeError(f"y0 must be [batch, {self.spec.n_quantities}], got {y0.shape}")
        out, _ = self.forward(self.transform.apply(y0), self.transform.scale_time(t_grid))
        if not np.all(np.isfinite(out)):
            raise PredictionError(f"{self.kind} produced non-finite outputs")
        return self.transform.invert(out)


class FullyConnected(SurrogateModel):
    """MLP on [y0, t] evaluated once per (sample, t) pair."""

    @staticmethod
    def layout(spec):
        q = spec.n_quantities
        return [("net", MLPSpec((q + 1, *spec.hidden, q), spec.activation))]

    def forward(self, y0, t):
        b, q = y0.shape
        n_t = t.shape[0]
        rows = np.concatenate([np.repeat(y0, n_t, axis=0), np.tile(t, b)[:, None]], axis=1)
        cache = ForwardCache()
        out = self.net("net")(rows, cache)
        return out.reshape(b, n_t, q), (rows, cache)

    def backward(self, cache, grad_out, grads):
        rows, fwd = cache
        self.net("net").backward(rows, grad_out.reshape(rows.shape[0], -1), fwd, grads["net"])


class MultiONet(SurrogateModel):
    """Branch net on y0, trunk net on t, combined by the split scalar product."""

    @staticmethod
    def layout(spec):
        q, p = spec.n_quantities, spec.basis_per_quantity
        return [
            ("branch", MLPSpec((q, *spec.branch_hidden, p * q), spec.activation)),
            ("trunk", MLPSpec((1, *spec.trunk_hidden, p * q), spec.activation)),
        ]

    def forward(self, y0, t):
        b, q = y0.shape
        n_t = t.shape[0]
        p = self.spec.basis_per_quantity
        branch_cache, trunk_cache = ForwardCache(), ForwardCache()
        branch_out = self.net("branch")(y0, branch_cache)
        trunk_in = t[:, None]
        trunk_out = self.net("trunk")(trunk_in, trunk_cache)
        # Row r = (sample r // T, time r % T).
        branch_rows = np.repeat(branch_out, n_t, axis=0)
        trunk_rows = np.tile(trunk_out, (b, 1))
        out = multionet_combine(branch_rows, trunk_rows, q, p)
        return out.reshape(b, n_t, q), (y0, trunk_in, branch_cache, trunk_cache, branch_rows, trunk_rows)

    def backward(self, cache, grad_out, grads):
        y0, trunk_in, branch_cache, trunk_cache, branch_rows, trunk_rows = cache
        b, n_t, q = grad_out.shape
        g = np.repeat(grad_out.reshape(b * n_t, q), self.spec.basis_per_quantity, axis=1)
        g_branch = (g * trunk_rows).reshape(b, n_t, -1).sum(axis=1)
        g_trunk = (g * branch_rows).reshape(b, n_t, -1).sum(axis=0)
        self.net("branch").backward(y0, g_branch, branch_cache, grads["branch"])
        self.net("trunk").backward(trunk_in, g_trunk, trunk_cache, grads["trunk"])


def _autoencoder_layout(spec: SurrogateSpec) -> list[tuple[str, MLPSpec]]:
    q, latent = spec.n_quantities, spec.latent_dim
    encoder = MLPSpec((q, *spec.encoder_hidden, latent), spec.activation)
    decoder = MLPSpec((latent, *reversed(spec.encoder_hidden), q), spec.activation)
    return [("encoder", encoder), ("decoder", decoder)]


class LatentNeuralODE(SurrogateModel):
    """Encoder, latent vector field integrated by RK4, decoder."""

    @staticmethod
    def layout(spec):
        encoder, decoder = _autoencoder_layout(spec)
        latent = spec.latent_dim
        ode = MLPSpec((latent, *spec.ode_hidden, latent), spec.ode_activation)
        return [encoder, ("ode", ode), decoder]

    def forward(self, y0, t):
        b, q = y0.shape
        enc_cache, dec_cache = ForwardCache(), ForwardCache()
        z0 = self.net("encoder")(y0, enc_cache)
        # The solve always starts at t=0; a grid without it is evaluated on [0, t...].
        shifted = t.shape[0] == 0 or t[0] != 0.0
        grid = np.concatenate([[0.0], t]) if shifted else t
        trajectory = solve_latent_ode(self.net("ode"), z0, grid, self.spec.substeps)
        z = trajectory.outputs[:, 1:, :] if shifted else trajectory.outputs
        n_t = z.shape[1]
        rows = z.reshape(b * n_t, -1)
        out = self.net("decoder")(rows, dec_cache)
        return out.reshape(b, n_t, q), (y0, enc_cache, trajectory, shifted, rows, dec_cache)

    def backward(self, cache, grad_out, grads):
        y0, enc_cache, trajectory, shifted, rows, dec_cache = cache
        b, n_t, _ = grad_out.shape
        _, g_rows = self.net("decoder").backward(rows, grad_out.reshape(b * n_t, -1), dec_cache, grads["decoder"])
        g_z = g_rows.reshape(b, n_t, -1)
        if shifted:
            g_z = np.concatenate([np.zeros((b, 1, g_z.shape[2])), g_z], axis=1)
        g_z0 = latentode_backward(self.net("ode"), trajectory, g_z, grads["ode"])
        self.net("encoder").backward(y0, g_z0, enc_cache, grads["encoder"])


class LatentPoly(SurrogateModel):
    """Encoder, latent polynomial in t without constant term, decoder."""

    @staticmethod
    def layout(spec):
        encoder, decoder = _autoencoder_layout(spec)
        return [encoder, decoder, ("coeffs", (spec.latent_dim, spec.degree))]

    def forward(self, y0, t):
        b, q = y0.shape
        n_t = t.shape[0]
        enc_cache, dec_cache = ForwardCache(), ForwardCache()
        z0 = self.net("encoder")(y0, enc_cache)
        z = latentpoly_evolve(z0, self.blocks["coeffs"], t)
        rows = z.reshape(b * n_t, -1)
        out = self.net("decoder")(rows, dec_cache)
        return out.reshape(b, n_t, q), (y0, t, enc_cache, rows, dec_cache)

    def backward(self, cache, grad_out, grads):
        y0, t, enc_cache, rows, dec_cache = cache
        b, n_t, _ = grad_out.shape
        _, g_rows = self.net("decoder").backward(rows, grad_out.reshape(b * n_t, -1), dec_cache, grads["decoder"])
        g_z = g_rows.reshape(b, n_t, -1)
        grads["coeffs"] += np.einsum("btk,td->kd", g_z, _time_powers(t, self.spec.degree))
        self.net("encoder").backward(y0, g_z.sum(axis=1), enc_cache, grads["encoder"])


MODEL_CLASSES: dict[SurrogateKind, type[SurrogateModel]] = {
    SurrogateKind.FCNN: FullyConnected,
    SurrogateKind.MON: MultiONet,
    SurrogateKind.LNODE: LatentNeuralODE,
    SurrogateKind.LP: LatentPoly,
}


def build(spec: SurrogateSpec, seed: int) -> SurrogateModel:
    """Instantiate and seed-initialize a surrogate."""
    model = MODEL_CLASSES[spec.kind](spec, seed)
    model.initialize(make_rng(seed))
    logger.debug("Built %s with %d parameters (seed %d)", spec.kind, model.param_count, seed)
    return model


def predict(model: SurrogateModel, y0: np.ndarray, t_grid: np.ndarray) -> np.ndarray:
    return model.predict(y0, t_grid)


# =============================================================================
# Training
# =============================================================================


def train(
    model: SurrogateModel,
    data: TrajectoryDataset | TrainingSubset,
    epochs: Optional[int] = None,
    batch_size: Optional[int] = None,
    seed: Optional[int] = None,
    log10: bool = False,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> list[EpochRecord]:
    """
    Minimize normalized-space MSE with Adam.

    Trajectories are shuffled each epoch with a seeded generator; the
    validation loss on the full val split is recorded after every epoch.

    Args:
        model: Surrogate to train in place
        data: Dataset or training subset (val/test are always the full splits)
        epochs: Defaults to spec.epochs
        batch_size: Trajectories per batch, defaults to spec.batch_size
        seed: Shuffle seed, defaults to the model's build seed
        log10: Fit the normalization with log10 enabled
        on_epoch: Callback after every epoch

    Returns:
        The model's history

    Raises:
        TrainingDivergedError: If a loss or gradient becomes non-finite
    """
    subset = data if isinstance(data, TrainingSubset) else TrainingSubset.full(data)
    epochs = model.spec.epochs if epochs is None else epochs
    batch_size = model.spec.batch_size if batch_size is None else batch_size
    seed = model.seed if seed is None else seed
    ds = subset.dataset
    if ds.n_quantities != model.spec.n_quantities:
        raise ShapeError(
            f"dataset has {ds.n_quantities} quantities, model expects {model.spec.n_quantities}"
        )

    if model.transform is None:
        model.transform = fit_normalization(subset.train, log10, timesteps=ds.time_grid())
    transform = model.transform

    train_traj = transform.apply(subset.train)
    train_y0 = transform.apply(ds.train[subset.sample_indices, 0, :])
    train_t = transform.scale_time(subset.train_times)
    val_traj = transform.apply(ds.val)
    val_y0 = val_traj[:, 0, :]
    val_t = transform.scale_time(ds.time_grid())

    schedule = replace(model.spec, epochs=epochs).schedule()
    state = AdamState.create(model.param_count, schedule)
    rng = make_rng(seed ^ SHUFFLE_TAG)
    n = subset.n_train
    logger.info("Training %s: %d samples x %d timesteps, %d epochs, batch %d",
                model.kind, n, subset.n_timesteps, epochs, batch_size)

    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad = model.loss_and_grad(train_y0[idx], train_t, train_traj[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(model.kind, epoch + 1, f"training loss is {loss}")
            try:
                adam_step(state, model.params, grad, epoch)
            except NonFiniteGradientError as e:
                raise TrainingDivergedError(model.kind, epoch + 1, str(e)) from e
            total += loss * idx.shape[0]
        try:
            val_loss = model.loss(val_y0, val_t, val_traj)
        except FloatingPointError as e:
            raise TrainingDivergedError(model.kind, epoch + 1, str(e)) from e
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(model.kind, epoch + 1, f"validation loss is {val_loss}")
        record = EpochRecord(epoch + 1, total / n, val_loss)
        model.history.append(record)
        model.epochs_trained += 1
        logger.debug("%s epoch %d: train %.6g, val %.6g", model.kind, record.epoch,
                     record.train_loss, record.val_loss)
        if on_epoch is not None:
            on_epoch(record)
    return model.history


# =============================================================================
# Checkpoints
# =============================================================================


def save_model(model: SurrogateModel, directory: str | os.PathLike) -> Path:
    """Write one CODES-CKPT file per parameter block plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for name, block in model.layout(model.spec):
        filename = f"{name}.ckpt"
        values = model.blocks[name]
        if isinstance(block, MLPSpec):
            save_checkpoint(directory / filename, values.flat, model.seed, model.epochs_trained, spec=block)
        else:
            save_checkpoint(directory / filename, values, model.seed, model.epochs_trained, shape=block)
        files.append({"block": name, "file": filename})
    manifest = {
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "epochs_trained": model.epochs_trained,
        "param_count": model.param_count,
        "transform": model.transform.to_dict() if model.transform is not None else None,
        "blocks": files,
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_model(directory: str | os.PathLike) -> SurrogateModel:
    """Restore a surrogate written by save_model."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    spec = SurrogateSpec.from_dict(manifest["spec"])
    model = MODEL_CLASSES[spec.kind](spec, manifest["seed"])
    for entry in manifest["blocks"]:
        _, values = load_checkpoint(directory / entry["file"])
        target = model.blocks[entry["block"]]
        flat = target.flat if isinstance(target, ParamStore) else target
        flat[...] = values.reshape(flat.shape)
    model.epochs_trained = manifest["epochs_trained"]
    if manifest["transform"] is not None:
        model.transform = NormalizationTransform.from_dict(manifest["transform"])
    return model
