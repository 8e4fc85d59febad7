"""
Neural Network Core Module

Dense multi-layer perceptrons with hand-written reverse-mode gradients, the
Adam optimizer with an exponential decay schedule, and CODES-CKPT v1
parameter checkpoints.

Parameters of every network live in one flat float64 buffer. Layer weights
(shape [n_in, n_out], row-major) and biases are views into that buffer in
layer order W_0, b_0, W_1, b_1, ..., so an optimizer can update the flat
vector in place.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Optional, Self

import numpy as np
from scipy.special import expit

from dataset import ShapeError

logger = logging.getLogger(__name__)

LEAKY_RELU_SLOPE = 0.01
CHECKPOINT_MAGIC = b"CODESCK1"


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step receives NaN or Inf gradients."""


class CheckpointError(Exception):
    """Raised when a CODES-CKPT file cannot be decoded."""


class Activation(StrEnum):
    TANH = "tanh"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    SOFTPLUS = "softplus"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, name: "str | Activation") -> "Activation":
        """Accept enum values and the usual spellings (LeakyReLU, ReLU, Softplus)."""
        if isinstance(name, Activation):
            return name
        key = name.strip().lower().replace("-", "_")
        aliases = {"leakyrelu": "leaky_relu", "none": "identity", "linear": "identity"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown activation {name!r}") from None


def activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    match kind:
        case Activation.TANH:
            return np.tanh(z)
        case Activation.RELU:
            return np.maximum(z, 0.0)
        case Activation.LEAKY_RELU:
            return np.where(z > 0, z, LEAKY_RELU_SLOPE * z)
        case Activation.SOFTPLUS:
            return np.logaddexp(0.0, z)
        case Activation.IDENTITY:
            return z
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(kind: Activation, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Chain g through the activation given pre-activation z and output a."""
    match kind:
        case Activation.TANH:
            return g * (1.0 - a * a)
        case Activation.RELU:
            return g * (z > 0)
        case Activation.LEAKY_RELU:
            return g * np.where(z > 0, 1.0, LEAKY_RELU_SLOPE)
        case Activation.SOFTPLUS:
            return g * expit(z)
        case Activation.IDENTITY:
            return g
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class MLPSpec:
    """Layer sizes (input, hidden..., output) and activations."""
    layer_sizes: tuple[int, ...]
    activation: Activation = Activation.TANH
    output_activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        object.__setattr__(self, "activation", Activation.parse(self.activation))
        object.__setattr__(self, "output_activation", Activation.parse(self.output_activation))
        if len(self.layer_sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if any(n < 1 for n in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {self.layer_sizes}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        """Number of affine layers."""
        return len(self.layer_sizes) - 1

    def layer_activation(self, layer: int) -> Activation:
        return self.output_activation if layer == self.n_layers - 1 else self.activation

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation.value,
            "output_activation": self.output_activation.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        return cls(
            layer_sizes=tuple(data["layer_sizes"]),
            activation=Activation.parse(data["activation"]),
            output_activation=Activation.parse(data.get("output_activation", "identity")),
        )


def param_count(spec: MLPSpec) -> int:
    """Sum over layers of n_l * n_{l+1} + n_{l+1}."""
    sizes = spec.layer_sizes
    return sum(n_in * n_out + n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


class ParamStore:
    """Per-layer weights and biases as views into one flat buffer."""

    def __init__(self, spec: MLPSpec, flat: Optional[np.ndarray] = None):
        """
        Args:
            spec: Network layout
            flat: Buffer of length param_count(spec) to view; a zeroed buffer
                is allocated when omitted. The store aliases it, no copy.
        """
        total = param_count(spec)
        if flat is None:
            flat = np.zeros(total)
        if flat.shape != (total,) or flat.dtype != np.float64:
            raise ShapeError(f"flat buffer must be float64 of length {total}, got {flat.shape}")
        self.spec = spec
        self.flat = flat
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        offset = 0
        for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
            self.weights.append(flat[offset:offset + n_in * n_out].reshape(n_in, n_out))
            offset += n_in * n_out
            self.biases.append(flat[offset:offset + n_out])
            offset += n_out

    @property
    def total_count(self) -> int:
        return self.flat.shape[0]

    def copy(self) -> "ParamStore":
        return ParamStore(self.spec, self.flat.copy())

    def zeros_like(self) -> "ParamStore":
        return ParamStore(self.spec)


def init_params(spec: MLPSpec, rng: np.random.Generator, flat: Optional[np.ndarray] = None) -> ParamStore:
    """Uniform fan-in initialization, bound 1/sqrt(n_in) for weights and biases."""
    params = ParamStore(spec, flat)
    for w, b in zip(params.weights, params.biases):
        bound = 1.0 / np.sqrt(w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return params


@dataclass
class ForwardCache:
    """Layer inputs and pre-activations recorded by a forward pass."""
    inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    output: Optional[np.ndarray] = None


def _check_input(spec: MLPSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ShapeError(f"expected input [batch, {spec.n_in}], got {x.shape}")
    return x


def mlp_forward(
    spec: MLPSpec,
    params: ParamStore,
    x: np.ndarray,
    cache: Optional[ForwardCache] = None,
) -> np.ndarray:
    """
    Evaluate the network on a batch.

    Args:
        spec: Network layout
        params: Parameters matching spec
        x: Input [batch, n_in]
        cache: Filled with intermediates for backward() when given

    Returns:
        Output [batch, n_out]
    """
    a = _check_input(spec, x)
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        if cache is not None:
            cache.inputs.append(a)
        z = a @ w + b
        if cache is not None:
            cache.pre_activations.append(z)
        a = activate(spec.layer_activation(layer), z)
    if cache is not None:
        cache.output = a
    return a


def backward(
    spec: MLPSpec,
    params: ParamStore,
    x: np.ndarray,
    upstream_grad: np.ndarray,
    cache: Optional[ForwardCache] = None,
    grads: Optional[ParamStore] = None,
) -> tuple[ParamStore, np.ndarray]:
    """
    Reverse-mode gradients of the forward map.

    Args:
        spec: Network layout
        params: Parameters used in the forward pass
        x: Forward input [batch, n_in]
        upstream_grad: dL/d(output) [batch, n_out]
        cache: Cache from mlp_forward on x; recomputed when omitted
        grads: Store to accumulate parameter gradients into (+=); a fresh
            zeroed store is used when omitted

    Returns:
        (parameter gradients, dL/dx)
    """
    if cache is None:
        cache = ForwardCache()
        mlp_forward(spec, params, x, cache)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != cache.output.shape:
        raise ShapeError(
            f"upstream gradient {upstream_grad.shape} does not match output {cache.output.shape}"
        )
    if grads is None:
        grads = params.zeros_like()

    g = upstream_grad
    for layer in reversed(range(spec.n_layers)):
        z = cache.pre_activations[layer]
        a = cache.output if layer == spec.n_layers - 1 else cache.inputs[layer + 1]
        g = activate_grad(spec.layer_activation(layer), z, a, g)
        grads.weights[layer] += cache.inputs[layer].T @ g
        grads.biases[layer] += g.sum(axis=0)
        g = g @ params.weights[layer].T
    return grads, g


@dataclass
class MLP:
    """A spec bound to its parameters."""
    spec: MLPSpec
    params: ParamStore

    def __call__(self, x: np.ndarray, cache: Optional[ForwardCache] = None) -> np.ndarray:
        return mlp_forward(self.spec, self.params, x, cache)

    def backward(
        self,
        x: np.ndarray,
        upstream_grad: np.ndarray,
        cache: Optional[ForwardCache] = None,
        grads: Optional[ParamStore] = None,
    ) -> tuple[ParamStore, np.ndarray]:
        return backward(self.spec, self.params, x, upstream_grad, cache, grads)


# =============================================================================
# Adam
# =============================================================================


@dataclass(frozen=True)
class LearningRateSchedule:
    """Constant rate, or exponential decay lr0 * (floor/lr0)^(epoch/T) to a floor."""
    initial: float
    floor: Optional[float] = None
    final_epoch: int = 0

    def at(self, epoch: int) -> float:
        if self.floor is None or self.final_epoch <= 0:
            return self.initial
        fraction = min(max(epoch, 0), self.final_epoch) / self.final_epoch
        return self.initial * (self.floor / self.initial) ** fraction


@dataclass
class AdamState:
    """Moment estimates and step counter of one optimizer."""
    m: np.ndarray
    v: np.ndarray
    schedule: LearningRateSchedule
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n_params: int, schedule: LearningRateSchedule) -> Self:
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), schedule=schedule)


def adam_step(
    state: AdamState,
    params: np.ndarray,
    grads: np.ndarray,
    epoch: int = 0,
) -> tuple[np.ndarray, AdamState]:
    """
    One bias-corrected Adam update, applied to params in place.

    Args:
        state: Optimizer state (updated in place)
        params: Flat parameter vector
        grads: Flat gradient vector
        epoch: Epoch used to read the learning rate schedule

    Raises:
        NonFiniteGradientError: If any gradient entry is NaN or Inf
    """
    if params.shape != state.m.shape or grads.shape != state.m.shape:
        raise ShapeError(
            f"params {params.shape} / grads {grads.shape} do not match optimizer state {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise NonFiniteGradientError(f"{bad} non-finite gradient entries at step {state.t + 1}")

    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= state.schedule.at(epoch) * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# =============================================================================
# CODES-CKPT v1
# =============================================================================


def encode_checkpoint(header: dict, values: np.ndarray) -> bytes:
    """Magic, u64 header length, JSON header, then little-endian float64 values."""
    values = np.ascontiguousarray(values, dtype="<f8").ravel()
    header = dict(header, n_values=int(values.shape[0]))
    encoded = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return b"".join([CHECKPOINT_MAGIC, struct.pack("<Q", len(encoded)), encoded, values.tobytes()])


def decode_checkpoint(data: bytes) -> tuple[dict, np.ndarray]:
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    (length,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from e
    payload = data[16 + length:]
    if len(payload) != 8 * header.get("n_values", -1):
        raise CheckpointError("payload size does not match header")
    return header, np.frombuffer(payload, dtype="<f8").astype(np.float64)


def save_checkpoint(
    path: str | os.PathLike,
    values: np.ndarray,
    seed: int,
    epoch: int,
    spec: Optional[MLPSpec] = None,
    shape: Optional[tuple[int, ...]] = None,
) -> None:
    """Write one sub-network (spec) or raw array (shape) as a CODES-CKPT v1 file."""
    header = {
        "format": "CODES-CKPT",
        "version": 1,
        "seed": int(seed),
        "epoch": int(epoch),
        "spec": spec.to_dict() if spec is not None else None,
        "shape": list(shape) if shape is not None else list(np.shape(values)),
    }
    Path(path).write_bytes(encode_checkpoint(header, values))


def load_checkpoint(path: str | os.PathLike) -> tuple[dict, np.ndarray]:
    header, values = decode_checkpoint(Path(path).read_bytes())
    if header.get("spec") is None:
        values = values.reshape(header["shape"])
    return header, values
