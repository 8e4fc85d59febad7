"""
Trajectory Dataset Module

Data model for train/val/test trajectory tensors, the CODES-DS v1 binary
container, and per-quantity normalization fitted on the training split.

CODES-DS v1 layout:
- bytes 0-7: magic ASCII "CODESDS1"
- bytes 8-15: header length H (unsigned 64-bit little-endian)
- bytes 16..16+H: UTF-8 JSON header
- payload: train, val, test as row-major little-endian float64
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Self

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"CODESDS1"
HEADER_LENGTH_FORMAT = "<Q"
PAYLOAD_DTYPE = np.dtype("<f8")
STD_FLOOR = 1e-12


class DatasetError(Exception):
    """Raised when a dataset violates its invariants."""


class DatasetFormatError(DatasetError):
    """Raised when a CODES-DS file cannot be decoded."""


class ShapeError(ValueError):
    """Raised when an array does not conform to the expected shape."""


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """Train/val/test trajectories of shape [samples, timesteps, quantities]."""
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    timesteps: Optional[np.ndarray] = None
    labels: Optional[tuple[str, ...]] = None

    @classmethod
    def from_arrays(
        cls,
        train: np.ndarray,
        val: np.ndarray,
        test: np.ndarray,
        timesteps: Optional[np.ndarray] = None,
        labels: Optional[list[str]] = None,
    ) -> Self:
        """Build a validated dataset; arrays are copied to float64 and frozen."""
        arrays = []
        for array in (train, val, test):
            array = np.array(array, dtype=np.float64, copy=True)
            array.setflags(write=False)
            arrays.append(array)
        if timesteps is not None:
            timesteps = np.array(timesteps, dtype=np.float64, copy=True)
            timesteps.setflags(write=False)
        ds = cls(
            arrays[0], arrays[1], arrays[2],
            timesteps=timesteps,
            labels=tuple(labels) if labels is not None else None,
        )
        ds.validate()
        return ds

    @property
    def n_train(self) -> int:
        return self.train.shape[0]

    @property
    def n_val(self) -> int:
        return self.val.shape[0]

    @property
    def n_test(self) -> int:
        return self.test.shape[0]

    @property
    def n_timesteps(self) -> int:
        return self.train.shape[1]

    @property
    def n_quantities(self) -> int:
        return self.train.shape[2]

    @property
    def counts(self) -> tuple[int, int, int, int, int]:
        return (self.n_train, self.n_val, self.n_test, self.n_timesteps, self.n_quantities)

    def time_grid(self) -> np.ndarray:
        """Timesteps if present, else the index grid 0..n_timesteps-1."""
        if self.timesteps is not None:
            return self.timesteps
        return np.arange(self.n_timesteps, dtype=np.float64)

    def validate(self, counts: Optional[dict[str, int]] = None) -> None:
        """
        Check all dataset invariants.

        Args:
            counts: Declared counts (e.g. from a file header) that the tensor
                shapes must agree with exactly.

        Raises:
            DatasetError: On any violation.
        """
        for name, array in (("train", self.train), ("val", self.val), ("test", self.test)):
            if array.ndim != 3:
                raise DatasetError(f"{name} must be 3-dimensional, got shape {array.shape}")
            if array.shape[1:] != self.train.shape[1:]:
                raise DatasetError(
                    f"{name} shape {array.shape} disagrees with train shape {self.train.shape}"
                )
            if not np.all(np.isfinite(array)):
                raise DatasetError(f"{name} contains non-finite values")

        if counts is not None:
            actual = dict(zip(
                ("n_train", "n_val", "n_test", "n_timesteps", "n_quantities"),
                self.counts,
            ))
            for key, value in counts.items():
                if actual[key] != value:
                    raise DatasetError(f"{key}={value} does not match tensor shape ({actual[key]})")

        if self.timesteps is not None:
            if self.timesteps.shape != (self.n_timesteps,):
                raise DatasetError(
                    f"timesteps has length {self.timesteps.shape}, expected {self.n_timesteps}"
                )
            if not np.all(np.isfinite(self.timesteps)):
                raise DatasetError("timesteps contain non-finite values")
            if np.any(np.diff(self.timesteps) <= 0):
                raise DatasetError("timesteps must be strictly increasing")

        if self.labels is not None and len(self.labels) != self.n_quantities:
            raise DatasetError(
                f"{len(self.labels)} labels given for {self.n_quantities} quantities"
            )


def describe_dataset(ds: TrajectoryDataset) -> str:
    """One-line summary of a dataset."""
    n_train, n_val, n_test, n_timesteps, n_quantities = ds.counts
    return (
        f"{n_train}/{n_val}/{n_test} samples, {n_timesteps} timesteps, "
        f"{n_quantities} quantities"
    )


# =============================================================================
# CODES-DS v1 container
# =============================================================================


def _encode_header(ds: TrajectoryDataset) -> bytes:
    header: dict = {
        "n_train": ds.n_train,
        "n_val": ds.n_val,
        "n_test": ds.n_test,
        "n_timesteps": ds.n_timesteps,
        "n_quantities": ds.n_quantities,
        "dtype": "f64",
    }
    if ds.timesteps is not None:
        header["timesteps"] = [float(t) for t in ds.timesteps]
    if ds.labels is not None:
        header["labels"] = list(ds.labels)
    return json.dumps(header, separators=(",", ":")).encode("utf-8")


def encode_dataset(ds: TrajectoryDataset, counts: Optional[dict[str, int]] = None) -> bytes:
    """Serialize a dataset to CODES-DS v1 bytes after validating it."""
    ds.validate(counts)
    header = _encode_header(ds)
    parts = [MAGIC, struct.pack(HEADER_LENGTH_FORMAT, len(header)), header]
    for array in (ds.train, ds.val, ds.test):
        parts.append(np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE).tobytes(order="C"))
    return b"".join(parts)


def decode_dataset(data: bytes) -> TrajectoryDataset:
    """Parse CODES-DS v1 bytes into a validated dataset."""
    if len(data) < 16 or data[:8] != MAGIC:
        raise DatasetFormatError("bad magic")
    (header_length,) = struct.unpack(HEADER_LENGTH_FORMAT, data[8:16])
    if 16 + header_length > len(data):
        raise DatasetFormatError("truncated header")
    try:
        header = json.loads(data[16:16 + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"unreadable header: {e}") from e

    try:
        n_train, n_val, n_test = header["n_train"], header["n_val"], header["n_test"]
        n_timesteps, n_quantities = header["n_timesteps"], header["n_quantities"]
    except KeyError as e:
        raise DatasetFormatError(f"header missing key {e}") from e
    if header.get("dtype") != "f64":
        raise DatasetFormatError(f"unsupported dtype {header.get('dtype')!r}")
    for key in ("n_train", "n_val", "n_test", "n_timesteps", "n_quantities"):
        if not isinstance(header[key], int) or header[key] < 0:
            raise DatasetFormatError(f"{key} must be a non-negative integer")

    row = n_timesteps * n_quantities
    expected = (n_train + n_val + n_test) * row * PAYLOAD_DTYPE.itemsize
    payload = data[16 + header_length:]
    if len(payload) != expected:
        raise DatasetFormatError(
            f"payload is {len(payload)} bytes, header implies {expected}"
        )

    values = np.frombuffer(payload, dtype=PAYLOAD_DTYPE)
    if not np.all(np.isfinite(values)):
        raise DatasetFormatError("payload contains NaN or Inf")

    splits = []
    offset = 0
    for n in (n_train, n_val, n_test):
        splits.append(values[offset:offset + n * row].reshape(n, n_timesteps, n_quantities))
        offset += n * row

    timesteps = header.get("timesteps")
    try:
        return TrajectoryDataset.from_arrays(
            *splits,
            timesteps=np.asarray(timesteps, dtype=np.float64) if timesteps is not None else None,
            labels=header.get("labels"),
        )
    except DatasetError as e:
        raise DatasetFormatError(str(e)) from e


def save_dataset(
    ds: TrajectoryDataset,
    path: str | os.PathLike,
    counts: Optional[dict[str, int]] = None,
) -> None:
    """
    Write a dataset as a CODES-DS v1 file.

    Args:
        ds: Dataset to write
        path: Destination file
        counts: Optional declared counts checked against the tensor shapes

    Raises:
        DatasetError: If the dataset violates an invariant (nothing is written)
        OSError: On IO failure
    """
    data = encode_dataset(ds, counts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    logger.info("Saved dataset to %s (%s)", path, describe_dataset(ds))


def load_dataset(path: str | os.PathLike) -> TrajectoryDataset:
    """Read and validate a CODES-DS v1 file."""
    path = Path(path)
    ds = decode_dataset(path.read_bytes())
    logger.debug("Loaded dataset %s (%s)", path, describe_dataset(ds))
    return ds


# =============================================================================
# Normalization
# =============================================================================


@dataclass(frozen=True, eq=False)
class NormalizationTransform:
    """Optional log10 followed by a per-quantity z-score; time mapped to [0, 1]."""
    log10_enabled: bool
    per_quantity_mean: np.ndarray
    per_quantity_std: np.ndarray
    time_scale: float = 1.0
    clamped: tuple[int, ...] = field(default=(), compare=False)

    @property
    def n_quantities(self) -> int:
        return self.per_quantity_mean.shape[0]

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != self.n_quantities:
            raise ShapeError(
                f"last axis must have {self.n_quantities} quantities, got shape {x.shape}"
            )
        return x

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        if self.log10_enabled:
            x = np.log10(x)
        return (x - self.per_quantity_mean) / self.per_quantity_std

    def invert(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        if not np.all(np.isfinite(x)):
            raise ValueError("cannot invert non-finite values")
        y = x * self.per_quantity_std + self.per_quantity_mean
        if self.log10_enabled:
            y = np.power(10.0, y)
        return y

    def scale_time(self, t: np.ndarray) -> np.ndarray:
        return np.asarray(t, dtype=np.float64) / self.time_scale

    def to_dict(self) -> dict:
        return {
            "log10_enabled": self.log10_enabled,
            "per_quantity_mean": [float(v) for v in self.per_quantity_mean],
            "per_quantity_std": [float(v) for v in self.per_quantity_std],
            "time_scale": float(self.time_scale),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        return cls(
            log10_enabled=bool(data["log10_enabled"]),
            per_quantity_mean=np.asarray(data["per_quantity_mean"], dtype=np.float64),
            per_quantity_std=np.asarray(data["per_quantity_std"], dtype=np.float64),
            time_scale=float(data["time_scale"]),
        )


def fit_normalization(
    train: TrajectoryDataset | np.ndarray,
    log10_enabled: bool = False,
    timesteps: Optional[np.ndarray] = None,
) -> NormalizationTransform:
    """
    Fit a normalization on training data only.

    Args:
        train: A dataset (its train split is used) or a train tensor
        log10_enabled: Apply log10 before the z-score
        timesteps: Time grid for time_scale when a bare tensor is given

    Returns:
        Transform with population mean/std per quantity; std below 1e-12 is
        clamped to 1, and time_scale = max(timesteps).
    """
    if isinstance(train, TrajectoryDataset):
        timesteps = train.time_grid() if timesteps is None else timesteps
        values = train.train
    else:
        values = np.asarray(train, dtype=np.float64)
    if values.ndim != 3:
        raise ShapeError(f"train tensor must be 3-dimensional, got shape {values.shape}")

    flat = values.reshape(-1, values.shape[-1])
    if log10_enabled:
        if np.any(flat <= 0):
            raise DatasetError("log10 normalization requires strictly positive training data")
        flat = np.log10(flat)

    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    clamped = tuple(int(i) for i in np.flatnonzero(std < STD_FLOOR))
    if clamped:
        logger.warning("Clamping std to 1 for constant quantities %s", clamped)
        std = np.where(std < STD_FLOOR, 1.0, std)

    time_scale = 1.0
    if timesteps is not None and len(timesteps) > 0 and float(np.max(timesteps)) > 0:
        time_scale = float(np.max(timesteps))

    return NormalizationTransform(
        log10_enabled=log10_enabled,
        per_quantity_mean=mean,
        per_quantity_std=std,
        time_scale=time_scale,
        clamped=clamped,
    )


def apply_transform(t: NormalizationTransform, x: np.ndarray) -> np.ndarray:
    return t.apply(x)


def invert_transform(t: NormalizationTransform, x: np.ndarray) -> np.ndarray:
    return t.invert(x)


# =============================================================================
# Training subsets
# =============================================================================


@dataclass(frozen=True, eq=False)
class TrainingSubset:
    """
    A view selecting train samples and timesteps of a dataset.

    Val and test always refer to the full, untouched splits of the parent
    dataset. Index arrays are kept sorted so retained elements keep their
    original order.
    """
    dataset: TrajectoryDataset
    sample_indices: np.ndarray
    timestep_indices: np.ndarray

    def __post_init__(self):
        for name in ("sample_indices", "timestep_indices"):
            indices = np.asarray(getattr(self, name), dtype=np.int64)
            if indices.ndim != 1 or indices.size == 0:
                raise DatasetError(f"{name} must be a non-empty vector")
            if np.any(np.diff(indices) <= 0):
                raise DatasetError(f"{name} must be strictly increasing")
            limit = self.dataset.n_train if name == "sample_indices" else self.dataset.n_timesteps
            if indices[0] < 0 or indices[-1] >= limit:
                raise DatasetError(f"{name} out of range [0, {limit})")
            indices.setflags(write=False)
            object.__setattr__(self, name, indices)

    @classmethod
    def full(cls, ds: TrajectoryDataset) -> Self:
        return cls(ds, np.arange(ds.n_train), np.arange(ds.n_timesteps))

    @property
    def train(self) -> np.ndarray:
        return self.dataset.train[np.ix_(self.sample_indices, self.timestep_indices)]

    @property
    def train_times(self) -> np.ndarray:
        return self.dataset.time_grid()[self.timestep_indices]

    @property
    def n_train(self) -> int:
        return self.sample_indices.shape[0]

    @property
    def n_timesteps(self) -> int:
        return self.timestep_indices.shape[0]
