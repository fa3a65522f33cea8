"""Datasets: synthetic generators, CSV and MNIST IDX ingestion, norm scales.

Every experiment in the package consumes a :class:`Dataset` — an immutable
(inputs, outputs) pair with a train/eval role tag.  The generator families
cover the data-generating processes used by the experiment runners:

``gaussian-linear``
    x ~ N(0, sigma_x^2 I_m), y = beta1.x + sigma_xi * N(0,1).
``gaussian-linear-quadratic``
    y = beta1.x + (beta2.x)^2 + xi, the capacity-comparison process.
``random-effect``
    x in R^M with i.i.d. N(0,1) coefficients; only the first m features are
    exposed as model inputs, the rest leak into the residual.
``uniform-quadratic-basis``
    coordinates i.i.d. uniform(-1, 1); y = beta1.x + beta2.(x/2 ⊙ x/2) + xi.
    Supports the same include-m-of-M feature pool as random-effect.
``unit-sphere``
    rows normalized to unit l2 norm (kernel regression experiments).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigurationError, DataError
from .rng import substream

FAMILIES = (
    "gaussian-linear",
    "gaussian-linear-quadratic",
    "random-effect",
    "uniform-quadratic-basis",
    "unit-sphere",
)

BetaSpec = Union[str, list, tuple, np.ndarray, None]


@dataclass(frozen=True)
class Dataset:
    """Immutable paired inputs/outputs with a split role.

    Arrays are stored read-only so instances can be shared freely across
    threads; `invariants` are checked at construction.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    role: str = "train"

    def __post_init__(self):
        inputs = np.ascontiguousarray(np.asarray(self.inputs, dtype=np.float64))
        outputs = np.ascontiguousarray(np.asarray(self.outputs, dtype=np.float64))
        if inputs.ndim != 2:
            raise DataError(f"inputs must be 2-D, got shape {inputs.shape}")
        if inputs.shape[0] < 1 or inputs.shape[1] < 1:
            raise DataError(f"need n >= 1 and m >= 1, got shape {inputs.shape}")
        if outputs.shape != (inputs.shape[0],):
            raise DataError(
                f"outputs length {outputs.shape} does not match {inputs.shape[0]} rows"
            )
        if not np.all(np.isfinite(inputs)) or not np.all(np.isfinite(outputs)):
            raise DataError("dataset contains non-finite values")
        if self.role not in ("train", "eval"):
            raise DataError(f"role must be 'train' or 'eval', got {self.role!r}")
        inputs.setflags(write=False)
        outputs.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    def subset_features(self, m: int) -> "Dataset":
        """Dataset exposing only the first ``m`` input columns (same outputs)."""
        if not 1 <= m <= self.m:
            raise ConfigurationError(f"cannot keep {m} of {self.m} features")
        return Dataset(self.inputs[:, :m].copy(), self.outputs.copy(), self.role)

    def with_role(self, role: str) -> "Dataset":
        return replace(self, role=role)


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of a synthetic data generating process."""

    family: str
    n: int
    m: int
    M: int | None = None  # total feature-pool size; defaults to m
    sigma_x: float = 1.0
    sigma_xi: float = 0.0
    beta1: BetaSpec = None
    beta2: BetaSpec = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(
                f"unknown family {self.family!r}; expected one of {FAMILIES}"
            )
        if self.n < 1 or self.m < 1:
            raise ConfigurationError(f"need n >= 1 and m >= 1, got n={self.n} m={self.m}")
        if self.sigma_x <= 0:
            raise ConfigurationError(f"sigma_x must be > 0, got {self.sigma_x}")
        if self.sigma_xi < 0:
            raise ConfigurationError(f"sigma_xi must be >= 0, got {self.sigma_xi}")
        if self.M is not None and self.m > self.M:
            raise ConfigurationError(f"m={self.m} exceeds feature pool M={self.M}")
        if self.M is not None and self.family in (
            "gaussian-linear",
            "gaussian-linear-quadratic",
            "unit-sphere",
        ):
            if self.M != self.m:
                raise ConfigurationError(
                    f"family {self.family!r} does not support a feature pool (M != m)"
                )

    @property
    def pool_size(self) -> int:
        return self.m if self.M is None else self.M


def _resolve_beta(spec: BetaSpec, dim: int, seed: int, label: str) -> np.ndarray:
    if isinstance(spec, str):
        if spec != "random":
            raise ConfigurationError(f"{label} must be a vector or 'random', got {spec!r}")
        return substream(seed, label).standard_normal(dim)
    if spec is None:
        return np.zeros(dim)
    beta = np.asarray(spec, dtype=np.float64).reshape(-1)
    if beta.shape != (dim,):
        raise ConfigurationError(f"{label} has length {beta.size}, expected {dim}")
    return beta


def generate(config: GeneratorConfig, role: str = "train") -> Dataset:
    """Draw a dataset from the configured generating process.

    Deterministic for a fixed config: every random field (inputs, noise,
    random coefficients) is drawn from its own named substream of the seed.
    """
    n, m, pool = config.n, config.m, config.pool_size
    fam = config.family

    if fam in ("gaussian-linear", "gaussian-linear-quadratic", "random-effect"):
        x = config.sigma_x * substream(config.seed, "x").standard_normal((n, pool))
    elif fam == "uniform-quadratic-basis":
        x = substream(config.seed, "x").uniform(-1.0, 1.0, size=(n, pool))
    elif fam == "unit-sphere":
        raw = substream(config.seed, "x").standard_normal((n, pool))
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ConfigurationError("degenerate zero row while sampling unit sphere")
        x = raw / norms
    else:  # pragma: no cover - guarded by GeneratorConfig
        raise ConfigurationError(f"unknown family {fam!r}")

    xi = config.sigma_xi * substream(config.seed, "xi").standard_normal(n)

    if fam == "gaussian-linear" or fam == "unit-sphere":
        beta1 = _resolve_beta(config.beta1, pool, config.seed, "beta1")
        y = x @ beta1 + xi
    elif fam == "gaussian-linear-quadratic":
        beta1 = _resolve_beta(config.beta1, pool, config.seed, "beta1")
        beta2 = _resolve_beta(config.beta2, pool, config.seed, "beta2")
        y = x @ beta1 + (x @ beta2) ** 2 + xi
    elif fam == "random-effect":
        beta1 = _resolve_beta(
            config.beta1 if config.beta1 is not None else "random",
            pool,
            config.seed,
            "beta1",
        )
        y = x @ beta1 + xi
    else:  # uniform-quadratic-basis
        beta1 = _resolve_beta(config.beta1, pool, config.seed, "beta1")
        beta2 = _resolve_beta(config.beta2, pool, config.seed, "beta2")
        y = x @ beta1 + ((x / 2.0) * (x / 2.0)) @ beta2 + xi

    return Dataset(x[:, :m], y, role=role)


def mean_norm(d: Dataset, p: float) -> float:
    """Empirical mean l_p norm of the inputs, (1/n) sum_i ||x_i||_p."""
    if d.n == 0:  # defensive; Dataset forbids this
        raise DataError("mean_norm of an empty dataset")
    if p not in (1, 2, np.inf) and not (isinstance(p, (int, float)) and p > 1):
        raise ConfigurationError(f"unsupported norm order p={p}")
    return float(np.linalg.norm(d.inputs, ord=p, axis=1).mean())


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------


def load_csv(path: str | Path, role: str = "train") -> Dataset:
    """Read a dataset from CSV with header ``x1,...,xm,y``.

    Any malformed cell fails with its 1-based data row and column name.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        expected = [f"x{i}" for i in range(1, len(header))] + ["y"]
        if len(header) < 2 or header != expected:
            raise DataError(
                f"{path}: header must be x1,...,xm,y; got {','.join(header)}"
            )
        m = len(header) - 1
        rows: list[list[float]] = []
        for i, raw in enumerate(reader, start=1):
            if len(raw) != m + 1:
                raise DataError(
                    f"{path}: row {i} has {len(raw)} cells, expected {m + 1}"
                )
            parsed = []
            for name, cell in zip(header, raw):
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: row {i}, column {name}: cannot parse {cell!r}"
                    ) from None
                if not np.isfinite(value):
                    raise DataError(
                        f"{path}: row {i}, column {name}: non-finite value {cell!r}"
                    )
                parsed.append(value)
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    return Dataset(arr[:, :m], arr[:, m], role=role)


def write_csv(d: Dataset, path: str | Path) -> None:
    """Write a dataset in the canonical CSV schema at full float precision."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(1, d.m + 1)] + ["y"])
        for xi, yi in zip(d.inputs, d.outputs):
            writer.writerow([f"{v:.17g}" for v in xi] + [f"{yi:.17g}"])


# ---------------------------------------------------------------------------
# MNIST IDX
# ---------------------------------------------------------------------------

_IMAGES_MAGIC = 0x00000803
_LABELS_MAGIC = 0x00000801


def _read_idx_images(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < 16:
        raise DataError(f"{path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != _IMAGES_MAGIC:
        raise DataError(f"{path}: bad images magic {magic:#010x}")
    expected = 16 + count * rows * cols
    if len(data) < expected:
        raise DataError(f"{path}: truncated image data ({len(data)} < {expected} bytes)")
    pixels = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols)


def _read_idx_labels(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < 8:
        raise DataError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", data[:8])
    if magic != _LABELS_MAGIC:
        raise DataError(f"{path}: bad labels magic {magic:#010x}")
    if len(data) < 8 + count:
        raise DataError(f"{path}: truncated label data")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8)


def load_mnist_idx(
    images_path: str | Path,
    labels_path: str | Path,
    count: int,
    seed: int = 0,
    role: str = "train",
) -> Dataset:
    """Sample ``count`` examples without replacement from an MNIST IDX pair.

    Pixels are scaled to [0, 1] and flattened; the digit label is used as a
    real-valued regression output.
    """
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    images = _read_idx_images(Path(images_path))
    labels = _read_idx_labels(Path(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    if count > images.shape[0]:
        raise ConfigurationError(
            f"requested {count} examples but only {images.shape[0]} available"
        )
    idx = substream(seed, "mnist-sample").choice(images.shape[0], size=count, replace=False)
    x = images[idx].astype(np.float64) / 255.0
    y = labels[idx].astype(np.float64)
    return Dataset(x, y, role=role)
