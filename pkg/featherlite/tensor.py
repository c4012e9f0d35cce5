"""Shape-checked tensor helpers, deterministic RNG streams, and weight initializers.

Tensors are plain ``numpy.ndarray`` values. Images are channels-last
``[height, width, channel]`` and batches prepend a sample axis. Training state
is 32-bit; 64-bit arrays are accepted everywhere so gradient checks can run in
double precision.
"""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

Tensor = npt.NDArray[np.floating]

DEFAULT_DTYPE = np.float32
BYTES_PER_PARAM = 4
TRUNCATION_STDDEVS = 2.0


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


class ConfigurationError(ValueError):
    """Raised when an operation is configured with invalid hyperparameters."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf appears in an engine-produced tensor.

    Attributes:
        where: Name of the operation or graph node that produced the value.
    """

    def __init__(self, message: str, *, where: str = "") -> None:
        super().__init__(message)
        self.where = where


@dataclass(frozen=True, slots=True)
class RngStream:
    """A named, reproducible random stream.

    Identical ``(seed, stream_label)`` pairs always yield identical draws;
    different labels hash to unrelated entropy and so to independent streams.
    """

    seed: int
    stream_label: str

    def generator(self) -> np.random.Generator:
        """Return a fresh generator positioned at the start of this stream."""
        label_digest = hashlib.sha256(self.stream_label.encode("utf-8")).digest()
        label_words = np.frombuffer(label_digest, dtype="<u4").tolist()
        seed = int(self.seed) & 0xFFFF_FFFF_FFFF_FFFF
        entropy = [seed & 0xFFFF_FFFF, seed >> 32, *label_words]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, suffix: str) -> RngStream:
        """Derive a sub-stream whose label extends this one."""
        return RngStream(self.seed, f"{self.stream_label}/{suffix}")


def he_normal_init(
    shape: Sequence[int],
    fan_in: int,
    rng: RngStream,
    dtype: npt.DTypeLike = DEFAULT_DTYPE,
) -> np.ndarray:
    """Draw He-normal weights truncated at two standard deviations.

    Samples outside ``±2·stddev`` are redrawn until every value lies inside
    the band, so the returned tensor never exceeds it.

    Args:
        shape: Weight tensor shape.
        fan_in: Number of inputs feeding each unit (``kh·kw·C`` for conv
            kernels, ``in`` for dense weights).
        rng: Stream the draws come from.
        dtype: Output dtype.

    Returns:
        Array of ``shape`` with mean 0 and stddev ``sqrt(2 / fan_in)`` before
        truncation.

    Raises:
        ConfigurationError: If ``fan_in`` is not positive.
    """
    if fan_in <= 0:
        raise ConfigurationError(f"fan_in must be positive, got {fan_in}")
    stddev = float(np.sqrt(2.0 / fan_in))
    limit = TRUNCATION_STDDEVS * stddev
    gen = rng.generator()
    values = gen.normal(0.0, stddev, size=tuple(shape))
    outside = np.abs(values) > limit
    while np.any(outside):
        values[outside] = gen.normal(0.0, stddev, size=int(outside.sum()))
        outside = np.abs(values) > limit
    return values.astype(dtype)


def zeros_init(shape: Sequence[int], dtype: npt.DTypeLike = DEFAULT_DTYPE) -> np.ndarray:
    """Bias initializer: all zeros."""
    return np.zeros(tuple(shape), dtype=dtype)


def flatten_index(h: int, w: int, c: int, W: int, C: int, H: int | None = None) -> int:  # noqa: N803
    """Map an ``(h, w, c)`` feature-map position to its flat row-major index.

    This ordering is shared by ``Flatten`` and by dense-to-conv weight
    reshaping.

    Raises:
        IndexError: If any coordinate is out of range.
    """
    if not (0 <= w < W and 0 <= c < C and h >= 0 and (H is None or h < H)):
        raise IndexError(f"index ({h}, {w}, {c}) out of range for W={W}, C={C}, H={H}")
    return (h * W + w) * C + c


def unflatten_index(index: int, W: int, C: int) -> tuple[int, int, int]:  # noqa: N803
    """Inverse of :func:`flatten_index`."""
    if index < 0:
        raise IndexError(f"flat index {index} is negative")
    hw, c = divmod(index, C)
    h, w = divmod(hw, W)
    return h, w, c


def check_finite(array: np.ndarray, where: str) -> np.ndarray:
    """Return ``array`` unchanged, raising NonFiniteError if it holds NaN or Inf."""
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values produced by {where}", where=where)
    return array


def require_shape(array: np.ndarray, expected: Sequence[int], what: str) -> None:
    """Raise ShapeError unless ``array.shape`` equals ``expected``."""
    if tuple(array.shape) != tuple(expected):
        raise ShapeError(f"{what}: expected shape {tuple(expected)}, got {tuple(array.shape)}")
