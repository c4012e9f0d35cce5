"""Random rotation, zoom, brightness, and translation for the augmented input stream.

Each image gets its own :class:`RngStream` labelled with the epoch and its
global sample index, so an epoch is reproducible and every epoch re-draws.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Literal

import numpy as np
from scipy import ndimage

from featherlite.tensor import ConfigurationError, RngStream

logger = logging.getLogger(__name__)

RotationUnits = Literal["turns", "radians"]

_INTERPOLATION_ORDER = {"bilinear": 1, "nearest": 0}
_FILL_MODES = {"reflect": "reflect", "nearest": "nearest", "constant": "constant", "wrap": "grid-wrap"}


@dataclass
class AugmentConfig:
    """Augmentation ranges.

    Attributes:
        rotation_factor: Max rotation, in full turns (default) or radians.
        zoom_factor: Max relative zoom, drawn separately for height and width.
        brightness_factor: Max additive brightness shift on the [0, 1] scale.
        translation_factor: Max shift as a fraction of height and width.
        interpolation: ``bilinear`` or ``nearest``.
        fill: Border handling: ``reflect``, ``nearest``, ``constant`` or ``wrap``.
        rotation_units: ``turns`` or ``radians``.
    """

    rotation_factor: float = 0.1
    zoom_factor: float = 0.2
    brightness_factor: float = 0.0
    translation_factor: float = 0.2
    interpolation: str = "bilinear"
    fill: str = "reflect"
    rotation_units: RotationUnits = "turns"

    def __post_init__(self) -> None:
        for name in ("rotation_factor", "zoom_factor", "brightness_factor", "translation_factor"):
            value = float(getattr(self, name))
            if not 0.0 <= value < 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1), got {value}")
            setattr(self, name, value)
        if self.interpolation not in _INTERPOLATION_ORDER:
            raise ConfigurationError(f"unknown interpolation {self.interpolation!r}")
        if self.fill not in _FILL_MODES:
            raise ConfigurationError(f"unknown fill mode {self.fill!r}")
        if self.rotation_units not in ("turns", "radians"):
            raise ConfigurationError(
                f"rotation_units must be 'turns' or 'radians', got {self.rotation_units!r}"
            )

    @classmethod
    def disabled(cls) -> AugmentConfig:
        return cls(rotation_factor=0.0, zoom_factor=0.0, brightness_factor=0.0, translation_factor=0.0)

    @property
    def max_angle(self) -> float:
        """Largest rotation magnitude in radians."""
        if self.rotation_units == "turns":
            return self.rotation_factor * 2.0 * math.pi
        return self.rotation_factor

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> AugmentConfig:
        return cls(**(data or {}))


@dataclass(frozen=True, slots=True)
class AugmentParams:
    """One concrete draw: angle (radians), zooms, brightness delta, shift in pixels."""

    angle: float = 0.0
    zoom_h: float = 1.0
    zoom_w: float = 1.0
    brightness: float = 0.0
    shift_h: float = 0.0
    shift_w: float = 0.0


def draw_params(cfg: AugmentConfig, shape: tuple[int, ...], rng: RngStream) -> AugmentParams:
    """Draw every stage's parameters from ``rng``.

    All six values are always drawn in the same order, so a zero factor in
    one stage does not shift the draws of the others.
    """
    height, width = shape[0], shape[1]
    u = rng.generator().uniform(-1.0, 1.0, size=6)
    return AugmentParams(
        angle=float(u[0] * cfg.max_angle),
        zoom_h=float(1.0 + u[1] * cfg.zoom_factor),
        zoom_w=float(1.0 + u[2] * cfg.zoom_factor),
        brightness=float(u[3] * cfg.brightness_factor),
        shift_h=float(u[4] * cfg.translation_factor * height),
        shift_w=float(u[5] * cfg.translation_factor * width),
    )


def _resample(image: np.ndarray, matrix: np.ndarray, shift: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Sample ``image`` at ``matrix @ (o - c) + c - shift`` for each output pixel ``o``."""
    height, width = image.shape[:2]
    center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    offset = center - matrix @ center - shift
    full = np.eye(3)
    full[:2, :2] = matrix
    return ndimage.affine_transform(
        image,
        full,
        offset=np.array([offset[0], offset[1], 0.0]),
        order=_INTERPOLATION_ORDER[cfg.interpolation],
        mode=_FILL_MODES[cfg.fill],
        prefilter=False,
    )


def rotate(image: np.ndarray, angle: float, cfg: AugmentConfig) -> np.ndarray:
    """Rotate about the image center by ``angle`` radians."""
    cos, sin = math.cos(angle), math.sin(angle)
    return _resample(image, np.array([[cos, -sin], [sin, cos]]), np.zeros(2), cfg)


def zoom(image: np.ndarray, zoom_h: float, zoom_w: float, cfg: AugmentConfig) -> np.ndarray:
    """Zoom about the center; factors above 1 zoom out."""
    return _resample(image, np.diag([zoom_h, zoom_w]), np.zeros(2), cfg)


def translate(image: np.ndarray, shift_h: float, shift_w: float, cfg: AugmentConfig) -> np.ndarray:
    """Shift content by ``(shift_h, shift_w)`` pixels."""
    return _resample(image, np.eye(2), np.array([shift_h, shift_w]), cfg)


def apply_params(image: np.ndarray, params: AugmentParams, cfg: AugmentConfig) -> np.ndarray:
    """Apply rotation, zoom, brightness, translation in that order, then clamp to [0, 1].

    Stages whose factor is 0 are skipped, so an all-zero config returns the
    image unchanged.
    """
    out = np.asarray(image, dtype=np.float64)
    if cfg.rotation_factor > 0:
        out = rotate(out, params.angle, cfg)
    if cfg.zoom_factor > 0:
        out = zoom(out, params.zoom_h, params.zoom_w, cfg)
    if cfg.brightness_factor > 0:
        out = out + params.brightness
    if cfg.translation_factor > 0:
        out = translate(out, params.shift_h, params.shift_w, cfg)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: RngStream) -> np.ndarray:
    """Augment one ``[H, W, C]`` image with parameters drawn from ``rng``."""
    if image.ndim != 3:
        raise ConfigurationError(f"augment expects [H, W, C], got {image.shape}")
    return apply_params(image, draw_params(cfg, image.shape, rng), cfg)


def sample_stream(rng_base: RngStream, epoch: int, index: int) -> RngStream:
    """Stream for one sample in one epoch, labelled ``.../epoch{e}/sample{i}``."""
    return rng_base.child(f"epoch{epoch}/sample{index}")


def augment_batch(
    batch: np.ndarray,
    cfg: AugmentConfig,
    epoch: int,
    rng_base: RngStream,
    *,
    indices: np.ndarray | None = None,
    max_workers: int = 1,
) -> np.ndarray:
    """Augment every image of ``[N, H, W, C]`` with its own per-sample stream.

    Args:
        batch: Images to augment. Not modified.
        cfg: Augmentation ranges.
        epoch: Epoch number mixed into each stream label.
        rng_base: Base stream, typically labelled ``augment``.
        indices: Global sample index of each row (defaults to ``0..N-1``).
        max_workers: Threads to spread samples over; output order and values
            do not depend on it.
    """
    if indices is None:
        indices = np.arange(batch.shape[0])
    streams = [sample_stream(rng_base, epoch, int(i)) for i in indices]
    if max_workers <= 1 or batch.shape[0] < 2:
        return np.stack([augment(image, cfg, s) for image, s in zip(batch, streams, strict=True)])
    with ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="Augment") as pool:
        pairs = zip(batch, streams, strict=True)
        results = list(pool.map(lambda pair: augment(pair[0], cfg, pair[1]), pairs))
    return np.stack(results)
