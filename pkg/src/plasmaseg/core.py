"""Shared domain types, errors and mask validation.

Images are numpy arrays of shape (H, W, C) with intensities in [0, 255].
Binary masks are 2-D (H, W) uint8 arrays holding only 0 and 1; a trailing
singleton channel axis is accepted wherever a mask is expected.
Coordinates are (row, col) from the top-left corner and bounding boxes are
half-open ``(row0, col0, row1, col1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class PlasmaSegError(Exception):
    """Base class for all package errors."""


class DataError(PlasmaSegError):
    """Problem with input data (missing files, bad encodings, empty sets)."""


class DimensionMismatchError(PlasmaSegError, ValueError):
    pass


class ShapeError(PlasmaSegError, ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


class DivergenceError(PlasmaSegError):
    """Training loss became NaN or infinite."""


class ConfigError(PlasmaSegError, ValueError):
    pass


def as_mask2d(mask: np.ndarray) -> np.ndarray:
    """Return `mask` as a 2-D array, squeezing a single trailing channel."""
    mask = np.asarray(mask)
    if mask.ndim == 3:
        if mask.shape[2] != 1:
            raise DimensionMismatchError(
                f"mask must have 1 channel, got {mask.shape[2]}"
            )
        mask = mask[:, :, 0]
    elif mask.ndim != 2:
        raise DimensionMismatchError(f"mask must be 2-D, got shape {mask.shape}")
    return mask


def validate_binary_mask(mask: np.ndarray) -> bool:
    """True iff every pixel of the single-channel `mask` is 0 or 1."""
    mask = as_mask2d(mask)
    if mask.dtype == bool:
        return True
    return bool(np.isin(mask, (0, 1)).all())


def to_binary(mask: np.ndarray) -> np.ndarray:
    """Cast a 0/1 (or boolean) mask to uint8, raising if other values occur."""
    mask = as_mask2d(mask)
    if not validate_binary_mask(mask):
        raise ValueError("mask contains values other than 0 and 1")
    return mask.astype(np.uint8, copy=False)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


@dataclass(frozen=True, eq=False)
class CellInstance:
    """A single nucleus instance stored at full-image resolution."""

    id: int
    mask: np.ndarray
    bbox: tuple[int, int, int, int]
    centroid: tuple[float, float]
    area: int

    @classmethod
    def from_mask(cls, mask: np.ndarray, id: int = 0) -> "CellInstance":
        mask = to_binary(mask).copy()
        mask.setflags(write=False)
        area = int(mask.sum())
        if area == 0:
            raise ValueError("instance mask is empty")
        rr, cc = np.nonzero(mask)
        return cls(
            id=int(id),
            mask=mask,
            bbox=mask_bbox(mask),
            centroid=(float(rr.mean()), float(cc.mean())),
            area=area,
        )

    @property
    def bbox_height(self) -> int:
        return self.bbox[2] - self.bbox[0]

    @property
    def bbox_width(self) -> int:
        return self.bbox[3] - self.bbox[1]

    @property
    def bbox_center(self) -> tuple[float, float]:
        r0, c0, r1, c1 = self.bbox
        return (r0 + r1) / 2.0, (c0 + c1) / 2.0


@dataclass(frozen=True)
class CropWindow:
    """Square window in full-image coordinates; may extend past the image.

    ``top``/``left`` are derived from the center so that a window of even
    side centered on a half-integer or integer coordinate lands on whole
    pixels deterministically.
    """

    center: tuple[float, float]
    side: int
    scale: float
    origin_bbox: tuple[int, int, int, int]

    @property
    def top(self) -> int:
        return int(np.floor(self.center[0] - self.side / 2.0 + 0.5))

    @property
    def left(self) -> int:
        return int(np.floor(self.center[1] - self.side / 2.0 + 0.5))

    @property
    def bounds(self) -> tuple[int, int, int, int]:
        return self.top, self.left, self.top + self.side, self.left + self.side


@dataclass(frozen=True)
class ScaleConfig:
    scales: tuple[float, ...] = (1.0, 1.6, 2.2, 3.0)
    capacity_thresholds: tuple[float, ...] | None = None
    network_input_side: int = 256
    fill_fraction: float = 0.85
    margin_factor: float = 1.0

    def __post_init__(self) -> None:
        scales = tuple(float(s) for s in self.scales)
        if not scales:
            raise ConfigError("at least one scale is required")
        if any(s <= 0 for s in scales):
            raise ConfigError(f"scales must be positive, got {scales}")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"scales must be strictly ascending, got {scales}")
        object.__setattr__(self, "scales", scales)
        if self.capacity_thresholds is None:
            # local import: aggregation depends on this module
            from .aggregation import derive_capacity_thresholds

            thresholds = derive_capacity_thresholds(
                scales, self.fill_fraction, self.margin_factor
            )
        else:
            thresholds = tuple(float(t) for t in self.capacity_thresholds)
        if len(thresholds) != len(scales):
            raise ConfigError(
                f"{len(scales)} scales but {len(thresholds)} capacity thresholds"
            )
        object.__setattr__(self, "capacity_thresholds", tuple(thresholds))
        if self.network_input_side < 2:
            raise ConfigError("network_input_side must be >= 2")


@dataclass(frozen=True, eq=False)
class InstancePrediction:
    """Fused nucleus + cytoplasm prediction for one instance."""

    instance_id: int
    fused_mask: np.ndarray
    nucleus_mask: np.ndarray
    cytoplasm_mask: np.ndarray
    selected_scale: float
    sample_id: str = ""
    bbox: tuple[int, int, int, int] | None = field(default=None)

    def __post_init__(self) -> None:
        fused = to_binary(self.fused_mask)
        nucleus = to_binary(self.nucleus_mask)
        cyto = to_binary(self.cytoplasm_mask)
        if not (fused.shape == nucleus.shape == cyto.shape):
            raise DimensionMismatchError(
                f"mask shapes differ: {fused.shape}, {nucleus.shape}, {cyto.shape}"
            )
        if not np.array_equal(fused, nucleus | cyto):
            raise ValueError("fused_mask must equal nucleus_mask OR cytoplasm_mask")
        object.__setattr__(self, "fused_mask", fused)
        object.__setattr__(self, "nucleus_mask", nucleus)
        object.__setattr__(self, "cytoplasm_mask", cyto)
        if self.bbox is None and fused.any():
            object.__setattr__(self, "bbox", mask_bbox(fused))


def union_masks(masks: Sequence[np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=np.uint8)
    for m in masks:
        out |= to_binary(m)
    return out
