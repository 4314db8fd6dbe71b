"""Scale selection over per-scale cytoplasm predictions.

Scales are visited from smallest to largest. A scale is rejected when the
predicted cytoplasm is too large relative to the nucleus for that crop to
have contained it (the crop most likely truncated the cell), and the next
scale is tried. The largest scale is the fallback.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import (
    CellInstance,
    DimensionMismatchError,
    InstancePrediction,
    PlasmaSegError,
    ScaleConfig,
    to_binary,
)

THRESHOLD_FLOOR = 0.1


class OrderMismatchError(PlasmaSegError, ValueError):
    pass


def derive_capacity_thresholds(
    scales: Sequence[float], fill_fraction: float = 0.85, margin_factor: float = 1.0
) -> tuple[float, ...]:
    """Area ratio each crop scale can hold before a prediction looks truncated.

    ``fill_fraction * (margin_factor * scale)**2 - 1`` i.e. crop area over
    nucleus-bbox area, minus the nucleus itself, damped by `fill_fraction`.
    Floored at 0.1.
    """
    if not 0 < fill_fraction <= 1:
        raise ValueError(f"fill_fraction must be in (0, 1], got {fill_fraction}")
    return tuple(
        max(fill_fraction * (margin_factor * s) ** 2 - 1.0, THRESHOLD_FLOOR)
        for s in scales
    )


def select_index(ratios: Sequence[float], thresholds: Sequence[float]) -> int:
    """Index of the first ratio within its threshold, else the last index."""
    if len(ratios) == 0:
        raise ValueError("no scales to select from")
    if len(ratios) != len(thresholds):
        raise OrderMismatchError(
            f"{len(ratios)} ratios but {len(thresholds)} thresholds"
        )
    for i, (ratio, limit) in enumerate(zip(ratios, thresholds)):
        if ratio <= limit:
            return i
    return len(ratios) - 1


def select_scale(
    per_scale_masks: Sequence[tuple[float, np.ndarray]],
    nucleus_area: int,
    config: ScaleConfig,
) -> tuple[int, np.ndarray]:
    """Pick one cytoplasm mask from ``[(scale, mask), ...]`` ordered by scale."""
    if len(per_scale_masks) == 0:
        raise ValueError("per_scale_masks is empty")
    if nucleus_area <= 0:
        raise ValueError(f"nucleus_area must be positive, got {nucleus_area}")
    scales = tuple(float(s) for s, _ in per_scale_masks)
    if len(scales) != len(config.scales) or not np.allclose(scales, config.scales):
        raise OrderMismatchError(
            f"mask scales {scales} do not match configured scales {config.scales}"
        )
    ratios = [float(np.count_nonzero(m)) / nucleus_area for _, m in per_scale_masks]
    idx = select_index(ratios, config.capacity_thresholds)
    return idx, per_scale_masks[idx][1]


def fuse_instance(
    nucleus: CellInstance,
    selected_mask: np.ndarray,
    selected_scale: float,
    sample_id: str = "",
) -> InstancePrediction:
    """Combine a nucleus with its selected cytoplasm into one prediction.

    The stored cytoplasm excludes nucleus pixels so that the two parts are
    disjoint; the fused mask is their union either way.
    """
    cyto = to_binary(selected_mask)
    if cyto.shape != nucleus.mask.shape:
        raise DimensionMismatchError(
            f"cytoplasm mask {cyto.shape} vs nucleus mask {nucleus.mask.shape}"
        )
    nuc = nucleus.mask.astype(np.uint8)
    return InstancePrediction(
        instance_id=nucleus.id,
        fused_mask=nuc | cyto,
        nucleus_mask=nuc.copy(),
        cytoplasm_mask=cyto & (1 - nuc),
        selected_scale=float(selected_scale),
        sample_id=sample_id,
    )
