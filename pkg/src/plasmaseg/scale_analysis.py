"""Cytoplasm/nucleus area-ratio histogram, peak finding and crop-scale derivation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter1d

from .core import DataError
from .data_io import DatasetRecord


class ZeroNucleusAreaError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class RatioHistogram:
    edges: np.ndarray
    counts: np.ndarray
    samples: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2.0

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0]) if len(self.edges) > 1 else 0.0


def area_ratio_samples(records: Iterable[DatasetRecord]) -> np.ndarray:
    out = []
    for rec in records:
        for k, (nuc, cyto) in enumerate(rec.gt_instances):
            n_area = int(np.count_nonzero(nuc))
            if n_area == 0:
                raise ZeroNucleusAreaError(f"instance {k} of {rec.sample_id} has zero nucleus area")
            out.append(np.count_nonzero(cyto) / n_area)
    return np.asarray(out, dtype=float)


def ratio_histogram(samples: Sequence[float], bin_width: float = 0.1) -> RatioHistogram:
    """Fixed-width histogram of ratio samples over ``[0, max]``; bins are ``[lo, hi)``."""
    if bin_width <= 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        return RatioHistogram(np.zeros(1), np.zeros(0, dtype=int), samples)
    if samples.min() < 0:
        raise ValueError("ratios must be non-negative")
    idx = np.floor(samples / bin_width + 1e-9).astype(int)
    n_bins = int(idx.max()) + 1
    edges = np.arange(n_bins + 1) * bin_width
    counts = np.bincount(idx, minlength=n_bins)
    return RatioHistogram(edges, counts, samples)


def compute_ratio_histogram(records: Sequence[DatasetRecord], bin_width: float = 0.1) -> RatioHistogram:
    return ratio_histogram(area_ratio_samples(records), bin_width)


def detect_peaks(
    hist: RatioHistogram, smoothing_window: int = 3, min_prominence: float = 0.1
) -> list[float]:
    """Ratios at the prominent maxima of the smoothed histogram, ascending.

    Counts are smoothed with a centred moving average. A maximal run of
    equal values whose in-range neighbours are all lower is a candidate; its
    prominence is its height minus the higher of the two side minima (taken
    up to the next higher bin or the histogram edge). Candidates whose
    prominence reaches ``min_prominence * max`` are returned at the run's
    mean bin centre. A histogram with no variation has no peaks.
    """
    counts = np.asarray(hist.counts, dtype=float)
    n = counts.size
    if n == 0:
        return []
    smooth = uniform_filter1d(counts, size=max(int(smoothing_window), 1), mode="nearest")
    smooth = np.round(smooth, 9)
    if smooth.max() <= 0 or smooth.max() == smooth.min():
        return []
    needed = min_prominence * smooth.max()
    centers = hist.centers
    peaks = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and smooth[j + 1] == smooth[i]:
            j += 1
        h = smooth[i]
        left_ok = i == 0 or smooth[i - 1] < h
        right_ok = j == n - 1 or smooth[j + 1] < h
        if left_ok and right_ok:
            bases = []
            k = i - 1
            lo = h
            while k >= 0 and smooth[k] <= h:
                lo = min(lo, smooth[k])
                k -= 1
            if i > 0:
                bases.append(lo)
            k = j + 1
            lo = h
            while k < n and smooth[k] <= h:
                lo = min(lo, smooth[k])
                k += 1
            if j < n - 1:
                bases.append(lo)
            prominence = h - max(bases) if bases else h
            if prominence >= needed and prominence > 0:
                peaks.append(float(centers[i : j + 1].mean()))
        i = j + 1
    return peaks


def derive_scales(peaks: Sequence[float], headroom: float = 1.2, dedup: float = 0.05) -> tuple[float, ...]:
    """Linear crop factors ``sqrt(headroom * (peak + 1))`` for area-ratio peaks.

    The +1 counts the nucleus itself inside the crop. Values closer than
    `dedup` to the previously kept one are dropped.
    """
    if headroom < 1.0:
        raise ValueError(f"headroom must be >= 1, got {headroom}")
    scales: list[float] = []
    for p in sorted(peaks):
        s = math.sqrt(headroom * (p + 1.0))
        if not scales or s - scales[-1] > dedup:
            scales.append(s)
    return tuple(scales)


def scale_to_area_ratio(scale: float) -> float:
    """Area ratio a crop of linear `scale` covers beyond the nucleus."""
    return scale * scale - 1.0
