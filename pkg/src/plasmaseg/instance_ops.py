"""Instance selection: nucleus instancing, multi-scale crops and paste-back."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage
from skimage.transform import resize

from .core import CellInstance, CropWindow, DimensionMismatchError, PlasmaSegError, as_mask2d

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class DegenerateWindowError(PlasmaSegError, ValueError):
    pass


def extract_nucleus_instances(
    prob_map: np.ndarray, threshold: float = 0.5, min_area: int = 30
) -> list[CellInstance]:
    """Split a nucleus probability map into instances.

    Pixels with probability >= `threshold` are grouped into 8-connected
    components; components smaller than `min_area` are dropped. Instances
    come back largest first with ids 0..n-1 (ties keep raster order).
    """
    prob = as_mask2d(prob_map)
    labels, n = ndimage.label(prob >= threshold, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    keep = [lab for lab in range(1, n + 1) if areas[lab - 1] >= min_area]
    keep.sort(key=lambda lab: -areas[lab - 1])
    return [
        CellInstance.from_mask(labels == lab, id=i) for i, lab in enumerate(keep)
    ]


def round_to_even(x: float) -> int:
    return 2 * int(math.floor(x / 2.0 + 0.5))


def compute_crop_window(
    instance: CellInstance,
    scale: float,
    image_shape: tuple[int, int] | None = None,
    margin_factor: float = 1.0,
) -> CropWindow:
    """Square window centered on the nucleus bbox, side proportional to `scale`.

    The window is not clipped to `image_shape`; extraction zero-pads instead.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    extent = max(instance.bbox_height, instance.bbox_width)
    side = max(round_to_even(scale * margin_factor * extent), 2)
    return CropWindow(
        center=instance.bbox_center,
        side=side,
        scale=float(scale),
        origin_bbox=instance.bbox,
    )


def _window_slices(window: CropWindow, shape: tuple[int, int]):
    """Source and destination slices for the in-bounds part of `window`."""
    top, left, bottom, right = window.bounds
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(bottom, shape[0]), min(right, shape[1])
    if r0 >= r1 or c0 >= c1:
        return None
    src = (slice(r0, r1), slice(c0, c1))
    dst = (slice(r0 - top, r1 - top), slice(c0 - left, c1 - left))
    return src, dst


def _padded_crop(array: np.ndarray, window: CropWindow) -> np.ndarray:
    out = np.zeros((window.side, window.side) + array.shape[2:], dtype=array.dtype)
    sl = _window_slices(window, array.shape[:2])
    if sl is not None:
        src, dst = sl
        out[dst] = array[src]
    return out


def resize_nearest(mask: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize sampling at pixel centres."""
    h, w = mask.shape[:2]
    if (h, w) == tuple(out_shape):
        return mask.copy()
    rows = np.minimum(((np.arange(out_shape[0]) + 0.5) * h / out_shape[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_shape[1]) + 0.5) * w / out_shape[1]).astype(int), w - 1)
    return mask[rows[:, None], cols[None, :]]


def resize_bilinear(image: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    if image.shape[:2] == tuple(out_shape):
        return image.astype(np.float32)
    out = resize(
        image.astype(np.float32),
        tuple(out_shape) + image.shape[2:],
        order=1,
        mode="edge",
        anti_aliasing=False,
        preserve_range=True,
    )
    return out.astype(np.float32)


def _equalize_channel(channel: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    levels = np.clip(np.rint(channel), 0, 255).astype(np.uint8)
    samples = levels if valid is None else levels[valid]
    if samples.size == 0 or samples.min() == samples.max():
        return channel.copy()
    cdf = np.cumsum(np.bincount(samples.ravel(), minlength=256))
    cdf_min = cdf[samples.min()]
    n = cdf[-1]
    lut = np.floor(255.0 * (cdf - cdf_min) / (n - cdf_min) + 0.5)  # half-up
    lut = np.clip(lut, 0, 255).astype(channel.dtype)
    return lut[levels]


def equalize_histogram(image: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Per-channel histogram equalization of a 1- or 3-channel image.

    ``out = round(255 * (cdf(v) - cdf_min) / (N - cdf_min))``. A constant
    channel is returned unchanged. If `valid` is given only those pixels
    contribute to the histogram.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        return _equalize_channel(image, valid)
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise DimensionMismatchError(
            f"expected 1 or 3 channels, got shape {image.shape}"
        )
    return np.stack(
        [_equalize_channel(image[:, :, c], valid) for c in range(image.shape[2])],
        axis=2,
    )


def extract_crop(
    image: np.ndarray,
    nucleus_mask: np.ndarray,
    window: CropWindow,
    out_side: int,
) -> np.ndarray:
    """Build the 4-channel cytoplasm-network input for one window.

    Returns float32 ``(out_side, out_side, 4)``: equalized RGB in [0, 255]
    (bilinear) and the nucleus mask (nearest). Pixels outside the image are
    zero in every channel.
    """
    if window.side < 2:
        raise DegenerateWindowError(f"window side {window.side} < 2")
    image = np.asarray(image)
    mask = as_mask2d(nucleus_mask)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatchError(f"image must be H x W x 3, got {image.shape}")
    if image.shape[:2] != mask.shape:
        raise DimensionMismatchError(
            f"image {image.shape[:2]} and mask {mask.shape} differ in size"
        )
    valid = np.zeros((window.side, window.side), dtype=bool)
    sl = _window_slices(window, mask.shape)
    if sl is not None:
        valid[sl[1]] = True

    rgb = _padded_crop(image.astype(np.float32), window)
    rgb = equalize_histogram(rgb, valid)
    rgb[~valid] = 0
    mask_crop = _padded_crop(mask.astype(np.float32), window)

    out_shape = (out_side, out_side)
    rgb = resize_bilinear(rgb, out_shape)
    rgb[~resize_nearest(valid, out_shape)] = 0
    mask_crop = resize_nearest(mask_crop, out_shape)
    return np.concatenate([rgb, mask_crop[:, :, None]], axis=2).astype(np.float32)


def crop_mask(mask: np.ndarray, window: CropWindow, out_side: int) -> np.ndarray:
    """Crop and nearest-resize a binary mask to the network grid."""
    crop = _padded_crop(as_mask2d(mask).astype(np.uint8), window)
    return resize_nearest(crop, (out_side, out_side))


def paste_to_canvas(
    crop_mask: np.ndarray, window: CropWindow, image_shape: tuple[int, int]
) -> np.ndarray:
    """Inverse of cropping for a predicted mask; out-of-image parts are dropped."""
    crop = as_mask2d(crop_mask)
    if crop.shape[0] != crop.shape[1]:
        raise DimensionMismatchError(f"crop mask must be square, got {crop.shape}")
    resized = resize_nearest(crop.astype(np.uint8), (window.side, window.side))
    canvas = np.zeros(tuple(image_shape[:2]), dtype=np.uint8)
    sl = _window_slices(window, canvas.shape)
    if sl is not None:
        src, dst = sl
        canvas[src] = resized[dst]
    return canvas
