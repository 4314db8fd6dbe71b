"""Dataset loading, prediction persistence and synthetic scene generation.

On-disk layout (for both ground truth and predictions)::

    root/images/<sample_id>.png
    root/masks/<sample_id>_<k>.png      one single-channel mask per instance
    root/masks/<sample_id>_<k>.json     prediction sidecar (predictions only)

Raw mask values are translated with an explicit ``label_map`` such as
``{1: "nucleus", 2: "cytoplasm"}``; 0 is always background.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.draw import ellipse

from .core import DataError, InstancePrediction, validate_binary_mask

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg")
DEFAULT_LABEL_MAP = {1: "nucleus", 2: "cytoplasm"}
_ROLES = ("nucleus", "cytoplasm")


class MissingDirectoryError(DataError):
    pass


class UnmappedMaskValueError(DataError):
    pass


class InfeasiblePackingError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    image: np.ndarray
    gt_instances: list[tuple[np.ndarray, np.ndarray]]
    sample_id: str

    def fused_masks(self) -> list[np.ndarray]:
        return [nuc | cyto for nuc, cyto in self.gt_instances]

    def area_ratios(self) -> list[float]:
        return [float(c.sum()) / float(n.sum()) for n, c in self.gt_instances]


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Parameters of one synthetic bone-marrow-like scene.

    Per-cell cytoplasm/nucleus area ratios are drawn from a Gaussian mixture
    (``ratio_means``, ``ratio_stds``, ``ratio_weights``).
    """

    image_side: int = 96
    n_cells: int = 4
    ratio_means: tuple[float, ...] = (1.5, 4.0)
    ratio_stds: tuple[float, ...] = (0.25, 0.25)
    ratio_weights: tuple[float, ...] = (0.5, 0.5)
    overlap_probability: float = 0.2
    rng_seed: int = 0
    nucleus_radius: tuple[float, float] = (5.0, 8.0)
    max_retries: int = 200

    def __post_init__(self) -> None:
        for name in ("ratio_means", "ratio_stds", "ratio_weights", "nucleus_radius"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        k = len(self.ratio_means)
        if k == 0 or len(self.ratio_stds) != k or len(self.ratio_weights) != k:
            raise ValueError("ratio mixture needs matching means, stds and weights")
        if any(m <= 1.0 for m in self.ratio_means):
            raise ValueError(f"mixture means must exceed 1.0, got {self.ratio_means}")
        if any(s < 0 for s in self.ratio_stds):
            raise ValueError("mixture std devs must be non-negative")
        if any(w < 0 for w in self.ratio_weights) or not np.isclose(sum(self.ratio_weights), 1.0):
            raise ValueError(f"mixture weights must sum to 1, got {self.ratio_weights}")
        if not 0.0 <= self.overlap_probability <= 1.0:
            raise ValueError("overlap_probability must lie in [0, 1]")
        if self.image_side < 8 or self.n_cells < 0:
            raise ValueError("image_side must be >= 8 and n_cells >= 0")
        lo, hi = self.nucleus_radius
        if not 1.0 <= lo <= hi:
            raise ValueError(f"bad nucleus_radius range {self.nucleus_radius}")


def sample_ratio_mixture(
    rng: np.random.Generator,
    means: Sequence[float],
    stds: Sequence[float],
    weights: Sequence[float],
    size: int | None = None,
) -> np.ndarray:
    comp = rng.choice(len(means), size=size, p=np.asarray(weights) / np.sum(weights))
    return rng.normal(np.asarray(means)[comp], np.asarray(stds)[comp])


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return field_ / (field_.std() + 1e-12)


def generate_synthetic_scene(spec: SyntheticSceneSpec, sample_id: str | None = None) -> DatasetRecord:
    """Render a seeded synthetic scene with exact ground-truth mask pairs.

    Each cell is an elliptic nucleus grown into a cytoplasm blob: pixels are
    ranked by an anisotropic distance to the nucleus perturbed by smooth
    noise, and the closest ``round(ratio * nucleus_area)`` are taken, so the
    area ratio is met to within one pixel.
    """
    rng = np.random.default_rng(spec.rng_seed)
    side = spec.image_side
    shape = (side, side)
    nuclei_all = np.zeros(shape, dtype=bool)
    regions_all = np.zeros(shape, dtype=bool)
    instances: list[tuple[np.ndarray, np.ndarray]] = []

    for cell in range(spec.n_cells):
        for _attempt in range(spec.max_retries):
            placed = _try_place_cell(rng, spec, nuclei_all, regions_all)
            if placed is not None:
                break
        else:
            raise InfeasiblePackingError(
                f"could not place cell {cell + 1} of {spec.n_cells} in a "
                f"{side}x{side} image after {spec.max_retries} attempts"
            )
        nucleus, cyto = placed
        nuclei_all |= nucleus
        regions_all |= nucleus | cyto
        instances.append((nucleus.astype(np.uint8), cyto.astype(np.uint8)))

    image = _render(rng, shape, instances)
    sid = sample_id if sample_id is not None else f"synth{spec.rng_seed}"
    return DatasetRecord(image=image, gt_instances=instances, sample_id=sid)


def _try_place_cell(rng, spec: SyntheticSceneSpec, nuclei_all, regions_all):
    side = spec.image_side
    shape = (side, side)
    ry, rx = rng.uniform(*spec.nucleus_radius, size=2)
    theta = rng.uniform(0, np.pi)
    margin = max(ry, rx) + 2
    if side - 2 * margin <= 0:
        return None
    cr, cc = rng.uniform(margin, side - margin, size=2)
    rr, cols = ellipse(cr, cc, ry, rx, shape=shape, rotation=theta)
    nucleus = np.zeros(shape, dtype=bool)
    nucleus[rr, cols] = True
    area = int(nucleus.sum())
    if area == 0:
        return None
    allow_overlap = rng.uniform() < spec.overlap_probability
    # nuclei never touch another cell; cytoplasm may overlap cytoplasm
    if (nucleus & ndimage.binary_dilation(regions_all, iterations=3)).any():
        return None
    blocked = ndimage.binary_dilation(nuclei_all, iterations=2)
    if not allow_overlap:
        blocked |= regions_all

    ratio = float(sample_ratio_mixture(rng, spec.ratio_means, spec.ratio_stds, spec.ratio_weights))
    ratio = max(ratio, 0.1)
    n_cyto = int(round(ratio * area))
    thickness = np.sqrt((1 + ratio) * area / np.pi) - np.sqrt(area / np.pi)
    sampling = rng.uniform(0.7, 1.4, size=2)
    dist = ndimage.distance_transform_edt(~nucleus, sampling=sampling)
    dist = dist + 0.3 * thickness * _smooth_noise(rng, shape, sigma=3.0)
    dist[nucleus | blocked] = np.inf
    order = np.argsort(dist, axis=None, kind="stable")[:n_cyto]
    if n_cyto and not np.isfinite(dist.flat[order[-1]]):
        return None
    if n_cyto and dist.flat[order[-1]] > 3 * thickness + 3:
        return None
    cyto = np.zeros(shape, dtype=bool)
    cyto.flat[order] = True
    return nucleus, cyto


def _render(rng, shape, instances) -> np.ndarray:
    bg = np.array([228.0, 196.0, 212.0])
    img = np.empty(shape + (3,))
    img[:] = bg
    img += 10.0 * _smooth_noise(rng, shape, 4.0)[:, :, None]
    for _, cyto in instances:
        color = np.array([168.0, 158.0, 214.0]) + rng.uniform(-12, 12, size=3)
        img[cyto.astype(bool)] = color
    for nucleus, _ in instances:
        color = np.array([92.0, 44.0, 132.0]) + rng.uniform(-10, 10, size=3)
        m = nucleus.astype(bool)
        img[m] = color + 12.0 * _smooth_noise(rng, shape, 1.0)[m][:, None]
    img += rng.normal(0.0, 4.0, size=img.shape)
    img = ndimage.gaussian_filter(img, sigma=(0.8, 0.8, 0))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# -- disk I/O ---------------------------------------------------------------


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def _write_png(array: np.ndarray, path: Path) -> None:
    try:
        Image.fromarray(array).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _as_rgb(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return np.repeat(image[:, :, None], 3, axis=2)
    return image[:, :, :3]


def _normalise_label_map(label_map: Mapping) -> dict[int, str]:
    out = {}
    for raw, role in label_map.items():
        if role not in _ROLES:
            raise ValueError(f"label_map role must be one of {_ROLES}, got {role!r}")
        out[int(raw)] = role
    return out


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(
    root: str | Path,
    label_map: Mapping[int, str] = DEFAULT_LABEL_MAP,
    workers: int = 1,
) -> list[DatasetRecord]:
    """Load ``root/images`` with per-instance masks from ``root/masks``.

    An existing but empty `root` yields an empty list. Instances whose
    nucleus is empty are dropped and counted in a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingDirectoryError(f"dataset root does not exist: {root}")
    if not any(root.iterdir()):
        return []
    for sub in ("images", "masks"):
        if not (root / sub).is_dir():
            raise MissingDirectoryError(f"missing directory: {root / sub}")
    lmap = _normalise_label_map(label_map)

    mask_files: dict[str, list[tuple[int, Path]]] = {}
    pattern = re.compile(r"^(.*)_(\d+)$")
    for p in _list_images(root / "masks"):
        m = pattern.match(p.stem)
        if m:
            mask_files.setdefault(m.group(1), []).append((int(m.group(2)), p))

    def load_one(img_path: Path) -> tuple[DatasetRecord, int]:
        sid = img_path.stem
        image = _as_rgb(_read_image(img_path))
        pairs, dropped = [], 0
        for _, mpath in sorted(mask_files.get(sid, [])):
            raw = _read_image(mpath)
            if raw.ndim == 3:
                raw = raw[:, :, 0]
            if raw.shape != image.shape[:2]:
                raise DataError(f"{mpath} has shape {raw.shape}, image is {image.shape[:2]}")
            values = set(np.unique(raw).tolist()) - {0}
            unknown = sorted(values - set(lmap))
            if unknown:
                raise UnmappedMaskValueError(
                    f"{mpath} contains mask value {unknown[0]} absent from label_map"
                )
            nuc = np.isin(raw, [v for v, r in lmap.items() if r == "nucleus"])
            cyto = np.isin(raw, [v for v, r in lmap.items() if r == "cytoplasm"]) & ~nuc
            if not nuc.any():
                dropped += 1
                continue
            pairs.append((nuc.astype(np.uint8), cyto.astype(np.uint8)))
        return DatasetRecord(image=image, gt_instances=pairs, sample_id=sid), dropped

    paths = _list_images(root / "images")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(load_one, paths))
    else:
        results = [load_one(p) for p in paths]
    dropped = sum(d for _, d in results)
    if dropped:
        log.warning("dropped %d instance(s) with an empty nucleus under %s", dropped, root)
    return [r for r, _ in results]


def write_dataset(
    records: Sequence[DatasetRecord],
    root: str | Path,
    nucleus_value: int = 1,
    cytoplasm_value: int = 2,
) -> Path:
    """Write records in the layout read by `load_dataset`."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for rec in records:
        _write_png(rec.image, root / "images" / f"{rec.sample_id}.png")
        for k, (nuc, cyto) in enumerate(rec.gt_instances):
            raw = np.zeros(nuc.shape, dtype=np.uint8)
            raw[cyto.astype(bool)] = cytoplasm_value
            raw[nuc.astype(bool)] = nucleus_value
            _write_png(raw, root / "masks" / f"{rec.sample_id}_{k}.png")
    return root


def _prediction_stem(pred: InstancePrediction) -> str:
    return f"{pred.sample_id or 'sample'}_{pred.instance_id}"


def save_predictions(
    preds: Sequence[InstancePrediction],
    out_path: str | Path,
    nucleus_value: int = 1,
    cytoplasm_value: int = 2,
) -> Path:
    """Write one encoded mask plus a JSON sidecar per predicted instance."""
    if nucleus_value == cytoplasm_value or 0 in (nucleus_value, cytoplasm_value):
        raise ValueError("nucleus and cytoplasm values must be distinct and non-zero")
    masks_dir = Path(out_path) / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    for pred in preds:
        stem = _prediction_stem(pred)
        raw = np.zeros(pred.fused_mask.shape, dtype=np.uint8)
        raw[pred.cytoplasm_mask.astype(bool)] = cytoplasm_value
        raw[pred.nucleus_mask.astype(bool)] = nucleus_value
        _write_png(raw, masks_dir / f"{stem}.png")
        meta = {
            "instance_id": pred.instance_id,
            "sample_id": pred.sample_id,
            "selected_scale": pred.selected_scale,
            "bbox": list(pred.bbox) if pred.bbox is not None else None,
            "nucleus_value": nucleus_value,
            "cytoplasm_value": cytoplasm_value,
        }
        sidecar = masks_dir / f"{stem}.json"
        try:
            sidecar.write_text(json.dumps(meta, indent=2) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write {sidecar}: {exc}") from exc
    return Path(out_path)


def load_predictions(out_path: str | Path) -> list[InstancePrediction]:
    """Read predictions written by `save_predictions`."""
    masks_dir = Path(out_path) / "masks"
    if not masks_dir.is_dir():
        raise MissingDirectoryError(f"missing directory: {masks_dir}")
    preds = []
    for sidecar in sorted(masks_dir.glob("*.json")):
        meta = json.loads(sidecar.read_text())
        raw = _read_image(sidecar.with_suffix(".png"))
        nuc = (raw == meta["nucleus_value"]).astype(np.uint8)
        cyto = (raw == meta["cytoplasm_value"]).astype(np.uint8)
        preds.append(
            InstancePrediction(
                instance_id=int(meta["instance_id"]),
                fused_mask=nuc | cyto,
                nucleus_mask=nuc,
                cytoplasm_mask=cyto,
                selected_scale=float(meta["selected_scale"]),
                sample_id=meta["sample_id"],
                bbox=tuple(meta["bbox"]) if meta["bbox"] is not None else None,
            )
        )
    preds.sort(key=lambda p: (p.sample_id, p.instance_id))
    return preds


def check_record(record: DatasetRecord) -> None:
    """Raise DataError if `record` violates the ground-truth invariants."""
    for k, (nuc, cyto) in enumerate(record.gt_instances):
        if not (validate_binary_mask(nuc) and validate_binary_mask(cyto)):
            raise DataError(f"{record.sample_id} instance {k}: non-binary mask")
        if nuc.sum() == 0:
            raise DataError(f"{record.sample_id} instance {k}: empty nucleus")
        if (nuc & cyto).any():
            raise DataError(f"{record.sample_id} instance {k}: nucleus and cytoplasm overlap")
