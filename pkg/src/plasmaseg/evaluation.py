"""Instance-level mean IoU.

Two matching variants are offered:

``best_match``
    every ground-truth instance scores its best IoU against any prediction
    in the same image; extra predictions are not penalised.
``matched``
    greedy one-to-one matching by descending IoU; a prediction can serve a
    single ground-truth instance.

In both, the dataset score is the mean over all ground-truth instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import DataError, DimensionMismatchError, InstancePrediction, PlasmaSegError, as_mask2d

VARIANTS = ("best_match", "matched")


class BothEmptyMasksError(PlasmaSegError, ValueError):
    pass


class IdMismatchError(DataError):
    pass


def instance_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = as_mask2d(a).astype(bool)
    b = as_mask2d(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        raise BothEmptyMasksError("IoU of two empty masks is undefined")
    return int(np.count_nonzero(a & b)) / union


def iou_matrix(gt: Sequence[np.ndarray], pred: Sequence[np.ndarray]) -> np.ndarray:
    """(len(gt), len(pred)) IoU matrix; a pair of empty masks scores 0."""
    if not gt or not pred:
        return np.zeros((len(gt), len(pred)))
    g = np.stack([as_mask2d(m).astype(bool).ravel() for m in gt]).astype(np.int64)
    p = np.stack([as_mask2d(m).astype(bool).ravel() for m in pred]).astype(np.int64)
    if g.shape[1] != p.shape[1]:
        raise DimensionMismatchError("gt and prediction masks differ in size")
    inter = g @ p.T
    union = g.sum(1)[:, None] + p.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros(inter.shape), where=union > 0)


def _greedy_scores(ious: np.ndarray) -> np.ndarray:
    scores = np.zeros(ious.shape[0])
    if ious.size == 0:
        return scores
    order = sorted(
        ((ious[i, j], i, j) for i in range(ious.shape[0]) for j in range(ious.shape[1])),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    used_g, used_p = set(), set()
    for v, i, j in order:
        if v <= 0:
            break
        if i in used_g or j in used_p:
            continue
        used_g.add(i)
        used_p.add(j)
        scores[i] = v
    return scores


@dataclass
class MeanIoUResult:
    score: float
    variant: str
    per_image: dict[str, float] = field(default_factory=dict)
    per_instance: dict[str, list[float]] = field(default_factory=dict)

    @property
    def n_instances(self) -> int:
        return sum(len(v) for v in self.per_instance.values())


def _pred_mask(p) -> np.ndarray:
    return p.fused_mask if isinstance(p, InstancePrediction) else p


def _as_mapping(x) -> Mapping:
    if isinstance(x, Mapping):
        return x
    return {str(i): v for i, v in enumerate(x)}


def mean_iou_score(gt, pred, variant: str = "best_match") -> MeanIoUResult:
    """Score predictions against ground truth, keyed by sample id.

    `gt` maps sample id -> fused gt masks; `pred` maps sample id ->
    `InstancePrediction` objects (or plain masks). Positional sequences are
    accepted and aligned by index. Every predicted image must exist in `gt`;
    gt images missing from `pred` count as having no predictions.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown metric variant {variant!r}; choose from {VARIANTS}")
    gt, pred = _as_mapping(gt), _as_mapping(pred)
    extra = sorted(set(pred) - set(gt))
    if extra:
        raise IdMismatchError(f"predictions for unknown sample id(s): {extra}")
    per_image, per_instance, all_scores = {}, {}, []
    for sid, gt_masks in gt.items():
        if not gt_masks:
            continue
        ious = iou_matrix(list(gt_masks), [_pred_mask(p) for p in pred.get(sid, [])])
        if ious.shape[1] == 0:
            scores = np.zeros(len(gt_masks))
        elif variant == "best_match":
            scores = ious.max(axis=1)
        else:
            scores = _greedy_scores(ious)
        scores = [float(s) for s in scores]
        per_instance[sid] = scores
        per_image[sid] = math.fsum(scores) / len(scores)
        all_scores.extend(scores)
    if not all_scores:
        raise DataError("no ground-truth instances to score")
    return MeanIoUResult(
        score=math.fsum(all_scores) / len(all_scores),
        variant=variant,
        per_image=per_image,
        per_instance=per_instance,
    )


def format_report(result: MeanIoUResult) -> str:
    lines = [
        f"metric_variant\t{result.variant}",
        f"mean_iou\t{result.score:.6f}",
        f"n_instances\t{result.n_instances}",
        f"n_images\t{len(result.per_image)}",
        "",
        "sample_id\tn_gt\tmean_iou",
    ]
    for sid in sorted(result.per_image):
        lines.append(f"{sid}\t{len(result.per_instance[sid])}\t{result.per_image[sid]:.6f}")
    return "\n".join(lines) + "\n"


def write_report(result: MeanIoUResult, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_report(result))
    return path
