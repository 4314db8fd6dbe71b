"""Full inference: nucleus map -> instances -> multi-scale crops -> selection."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .aggregation import fuse_instance, select_scale
from .core import InstancePrediction, ScaleConfig
from .cytoplasm_net import AttentionDeeplab, predict_cytoplasm
from .data_io import DatasetRecord
from .instance_ops import compute_crop_window, extract_crop, extract_nucleus_instances, paste_to_canvas
from .nucleus_net import UNet, predict_nucleus


@dataclass
class Segmenter:
    nucleus_model: UNet
    cytoplasm_models: Sequence[AttentionDeeplab]  # one per scale, ascending
    scale_config: ScaleConfig
    threshold: float = 0.5
    min_area: int = 30

    def __post_init__(self) -> None:
        if len(self.cytoplasm_models) != len(self.scale_config.scales):
            raise ValueError(
                f"{len(self.cytoplasm_models)} cytoplasm models for "
                f"{len(self.scale_config.scales)} scales"
            )

    def segment(self, image: np.ndarray, sample_id: str = "") -> list[InstancePrediction]:
        shape = image.shape[:2]
        side = self.scale_config.network_input_side
        margin = self.scale_config.margin_factor
        prob = predict_nucleus(self.nucleus_model, image)
        instances = extract_nucleus_instances(prob, self.threshold, self.min_area)
        if not instances:
            return []
        per_scale = []
        for scale, model in zip(self.scale_config.scales, self.cytoplasm_models):
            windows = [compute_crop_window(inst, scale, shape, margin) for inst in instances]
            crops = [extract_crop(image, inst.mask, w, side) for inst, w in zip(instances, windows)]
            masks = predict_cytoplasm(model, crops)
            per_scale.append(
                [
                    paste_to_canvas(m, w, shape) & (1 - inst.mask)
                    for m, w, inst in zip(masks, windows, instances)
                ]
            )
        preds = []
        for k, inst in enumerate(instances):
            candidates = [(s, per_scale[i][k]) for i, s in enumerate(self.scale_config.scales)]
            idx, mask = select_scale(candidates, inst.area, self.scale_config)
            preds.append(fuse_instance(inst, mask, self.scale_config.scales[idx], sample_id))
        return preds

    def run(self, records: Sequence[DatasetRecord], workers: int = 1) -> dict[str, list[InstancePrediction]]:
        """Segment every record; images are processed concurrently up to `workers`."""
        with torch.inference_mode():
            if workers > 1:
                with ThreadPoolExecutor(workers) as pool:
                    results = list(pool.map(lambda r: self.segment(r.image, r.sample_id), records))
            else:
                results = [self.segment(r.image, r.sample_id) for r in records]
        return {r.sample_id: preds for r, preds in zip(records, results)}
