"""Stage 1: U-Net nucleus segmentation on full images."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import EmptyDatasetError, ShapeError, union_masks
from .data_io import DatasetRecord
from .training import (
    TrainSpec,
    check_config,
    fit,
    image_to_tensor,
    read_checkpoint,
    save_checkpoint,
)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    in_channels: int = 3
    out_classes: int = 2

    def __post_init__(self) -> None:
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")

    @property
    def divisor(self) -> int:
        return 2**self.depth


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with a skip connection at every level."""

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        widths = [config.base_channels * 2**i for i in range(config.depth + 1)]
        self.down = nn.ModuleList()
        cin = config.in_channels
        for w in widths[:-1]:
            self.down.append(_double_conv(cin, w))
            cin = w
        self.bottleneck = _double_conv(widths[-2], widths[-1])
        self.up = nn.ModuleList()
        self.up_conv = nn.ModuleList()
        for w_hi, w_lo in zip(widths[:0:-1], widths[-2::-1]):
            self.up.append(nn.ConvTranspose2d(w_hi, w_lo, 2, stride=2))
            self.up_conv.append(_double_conv(2 * w_lo, w_lo))
        self.head = nn.Conv2d(widths[0], config.out_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        d = self.config.divisor
        for name, size in (("height", h), ("width", w)):
            if size % d:
                raise ShapeError(f"input {name} {size} is not divisible by {d}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, conv, skip in zip(self.up, self.up_conv, reversed(skips)):
            x = conv(torch.cat([up(x), skip], dim=1))
        return self.head(x)


def nucleus_forward(model: UNet, image: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Class logits ``(out_classes, H, W)`` for one (H, W, 3) image in [0, 255].

    A tensor input is taken as already normalised (C, H, W) or (N, C, H, W).
    """
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != model.config.in_channels:
            raise ShapeError(f"expected H x W x {model.config.in_channels}, got {image.shape}")
        x = image_to_tensor(image)[None]
    else:
        x = image if image.dim() == 4 else image[None]
    out = model(x)
    return out[0] if out.shape[0] == 1 else out


def _records_to_tensors(records: Sequence[DatasetRecord]):
    images, targets = [], []
    for rec in records:
        if not rec.gt_instances:
            continue
        shape = rec.image.shape[:2]
        images.append(image_to_tensor(rec.image))
        targets.append(torch.from_numpy(union_masks([n for n, _ in rec.gt_instances], shape)).long())
    if not images:
        raise EmptyDatasetError("no record contains a nucleus instance")
    return torch.stack(images), torch.stack(targets)


def train_nucleus(
    records: Sequence[DatasetRecord],
    spec: TrainSpec,
    config: UNetConfig = UNetConfig(),
) -> tuple[UNet, list[float]]:
    """Fit a U-Net to the union of each image's nucleus masks.

    Records without instances are skipped. All images must share one size
    divisible by ``2**depth``.
    """
    if not records:
        raise EmptyDatasetError("empty dataset")
    inputs, targets = _records_to_tensors(records)
    torch.manual_seed(spec.rng_seed)
    model = UNet(config)
    history = fit(model, inputs, targets, spec)
    if spec.checkpoint_path:
        save_checkpoint(spec.checkpoint_path, "nucleus", config, model, loss_history=history)
    return model, history


def load_nucleus(path: str | Path, config: UNetConfig | None = None) -> UNet:
    payload = read_checkpoint(path, "nucleus")
    if config is None:
        config = UNetConfig(**payload["config"])
    else:
        check_config(payload, config, path)
    model = UNet(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


@torch.no_grad()
def predict_nucleus(model: UNet, image: np.ndarray) -> np.ndarray:
    """Nucleus probability map with the input's H x W.

    The image is reflection-padded up to the next multiple of ``2**depth``
    and the output cropped back.
    """
    model.eval()
    h, w = image.shape[:2]
    d = model.config.divisor
    ph, pw = -h % d, -w % d
    x = image_to_tensor(image)[None]
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    prob = torch.softmax(model(x), dim=1)[0, 1, :h, :w]
    return prob.numpy().astype(np.float32)
