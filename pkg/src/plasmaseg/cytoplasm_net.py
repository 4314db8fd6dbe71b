"""Stage 2: per-crop cytoplasm segmentation with an attention-augmented ASPP.

Encoder (residual, output stride 8) -> atrous branches -> channel attention
on every branch -> learned kernel across the stacked branch axis -> decoder
with a low-level skip, upsampled back to the crop size. One model is
trained per crop scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import CellInstance, EmptyDatasetError, ShapeError
from .data_io import DatasetRecord
from .instance_ops import compute_crop_window, crop_mask, extract_crop
from .training import (
    CheckpointError,
    TrainSpec,
    check_config,
    fit,
    read_checkpoint,
    save_checkpoint,
)


@dataclass(frozen=True)
class AttentionDeeplabConfig:
    in_channels: int = 4
    out_classes: int = 2
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    aspp_rates: tuple[int, ...] = (1, 6, 12, 18)
    aspp_channels: int = 32
    attention_reduction: int = 4
    fusion_kernel: int | None = None
    fusion_spatial: int = 3
    low_level_channels: int = 16
    decoder_channels: int = 32

    def __post_init__(self) -> None:
        rates = tuple(int(r) for r in self.aspp_rates)
        object.__setattr__(self, "aspp_rates", rates)
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if len(rates) < 2:
            raise ValueError("at least two atrous rates are required")
        if rates[0] < 1 or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"atrous rates must be >= 1 and strictly ascending, got {rates}")
        if len(self.encoder_channels) != 3:
            raise ValueError("encoder_channels needs one width per stride-2 stage (3)")
        if self.fusion_kernel is not None and not 1 <= self.fusion_kernel <= len(rates):
            raise ValueError("fusion_kernel must lie in [1, number of rates]")

    @property
    def scale_kernel(self) -> int:
        return self.fusion_kernel or len(self.aspp_rates)


def _conv_bn_relu(cin, cout, k=3, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=dilation * (k // 2), dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = _conv_bn_relu(cin, cout, stride=stride)
        self.conv2 = nn.Sequential(
            nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout)
        )
        self.shortcut = nn.Sequential(
            nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
        )

    def forward(self, x):
        return F.relu(self.conv2(self.conv1(x)) + self.shortcut(x))


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate: ``out[c] = sigmoid(mlp(mean(x)))[c] * x[c]``."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    @staticmethod
    def descriptor(x: torch.Tensor) -> torch.Tensor:
        return x.mean(dim=(-2, -1))

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(F.relu(self.fc1(self.descriptor(x)))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.weights(x)[..., None, None]


class CrossScaleFusion(nn.Module):
    """3-D convolution over branches stacked on a new scale axis.

    The kernel spans `scale_kernel` branches; when shorter than the number
    of branches the remaining scale positions are averaged.
    """

    def __init__(self, channels: int, out_channels: int, n_branches: int,
                 scale_kernel: int | None = None, spatial: int = 3):
        super().__init__()
        self.n_branches = n_branches
        k = scale_kernel or n_branches
        self.conv = nn.Conv3d(
            channels, out_channels, (k, spatial, spatial),
            padding=(0, spatial // 2, spatial // 2), bias=False,  # BatchNorm follows
        )

    def forward(self, branches: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(branches) != self.n_branches:
            raise ShapeError(f"expected {self.n_branches} branches, got {len(branches)}")
        shapes = {tuple(b.shape) for b in branches}
        if len(shapes) != 1:
            raise ShapeError(f"branch shapes differ: {sorted(shapes)}")
        stacked = torch.stack(list(branches), dim=2)  # (B, C, N, S, S)
        return self.conv(stacked).mean(dim=2)

    @torch.no_grad()
    def init_averaging(self, weight2d: torch.Tensor) -> None:
        """Set every scale slice of the kernel to ``weight2d / k``."""
        k = self.conv.weight.shape[2]
        self.conv.weight.copy_(weight2d[:, :, None].expand_as(self.conv.weight) / k)


class AttentionDeeplab(nn.Module):
    def __init__(self, config: AttentionDeeplabConfig = AttentionDeeplabConfig()):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.encoder_channels
        self.stem = _conv_bn_relu(config.in_channels, c1)
        self.stage1 = ResidualBlock(c1, c1, stride=2)  # stride 2, low-level
        self.stage2 = ResidualBlock(c1, c2, stride=2)
        self.stage3 = ResidualBlock(c2, c3, stride=2)  # stride 8
        self.aspp = nn.ModuleList(
            _conv_bn_relu(c3, config.aspp_channels, dilation=r) for r in config.aspp_rates
        )
        self.attention = nn.ModuleList(
            ChannelAttention(config.aspp_channels, config.attention_reduction)
            for _ in config.aspp_rates
        )
        self.fusion = CrossScaleFusion(
            config.aspp_channels, config.aspp_channels, len(config.aspp_rates),
            config.fusion_kernel, config.fusion_spatial,
        )
        self.fusion_post = nn.Sequential(nn.BatchNorm2d(config.aspp_channels), nn.ReLU(inplace=True))
        self.low_proj = _conv_bn_relu(c1, config.low_level_channels, k=1)
        self.decoder = nn.Sequential(
            _conv_bn_relu(config.aspp_channels + config.low_level_channels, config.decoder_channels),
            _conv_bn_relu(config.decoder_channels, config.decoder_channels),
        )
        self.head = nn.Conv2d(config.decoder_channels, config.out_classes, 1)

    def encode(self, x):
        low = self.stage1(self.stem(x))
        return low, self.stage3(self.stage2(low))

    def aspp_forward(self, features: torch.Tensor) -> list[torch.Tensor]:
        return [branch(features) for branch in self.aspp]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        side = x.shape[-1]
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        if x.shape[-2] != side or side % 8:
            raise ShapeError(f"crop must be square with side divisible by 8, got {tuple(x.shape[-2:])}")
        low, feats = self.encode(x)
        branches = [att(b) for att, b in zip(self.attention, self.aspp_forward(feats))]
        fused = self.fusion_post(self.fusion(branches))
        fused = F.interpolate(fused, size=low.shape[-2:], mode="bilinear", align_corners=False)
        y = self.decoder(torch.cat([fused, self.low_proj(low)], dim=1))
        return F.interpolate(self.head(y), size=x.shape[-2:], mode="bilinear", align_corners=False)


def crops_to_tensor(crops: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack (S, S, 4) crops into (N, 4, S, S): RGB scaled to [0, 1], mask kept 0/1."""
    arr = np.stack([np.asarray(c, dtype=np.float32) for c in crops])
    x = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
    x[:, :3] /= 255.0
    return x


def cytoplasm_forward(model: AttentionDeeplab, crop: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Class logits ``(2, S, S)`` for one (S, S, 4) crop, or a batch tensor."""
    if isinstance(crop, np.ndarray):
        if crop.ndim != 3 or crop.shape[2] != model.config.in_channels:
            raise ShapeError(f"expected S x S x {model.config.in_channels}, got {crop.shape}")
        return model(crops_to_tensor([crop]))[0]
    return model(crop)


def build_patches(
    records: Sequence[DatasetRecord],
    scale: float,
    side: int,
    margin_factor: float = 1.0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Training crops around every gt nucleus and their cytoplasm targets."""
    crops, targets = [], []
    for rec in records:
        for nuc, cyto in rec.gt_instances:
            if not nuc.any():
                continue
            inst = CellInstance.from_mask(nuc)
            window = compute_crop_window(inst, scale, rec.image.shape[:2], margin_factor)
            crop = extract_crop(rec.image, nuc, window, side)
            if not crop[:, :, 3].any():
                continue
            crops.append(crop)
            targets.append(crop_mask(cyto, window, side))
    if not crops:
        raise EmptyDatasetError(f"no usable training patches at scale {scale}")
    return crops_to_tensor(crops), torch.from_numpy(np.stack(targets).astype(np.int64))


def train_cytoplasm_scale(
    records: Sequence[DatasetRecord],
    scale: float,
    spec: TrainSpec,
    config: AttentionDeeplabConfig = AttentionDeeplabConfig(),
    input_side: int = 64,
    margin_factor: float = 1.0,
) -> tuple[AttentionDeeplab, list[float]]:
    inputs, targets = build_patches(records, scale, input_side, margin_factor)
    torch.manual_seed(spec.rng_seed)
    model = AttentionDeeplab(config)
    history = fit(model, inputs, targets, spec)
    if spec.checkpoint_path:
        save_checkpoint(
            spec.checkpoint_path, "cytoplasm", config, model,
            scale=float(scale), input_side=int(input_side), loss_history=history,
        )
    return model, history


def load_cytoplasm(
    path: str | Path,
    scale: float | None = None,
    config: AttentionDeeplabConfig | None = None,
    allowed_scales: Sequence[float] | None = None,
) -> tuple[AttentionDeeplab, float, int]:
    """Load a per-scale model; returns (model, scale, input_side)."""
    payload = read_checkpoint(path, "cytoplasm")
    stored = float(payload["scale"])
    if scale is not None and not np.isclose(stored, scale):
        raise CheckpointError(f"{path} was trained for scale {stored}, not {scale}")
    if allowed_scales is not None and not np.isclose(stored, allowed_scales).any():
        raise CheckpointError(f"{path} scale {stored} is not among configured scales {list(allowed_scales)}")
    cfg = dict(payload["config"])
    if config is None:
        config = AttentionDeeplabConfig(**cfg)
    else:
        check_config(payload, config, path)
    model = AttentionDeeplab(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, stored, int(payload["input_side"])


@torch.no_grad()
def predict_cytoplasm(model: AttentionDeeplab, crops: Sequence[np.ndarray], batch_size: int = 32) -> np.ndarray:
    """Binary cytoplasm masks (N, S, S) by per-pixel argmax."""
    model.eval()
    out = []
    for i in range(0, len(crops), batch_size):
        logits = model(crops_to_tensor(crops[i : i + batch_size]))
        out.append(logits.argmax(dim=1).numpy().astype(np.uint8))
    if not out:
        return np.zeros((0,), dtype=np.uint8)
    return np.concatenate(out)
