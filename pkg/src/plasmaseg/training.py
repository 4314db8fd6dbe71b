"""Training loop and checkpoint container shared by both network stages."""

from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import DivergenceError, EmptyDatasetError, PlasmaSegError

log = logging.getLogger(__name__)


class CheckpointError(PlasmaSegError):
    pass


@dataclass(frozen=True)
class TrainSpec:
    """Optimisation settings for one training stage (Adam + cross-entropy)."""

    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 4
    checkpoint_path: str | None = None
    rng_seed: int = 0
    optimizer: str = "adam"
    loss: str = "cross_entropy"
    augment: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")


def _augment(x: torch.Tensor, y: torch.Tensor, gen: torch.Generator):
    k = int(torch.randint(0, 4, (1,), generator=gen))
    x, y = torch.rot90(x, k, (-2, -1)), torch.rot90(y, k, (-2, -1))
    if torch.rand(1, generator=gen).item() < 0.5:
        x, y = x.flip(-1), y.flip(-1)
    return x, y


def fit(
    model: nn.Module,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    spec: TrainSpec,
) -> list[float]:
    """Train `model` in place on (N, C, H, W) inputs and (N, H, W) class targets.

    Returns the mean cross-entropy per epoch.
    """
    if len(inputs) == 0:
        raise EmptyDatasetError("no training samples")
    gen = torch.Generator().manual_seed(spec.rng_seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=spec.learning_rate)
    history: list[float] = []
    n = len(inputs)
    model.train()
    for epoch in range(spec.epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            x, y = inputs[idx], targets[idx]
            if spec.augment:
                x, y = _augment(x, y, gen)
            optimizer.zero_grad()
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss.item()} in epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
        mean = total / n
        if not math.isfinite(mean):
            raise DivergenceError(f"non-finite mean loss in epoch {epoch}")
        history.append(mean)
        log.info("epoch %d/%d loss %.5f", epoch + 1, spec.epochs, mean)
    model.eval()
    return history


def save_checkpoint(
    path: str | Path, kind: str, config: Any, model: nn.Module, **extra: Any
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": kind,
        "config": asdict(config),
        "state_dict": model.state_dict(),
        **extra,
    }
    torch.save(payload, path)
    return path


def read_checkpoint(path: str | Path, kind: str) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} model, not {kind!r}")
    return payload


def check_config(payload: dict[str, Any], config: Any, path: Any = "") -> None:
    stored = payload["config"]
    wanted = asdict(config)
    if _normalise(stored) != _normalise(wanted):
        raise CheckpointError(
            f"checkpoint {path} was trained with config {stored}, not {wanted}"
        )


def _normalise(d: dict[str, Any]) -> dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def parameter_digest(model: nn.Module) -> str:
    buf = io.BytesIO()
    for name, tensor in sorted(model.state_dict().items()):
        buf.write(name.encode())
        buf.write(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return hashlib.sha256(buf.getvalue()).hexdigest()


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, C) array in [0, 255] -> (C, H, W) float tensor in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1) / 255.0
