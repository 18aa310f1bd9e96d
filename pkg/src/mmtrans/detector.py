"""Multi-modal misalignment error detector.

The detector maps a stacked cross-modal pair to a per-pixel error map in
[0, 1]. It trains on synthetic samples whose label is the normalized
single-modal residual |x - x~| / 2, so it learns to express multi-modal
disagreement on the same scale. The activation turns an error map into a
confidence matrix: zero weight at or above the threshold, 1 - error below
it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .data import ImageSlice, PairedDataset
from .errors import TrainingDiverged, ValidationError
from .networks import ResnetGenerator, detector_net


def _as_tensor(arr) -> torch.Tensor:
    return torch.from_numpy(np.array(arr, dtype=np.float32, copy=True))


@dataclass(frozen=True, eq=False)
class ErrorMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32, copy=True)
        if v.ndim != 2:
            raise ValidationError(f"error map must be 2-D, got {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ValidationError("error map values must lie in [0, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class ConfidenceMatrix:
    weights: np.ndarray
    threshold_used: float

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float32, copy=True)
        if w.ndim != 2 or w.min() < 0.0 or w.max() > 1.0:
            raise ValidationError("confidence weights must be a 2-D array in [0, 1]")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)


def detect_tensor(net: ResnetGenerator, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Forward the stacked (a, b) pair; tanh output mapped onto [0, 1].
    Differentiable with respect to the inputs (weights may be frozen)."""
    out = net(torch.stack([a, b]).unsqueeze(0))[0, 0]
    return (out + 1.0) * 0.5


def detect(a: ImageSlice, b: ImageSlice, net: ResnetGenerator) -> ErrorMap:
    if a.shape != b.shape:
        raise ValidationError(f"detect shape mismatch: {a.shape} vs {b.shape}")
    net.eval()
    with torch.no_grad():
        out = detect_tensor(net, _as_tensor(a.pixels), _as_tensor(b.pixels))
    return ErrorMap(out.clamp(0.0, 1.0).numpy())


def activate_array(errmap: np.ndarray, th: float) -> np.ndarray:
    return np.where(errmap >= th, 0.0, 1.0 - errmap).astype(np.float32)


def activate(errmap: ErrorMap, th: float = 0.1) -> ConfidenceMatrix:
    """Confidence weights: 0 wherever the detected error reaches the
    threshold, 1 - error elsewhere."""
    if not 0.0 < th < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {th}")
    return ConfidenceMatrix(activate_array(errmap.values, th), threshold_used=th)


def activate_tensor(err: torch.Tensor, th: float) -> torch.Tensor:
    return torch.where(err >= th, torch.zeros_like(err), 1.0 - err)


@dataclass
class DetTrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    width_mult: float = 1.0
    seed: int = 0
    device: str = "cpu"
    steps_per_epoch: int = 0  # 0 disables per-epoch checkpoints/logs
    checkpoint_dir: Path | None = None
    log_rows: list | None = None


def train_detector(samples: Iterable, config: DetTrainConfig) -> ResnetGenerator:
    """Fit the detector with an L1 loss between detect(x, y_dg) and the
    sample label. ``samples`` is a finite stream of MDetSample; fresh
    corruptions per step are the caller's responsibility."""
    torch.manual_seed(config.seed)
    net: ResnetGenerator | None = None
    opt = None
    step = 0
    epoch_loss = 0.0
    for sample in samples:
        if net is None:
            net = detector_net(config.width_mult).to(config.device)
            opt = torch.optim.Adam(net.parameters(), lr=config.lr, betas=config.betas)
            net.train()
        xt = _as_tensor(sample.x.pixels).to(config.device)
        yt = _as_tensor(sample.y_dg.pixels).to(config.device)
        label = _as_tensor(sample.label).to(config.device)
        opt.zero_grad()
        pred = detect_tensor(net, xt, yt)
        loss = (pred - label).abs().mean()
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"train_detector: non-finite loss at step {step}")
        loss.backward()
        opt.step()
        epoch_loss += float(loss.detach())
        step += 1
        if config.steps_per_epoch and step % config.steps_per_epoch == 0:
            epoch = step // config.steps_per_epoch
            if config.log_rows is not None:
                config.log_rows.append((epoch - 1, epoch_loss / config.steps_per_epoch))
            epoch_loss = 0.0
            if config.checkpoint_dir is not None:
                config.checkpoint_dir.mkdir(parents=True, exist_ok=True)
                torch.save(net.state_dict(), config.checkpoint_dir / f"mdet_epoch_{epoch - 1:03d}.pt")
    if net is None:
        raise ValidationError("empty sample stream")
    net.eval()
    return net


def format_percent(value: float) -> str:
    """0.0278 -> '2.78' (error fractions reported as percentages)."""
    return f"{value * 100.0:.2f}"


def mean_misalignment_error(dataset: PairedDataset, net: ResnetGenerator
                            ) -> tuple[list[float], float, float]:
    """Mean detected error per pair, in percent, plus the dataset mean and
    standard deviation."""
    per_pair = []
    for pair in dataset:
        err = detect(pair.x, pair.y, net)
        per_pair.append(float(err.values.mean()) * 100.0)
    arr = np.asarray(per_pair, dtype=np.float64)
    return per_pair, float(arr.mean()), float(arr.std())
