"""Coarse-to-fine multi-modal registration.

The coarse stage regresses a 4-parameter affine transform (rotation, log
isotropic scale, translation) and trains against a differentiable
mutual-information loss. The fine stage regresses a dense displacement
field and trains by minimizing the frozen misalignment detector's output
on the warped pair plus a diffusion smoothness penalty. The final field is
the elementwise sum of the dense affine field and the fine field.

Displacement convention: ``output(p) = bilinear_sample(x, p + d(p))`` with
``d`` stored as (dy, dx) in pixels and zero fill outside the image.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .data import ImageSlice, PairedDataset
from .detector import detect_tensor
from .errors import TrainingDiverged, ValidationError
from .networks import CoarseRegNet, FineRegNet


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Per-pixel displacement map, shape (H, W, 2) as (dy, dx) in pixels."""

    displacement: np.ndarray

    def __post_init__(self):
        d = np.array(self.displacement, dtype=np.float32, copy=True)
        if d.ndim != 3 or d.shape[2] != 2:
            raise ValidationError(f"displacement must be (H, W, 2), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValidationError("displacement contains non-finite values")
        d.flags.writeable = False
        object.__setattr__(self, "displacement", d)

    @property
    def shape(self) -> tuple[int, int]:
        return self.displacement.shape[:2]  # type: ignore[return-value]

    @staticmethod
    def zero(shape: tuple[int, int]) -> "DeformationField":
        return DeformationField(np.zeros((*shape, 2), dtype=np.float32))


@dataclass(frozen=True)
class AffineTheta:
    """Decoded affine parameters: rotation (radians), log isotropic scale,
    translation as a fraction of width/height."""

    rotation: float = 0.0
    log_scale: float = 0.0
    translate_x: float = 0.0
    translate_y: float = 0.0

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(
            [self.rotation, self.log_scale, self.translate_x, self.translate_y], dtype=dtype
        )


IDENTITY_THETA = AffineTheta()


def as_tensor(arr, dtype=np.float32) -> torch.Tensor:
    """Copying numpy -> torch conversion (containers hold read-only arrays)."""
    return torch.from_numpy(np.array(arr, dtype=dtype, copy=True))


# --------------------------------------------------------------------------
# Differentiable cores (torch tensors)
# --------------------------------------------------------------------------

def warp_tensor(image: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Bilinear warp of a (H, W) image by a (H, W, 2) displacement.

    Zero outside bounds; differentiable in both arguments. A zero field
    reproduces the input bit-exactly (weights collapse to 1 and exact 0s).
    """
    if image.ndim != 2 or disp.ndim != 3 or disp.shape[:2] != image.shape or disp.shape[2] != 2:
        raise ValidationError(f"warp shape mismatch: image {tuple(image.shape)}, disp {tuple(disp.shape)}")
    h, w = image.shape
    dtype = torch.promote_types(image.dtype, disp.dtype)
    image = image.to(dtype)
    disp = disp.to(dtype)
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=image.device),
        torch.arange(w, dtype=dtype, device=image.device),
        indexing="ij",
    )
    py = gy + disp[..., 0]
    px = gx + disp[..., 1]
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    fy = py - y0
    fx = px - x0
    y0l = y0.long()
    x0l = x0.long()

    def corner(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = image[yi.clamp(0, h - 1), xi.clamp(0, w - 1)]
        return vals * valid.to(dtype)

    v00 = corner(y0l, x0l)
    v01 = corner(y0l, x0l + 1)
    v10 = corner(y0l + 1, x0l)
    v11 = corner(y0l + 1, x0l + 1)
    return (
        v00 * (1 - fy) * (1 - fx)
        + v01 * (1 - fy) * fx
        + v10 * fy * (1 - fx)
        + v11 * fy * fx
    )


def theta_to_disp_tensor(theta: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Dense (H, W, 2) displacement of the center-anchored affine map
    (rotate, isotropic scale, translate). Identity parameters give an
    exactly-zero field."""
    dtype = theta.dtype
    rot, log_s, tx, ty = theta[0], theta[1], theta[2], theta[3]
    s = torch.exp(log_s)
    cos, sin = torch.cos(rot), torch.sin(rot)
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=theta.device),
        torch.arange(w, dtype=dtype, device=theta.device),
        indexing="ij",
    )
    oy = gy - cy
    ox = gx - cx
    sample_x = cx + s * (cos * ox - sin * oy) + tx * w
    sample_y = cy + s * (sin * ox + cos * oy) + ty * h
    return torch.stack([sample_y - gy, sample_x - gx], dim=-1)


def smoothness_tensor(disp: torch.Tensor) -> torch.Tensor:
    """Diffusion regularizer: per channel, the mean squared forward
    difference along rows plus along columns, averaged over channels."""
    terms = []
    for c in range(disp.shape[-1]):
        f = disp[..., c]
        dr = f[1:, :] - f[:-1, :]
        dc = f[:, 1:] - f[:, :-1]
        term = f.new_zeros(())
        if dr.numel():
            term = term + dr.pow(2).mean()
        if dc.numel():
            term = term + dc.pow(2).mean()
        terms.append(term)
    return torch.stack(terms).mean()


def _soft_bin_weights(values: torch.Tensor, bins: int) -> torch.Tensor:
    """Parzen-window soft assignment of [-1, 1] values onto bin centers,
    Gaussian kernel with sigma = one bin width, rows normalized to sum 1."""
    width = 2.0 / bins
    centers = torch.linspace(-1.0 + width / 2, 1.0 - width / 2, bins,
                             dtype=values.dtype, device=values.device)
    z = (values[:, None] - centers[None, :]) / width
    k = torch.exp(-0.5 * z * z)
    return k / k.sum(dim=1, keepdim=True)


def mi_parzen_tensor(a: torch.Tensor, b: torch.Tensor, bins: int = 32) -> torch.Tensor:
    """Differentiable mutual information from a Parzen-window joint
    histogram over bins x bins cells spanning [-1, 1]^2."""
    eps = 1e-12
    wa = _soft_bin_weights(a.reshape(-1), bins)
    wb = _soft_bin_weights(b.reshape(-1), bins)
    joint = wa.t() @ wb / wa.shape[0]
    pa = joint.sum(dim=1)
    pb = joint.sum(dim=0)
    log_ratio = torch.log(joint + eps) - torch.log(pa + eps)[:, None] - torch.log(pb + eps)[None, :]
    return (joint * log_ratio).sum()


def mi_hard(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """Hard-binned mutual information with the same binning and no
    smoothing. Exact oracle: constant inputs give exactly 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    ia = np.clip(np.floor((a + 1.0) / 2.0 * bins), 0, bins - 1).astype(np.int64)
    ib = np.clip(np.floor((b + 1.0) / 2.0 * bins), 0, bins - 1).astype(np.int64)
    joint = np.zeros((bins, bins), dtype=np.float64)
    np.add.at(joint, (ia, ib), 1.0)
    joint /= a.size
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    rows, cols = np.nonzero(nz)
    vals = joint[rows, cols]
    return float(np.sum(vals * (np.log(vals) - np.log(pa[rows]) - np.log(pb[cols]))))


# --------------------------------------------------------------------------
# Public operations
# --------------------------------------------------------------------------

def resample(x: ImageSlice, field: DeformationField) -> ImageSlice:
    """Warp a slice through a displacement field (zero fill outside)."""
    if x.shape != field.shape:
        raise ValidationError(f"resample shape mismatch: {x.shape} vs {field.shape}")
    with torch.no_grad():
        out = warp_tensor(as_tensor(x.pixels), as_tensor(field.displacement))
    return ImageSlice(out.numpy(), modality_tag=x.modality_tag, slice_index=x.slice_index)


def theta_to_field(theta: AffineTheta, shape: tuple[int, int]) -> DeformationField:
    h, w = shape
    with torch.no_grad():
        disp = theta_to_disp_tensor(theta.as_tensor(torch.float64), h, w)
    return DeformationField(disp.numpy())


def mutual_information_loss(a, b, bins: int = 32, mode: str = "parzen") -> float:
    """Negative mutual information between two [-1, 1] images (lower means
    more informative alignment). ``mode='hard'`` uses the unsmoothed
    histogram oracle."""
    pa = a.pixels if isinstance(a, ImageSlice) else np.asarray(a)
    pb = b.pixels if isinstance(b, ImageSlice) else np.asarray(b)
    if pa.shape != pb.shape:
        raise ValidationError(f"shape mismatch: {pa.shape} vs {pb.shape}")
    if mode == "hard":
        return -mi_hard(pa, pb, bins)
    if mode == "parzen":
        with torch.no_grad():
            mi = mi_parzen_tensor(as_tensor(pa, np.float64), as_tensor(pb, np.float64), bins)
        return float(-mi)
    raise ValidationError(f"unknown MI mode {mode!r}")


def smoothness_loss(field: DeformationField | np.ndarray) -> float:
    disp = field.displacement if isinstance(field, DeformationField) else np.asarray(field)
    with torch.no_grad():
        return float(smoothness_tensor(as_tensor(disp, np.float64)))


def decode_theta(raw: torch.Tensor) -> AffineTheta:
    v = raw.detach().reshape(-1).tolist()
    return AffineTheta(rotation=v[0], log_scale=v[1], translate_x=v[2], translate_y=v[3])


def _pair_tensor(img: ImageSlice) -> torch.Tensor:
    return as_tensor(img.pixels)


def _stack_input(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.stack([a, b]).unsqueeze(0)


def coarse_register(x: ImageSlice, y_tilde: ImageSlice, net: CoarseRegNet) -> AffineTheta:
    net.eval()
    with torch.no_grad():
        raw = net(_stack_input(_pair_tensor(x), _pair_tensor(y_tilde)))[0]
    return decode_theta(raw)


def fine_register(x_c: ImageSlice, y_tilde: ImageSlice, net: FineRegNet) -> DeformationField:
    net.eval()
    with torch.no_grad():
        disp = net(_stack_input(_pair_tensor(x_c), _pair_tensor(y_tilde)))[0]
    return DeformationField(disp.permute(1, 2, 0).numpy())


def full_field(x: ImageSlice, y_tilde: ImageSlice,
               coarse_net: CoarseRegNet | None, fine_net: FineRegNet | None) -> DeformationField:
    """The complete field: dense affine displacement plus the fine field
    evaluated on the coarse-warped pair (elementwise sum)."""
    h, w = x.shape
    disp = np.zeros((h, w, 2), dtype=np.float32)
    x_c = x
    if coarse_net is not None:
        theta = coarse_register(x, y_tilde, coarse_net)
        disp_c = theta_to_field(theta, (h, w))
        disp = disp + disp_c.displacement
        x_c = resample(x, disp_c)
    if fine_net is not None:
        disp_f = fine_register(x_c, y_tilde, fine_net)
        disp = disp + disp_f.displacement
    return DeformationField(disp)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class RegTrainConfig:
    epochs: int = 80
    lr: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    width_mult: float = 1.0
    mi_bins: int = 32
    lambda_smooth: float = 1.0
    seed: int = 0
    device: str = "cpu"
    checkpoint_dir: Path | None = None
    log_rows: list | None = None  # appended in place when provided


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{stage}: non-finite loss at epoch {epoch} step {step}")


def _save_checkpoint(net, directory: Path | None, name: str) -> None:
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(net.state_dict(), directory / name)


def train_coarse(dataset: PairedDataset, config: RegTrainConfig) -> CoarseRegNet:
    """Train the affine stage by maximizing Parzen mutual information
    between the warped source and the target."""
    if len(dataset) == 0:
        raise ValidationError("cannot train on an empty dataset")
    torch.manual_seed(config.seed)
    h, w = dataset[0].shape
    net = CoarseRegNet(h, width_mult=config.width_mult).to(config.device)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, betas=config.betas)
    order_rng = np.random.default_rng(config.seed)
    tensors = [(_pair_tensor(p.x).to(config.device), _pair_tensor(p.y).to(config.device))
               for p in dataset]
    net.train()
    for epoch in range(config.epochs):
        total = 0.0
        for step, idx in enumerate(order_rng.permutation(len(tensors))):
            xt, yt = tensors[idx]
            opt.zero_grad()
            raw = net(_stack_input(xt, yt))[0]
            disp = theta_to_disp_tensor(raw, h, w)
            warped = warp_tensor(xt, disp)
            loss = -mi_parzen_tensor(warped, yt, config.mi_bins)
            _check_finite(loss, "train_coarse", epoch, step)
            loss.backward()
            opt.step()
            total += float(loss.detach())
        if config.log_rows is not None:
            config.log_rows.append(("coarse", epoch, total / len(tensors)))
        _save_checkpoint(net, config.checkpoint_dir, f"coarse_epoch_{epoch:03d}.pt")
    net.eval()
    return net


def train_fine(dataset: PairedDataset, coarse_net: CoarseRegNet | None,
               detector, config: RegTrainConfig) -> FineRegNet:
    """Train the dense stage against the frozen detector: minimize the mean
    detected error on the fine-warped pair plus the smoothness penalty.
    ``coarse_net=None`` trains a fine-only model on the raw pairs."""
    if len(dataset) == 0:
        raise ValidationError("cannot train on an empty dataset")
    torch.manual_seed(config.seed + 1)
    h, w = dataset[0].shape
    net = FineRegNet(width_mult=config.width_mult).to(config.device)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, betas=config.betas)
    order_rng = np.random.default_rng(config.seed + 1)

    detector.eval()
    for p in detector.parameters():
        p.requires_grad_(False)
    if coarse_net is not None:
        coarse_net.eval()

    pairs = []
    with torch.no_grad():
        for p in dataset:
            xt = _pair_tensor(p.x).to(config.device)
            yt = _pair_tensor(p.y).to(config.device)
            if coarse_net is not None:
                raw = coarse_net(_stack_input(xt, yt))[0]
                xt = warp_tensor(xt, theta_to_disp_tensor(raw, h, w))
            pairs.append((xt, yt))

    net.train()
    for epoch in range(config.epochs):
        tot_err = tot_smooth = 0.0
        for step, idx in enumerate(order_rng.permutation(len(pairs))):
            x_c, yt = pairs[idx]
            opt.zero_grad()
            disp = net(_stack_input(x_c, yt))[0].permute(1, 2, 0)
            x_f = warp_tensor(x_c, disp)
            err = detect_tensor(detector, x_f, yt).mean()
            smooth = smoothness_tensor(disp)
            loss = err + config.lambda_smooth * smooth
            _check_finite(loss, "train_fine", epoch, step)
            loss.backward()
            opt.step()
            tot_err += float(err.detach())
            tot_smooth += float(smooth.detach())
        if config.log_rows is not None:
            config.log_rows.append(("fine", epoch, tot_err / len(pairs), tot_smooth / len(pairs)))
        _save_checkpoint(net, config.checkpoint_dir, f"fine_epoch_{epoch:03d}.pt")
    net.eval()
    return net


def write_log_csv(rows: Iterable[tuple], path: str | Path, header: tuple[str, ...]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
