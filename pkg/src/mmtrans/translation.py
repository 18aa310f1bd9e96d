"""Prior-regularized cycle-consistent adversarial translation.

Generators G: X->Y and F: Y->X train against PatchGAN discriminators with
the log-form adversarial objective (stable logits cross-entropy,
non-saturating generator), the bidirectional L1 cycle loss, and a prior
term that ties G's output to the registration-warped, confidence-weighted
target. The registration and detector modules stay frozen; their per-pair
outputs are computed once and cached.

Prior forms (the ablation ladder):
  none       -- plain cycle GAN baseline
  plain      -- mean |G(x) - y~|
  fine_only  -- source warped by a fine-only registration first
  full_mreg  -- source warped by the coarse-to-fine cascade
  mdet_only  -- residual weighted by the activated detector map, raw source
  full       -- warped source and detector weights on the warped pair
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageSlice, PairedDataset
from .detector import activate_array, detect, detect_tensor
from .errors import ConfigurationError, TrainingDiverged, ValidationError
from .networks import PatchDiscriminator, ResnetGenerator
from .registration import as_tensor, full_field, resample

PRIOR_FORMS = ("none", "plain", "fine_only", "full_mreg", "mdet_only", "full")


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_prior: float = 30.0
    lambda_smooth: float = 1.0  # consumed by the registration stage
    th: float = 0.1

    def __post_init__(self):
        if min(self.lambda_cyc, self.lambda_prior, self.lambda_smooth) < 0:
            raise ValidationError("loss weights must be nonnegative")


@dataclass
class CycleTrainConfig:
    epochs: int = 60
    lr: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    width_mult: float = 1.0
    adv: str = "log"  # or "lsgan"
    prior_form: str = "full"
    use_image_pool: bool = False
    pool_size: int = 50
    seed: int = 0
    device: str = "cpu"
    checkpoint_dir: Path | None = None
    log_rows: list | None = None


@dataclass
class CycleNets:
    G: ResnetGenerator
    F: ResnetGenerator
    D_X: PatchDiscriminator
    D_Y: PatchDiscriminator


# --------------------------------------------------------------------------
# Loss building blocks
# --------------------------------------------------------------------------

def real_term(logits: torch.Tensor) -> torch.Tensor:
    """-log sigmoid(l), averaged over the spatial logit map."""
    return F.softplus(-logits).mean()


def fake_term(logits: torch.Tensor) -> torch.Tensor:
    """-log(1 - sigmoid(l)), averaged over the spatial logit map."""
    return F.softplus(logits).mean()


def _gen_adv(logits: torch.Tensor, adv: str) -> torch.Tensor:
    if adv == "lsgan":
        return ((logits - 1.0) ** 2).mean()
    return real_term(logits)  # non-saturating: push fakes toward "real"


def _disc_adv(real_logits: torch.Tensor, fake_logits: torch.Tensor, adv: str) -> torch.Tensor:
    if adv == "lsgan":
        return ((real_logits - 1.0) ** 2).mean() + (fake_logits ** 2).mean()
    return real_term(real_logits) + fake_term(fake_logits)


def cycle_loss_tensor(x: torch.Tensor, y: torch.Tensor, fake_y: torch.Tensor,
                      fake_x: torch.Tensor, G, F_net) -> torch.Tensor:
    return (F_net(fake_y) - x).abs().mean() + (G(fake_x) - y).abs().mean()


def _to_net(img: torch.Tensor) -> torch.Tensor:
    return img.unsqueeze(0).unsqueeze(0)


def cycle_loss(x_f: ImageSlice, y_tilde: ImageSlice, G, F_net) -> float:
    """Bidirectional reconstruction error ||F(G(x)) - x|| + ||G(F(y)) - y||."""
    if x_f.shape != y_tilde.shape:
        raise ValidationError("cycle_loss shape mismatch")
    with torch.no_grad():
        xt = _to_net(as_tensor(x_f.pixels))
        yt = _to_net(as_tensor(y_tilde.pixels))
        loss = cycle_loss_tensor(xt, yt, G(xt), F_net(yt), G, F_net)
    return float(loss)


def adversarial_loss(x_f: ImageSlice, y_tilde: ImageSlice, G, F_net, D_X, D_Y,
                     adv: str = "log") -> tuple[float, float]:
    """The two sides of the adversarial objective for one pair, evaluated
    without stepping: (generator term, discriminator term)."""
    if x_f.shape != y_tilde.shape:
        raise ValidationError("adversarial_loss shape mismatch")
    with torch.no_grad():
        xt = _to_net(as_tensor(x_f.pixels))
        yt = _to_net(as_tensor(y_tilde.pixels))
        fake_y = G(xt)
        fake_x = F_net(yt)
        gen = _gen_adv(D_Y(fake_y), adv) + _gen_adv(D_X(fake_x), adv)
        disc = _disc_adv(D_Y(yt), D_Y(fake_y), adv) + _disc_adv(D_X(xt), D_X(fake_x), adv)
    return float(gen), float(disc)


def prior_residual(pred: torch.Tensor, target: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return ((pred - target).abs() * weights).mean()


def prepare_prior_inputs(pair, prior_form: str, mreg_weights, mdet_weights, th: float
                         ) -> tuple[ImageSlice, np.ndarray]:
    """Frozen-module preprocessing for one pair: the (possibly warped)
    source actually fed to the networks, and the confidence weights for the
    prior residual (ones when the detector is not used)."""
    coarse_net, fine_net = mreg_weights if mreg_weights is not None else (None, None)
    x_used = pair.x
    if prior_form == "fine_only":
        x_used = resample(pair.x, full_field(pair.x, pair.y, None, fine_net))
    elif prior_form in ("full_mreg", "full"):
        x_used = resample(pair.x, full_field(pair.x, pair.y, coarse_net, fine_net))
    if prior_form == "mdet_only":
        w = activate_array(detect(pair.x, pair.y, mdet_weights).values, th)
    elif prior_form == "full":
        w = activate_array(detect(x_used, pair.y, mdet_weights).values, th)
    else:
        w = np.ones(pair.shape, dtype=np.float32)
    return x_used, w


def prior_loss(x: ImageSlice, y_tilde: ImageSlice, G, mreg_weights, mdet_weights,
               th: float = 0.1) -> float:
    """Full-form prior: x_f = x warped by the frozen cascade, W = activated
    detection on (x_f, y~), mean |G(x_f) - y~| * W."""
    class _Pair:
        pass

    pair = _Pair()
    pair.x, pair.y, pair.shape = x, y_tilde, x.shape
    x_f, w = prepare_prior_inputs(pair, "full", mreg_weights, mdet_weights, th)
    with torch.no_grad():
        pred = G(_to_net(as_tensor(x_f.pixels)))[0, 0]
        loss = prior_residual(pred, as_tensor(y_tilde.pixels), torch.from_numpy(w))
    return float(loss)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

class ImagePool:
    """History buffer of generated images for discriminator updates."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.images: list[torch.Tensor] = []

    def query(self, img: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return img
        if len(self.images) < self.size:
            self.images.append(img.detach().clone())
            return img
        if self.rng.random() > 0.5:
            i = int(self.rng.integers(self.size))
            out = self.images[i].clone()
            self.images[i] = img.detach().clone()
            return out
        return img


def _validate_prerequisites(config: CycleTrainConfig, mreg_weights, mdet_weights) -> None:
    form = config.prior_form
    if form not in PRIOR_FORMS:
        raise ConfigurationError(f"unknown prior form {form!r}")
    coarse_net, fine_net = mreg_weights if mreg_weights is not None else (None, None)
    if form == "fine_only" and fine_net is None:
        raise ConfigurationError("prior form 'fine_only' requires a fine registration checkpoint")
    if form in ("full_mreg", "full") and (coarse_net is None or fine_net is None):
        raise ConfigurationError(f"prior form {form!r} requires coarse and fine registration checkpoints")
    if form in ("mdet_only", "full") and mdet_weights is None:
        raise ConfigurationError(f"prior form {form!r} requires a detector checkpoint")


def train_cycle(dataset: PairedDataset, mreg_weights, mdet_weights,
                weights: LossWeights, config: CycleTrainConfig) -> CycleNets:
    """Alternating generator/discriminator training of the translation
    core. Registration and detector weights are read-only; their per-pair
    outputs are cached once up front."""
    if len(dataset) == 0:
        raise ValidationError("cannot train on an empty dataset")
    _validate_prerequisites(config, mreg_weights, mdet_weights)
    torch.manual_seed(config.seed)
    device = config.device
    G = ResnetGenerator(1, 1, config.width_mult).to(device)
    F_net = ResnetGenerator(1, 1, config.width_mult).to(device)
    D_X = PatchDiscriminator(1, config.width_mult).to(device)
    D_Y = PatchDiscriminator(1, config.width_mult).to(device)
    opt_g = torch.optim.Adam(list(G.parameters()) + list(F_net.parameters()),
                             lr=config.lr, betas=config.betas)
    opt_dx = torch.optim.Adam(D_X.parameters(), lr=config.lr, betas=config.betas)
    opt_dy = torch.optim.Adam(D_Y.parameters(), lr=config.lr, betas=config.betas)
    order_rng = np.random.default_rng(config.seed)
    pool_x = ImagePool(config.pool_size if config.use_image_pool else 0,
                       np.random.default_rng(config.seed + 1))
    pool_y = ImagePool(config.pool_size if config.use_image_pool else 0,
                       np.random.default_rng(config.seed + 2))

    use_prior = config.prior_form != "none" and weights.lambda_prior > 0.0
    cached = []
    for pair in dataset:
        if use_prior:
            x_used, w = prepare_prior_inputs(pair, config.prior_form, mreg_weights,
                                             mdet_weights, weights.th)
        else:
            x_used, w = pair.x, np.ones(pair.shape, dtype=np.float32)
        cached.append((
            _to_net(as_tensor(x_used.pixels)).to(device),
            _to_net(as_tensor(pair.y.pixels)).to(device),
            torch.from_numpy(w).to(device),
        ))

    for epoch in range(config.epochs):
        sums = np.zeros(4)
        for step, idx in enumerate(order_rng.permutation(len(cached))):
            xt, yt, wt = cached[idx]

            opt_g.zero_grad()
            fake_y = G(xt)
            fake_x = F_net(yt)
            adv_g = _gen_adv(D_Y(fake_y), config.adv) + _gen_adv(D_X(fake_x), config.adv)
            cyc = cycle_loss_tensor(xt, yt, fake_y, fake_x, G, F_net)
            loss_g = adv_g + weights.lambda_cyc * cyc
            prior = None
            if use_prior:
                prior = prior_residual(fake_y[0, 0], yt[0, 0], wt)
                loss_g = loss_g + weights.lambda_prior * prior
            if not torch.isfinite(loss_g):
                raise TrainingDiverged(f"train_cycle: non-finite generator loss at epoch {epoch} step {step}")
            loss_g.backward()
            opt_g.step()

            opt_dy.zero_grad()
            loss_dy = _disc_adv(D_Y(yt), D_Y(pool_y.query(fake_y.detach())), config.adv)
            loss_dy.backward()
            opt_dy.step()
            opt_dx.zero_grad()
            loss_dx = _disc_adv(D_X(xt), D_X(pool_x.query(fake_x.detach())), config.adv)
            loss_dx.backward()
            opt_dx.step()
            if not (torch.isfinite(loss_dx) and torch.isfinite(loss_dy)):
                raise TrainingDiverged(f"train_cycle: non-finite discriminator loss at epoch {epoch} step {step}")

            sums += [float(adv_g.detach()), float(cyc.detach()),
                     float(prior.detach()) if prior is not None else 0.0,
                     float(loss_dx.detach()) + float(loss_dy.detach())]
        if config.log_rows is not None:
            config.log_rows.append((epoch, *(sums / len(cached))))
        if config.checkpoint_dir is not None:
            config.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            torch.save({"G": G.state_dict(), "F": F_net.state_dict(),
                        "D_X": D_X.state_dict(), "D_Y": D_Y.state_dict()},
                       config.checkpoint_dir / f"cycle_epoch_{epoch:03d}.pt")
    for net in (G, F_net, D_X, D_Y):
        net.eval()
    return CycleNets(G=G, F=F_net, D_X=D_X, D_Y=D_Y)


def translate(x: ImageSlice, G: ResnetGenerator) -> ImageSlice:
    """Single deterministic forward pass; output stays in [-1, 1]."""
    G.eval()
    with torch.no_grad():
        out = G(_to_net(as_tensor(x.pixels)))[0, 0]
    return ImageSlice(out.clamp(-1.0, 1.0).numpy(), modality_tag="translated",
                      slice_index=x.slice_index)
