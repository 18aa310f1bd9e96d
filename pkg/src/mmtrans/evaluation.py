"""Metrics, error-distribution histograms, and the ablation harness."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .data import ImageSlice, PairedDataset
from .detector import detect
from .errors import ConfigurationError, ValidationError
from .registration import full_field, resample
from .translation import CycleTrainConfig, LossWeights, train_cycle, translate

PSNR_CAP_DB = 99.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _pixels(img) -> np.ndarray:
    return np.asarray(img.pixels if isinstance(img, ImageSlice) else img, dtype=np.float64)


def psnr(pred, ref) -> float:
    """Peak signal-to-noise ratio in dB with data range 2 (the [-1, 1]
    span); identical inputs report the 99 dB cap."""
    p, r = _pixels(pred), _pixels(ref)
    if p.shape != r.shape:
        raise ValidationError(f"psnr shape mismatch: {p.shape} vs {r.shape}")
    mse = float(np.mean((p - r) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(4.0 / mse))


def _ssim_window() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    coords = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(coords ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(pred, ref) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, data range 1 after rescaling to [0, 1], averaged over valid
    window positions."""
    p, r = _pixels(pred), _pixels(ref)
    if p.shape != r.shape:
        raise ValidationError(f"ssim shape mismatch: {p.shape} vs {r.shape}")
    if min(p.shape) < _SSIM_WINDOW:
        raise ValidationError(f"image smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    p = (p + 1.0) / 2.0
    r = (r + 1.0) / 2.0
    win = _ssim_window()
    half = _SSIM_WINDOW // 2

    def corr(img: np.ndarray) -> np.ndarray:
        full = ndimage.correlate(img, win, mode="constant")
        return full[half:-half, half:-half]

    mu_p = corr(p)
    mu_r = corr(r)
    var_p = corr(p * p) - mu_p ** 2
    var_r = corr(r * r) - mu_r ** 2
    cov = corr(p * r) - mu_p * mu_r
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    num = (2.0 * mu_p * mu_r + c1) * (2.0 * cov + c2)
    den = (mu_p ** 2 + mu_r ** 2 + c1) * (var_p + var_r + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MetricReport:
    n: int
    psnr_mean: float
    psnr_std: float
    ssim_mean_pct: float
    ssim_std_pct: float
    per_pair: tuple[tuple[float, float], ...]  # (psnr_db, ssim_pct) rows

    def summary(self) -> str:
        return (f"PSNR {self.psnr_mean:.2f}+-{self.psnr_std:.2f} dB, "
                f"SSIM {self.ssim_mean_pct:.2f}+-{self.ssim_std_pct:.2f} % (n={self.n})")


def evaluate_pairs(preds: list[ImageSlice], refs: list[ImageSlice]) -> MetricReport:
    if len(preds) != len(refs) or not preds:
        raise ValidationError("need matching, nonempty prediction/reference lists")
    rows = [(psnr(p, r), ssim(p, r) * 100.0) for p, r in zip(preds, refs)]
    ps = np.array([r[0] for r in rows])
    ss = np.array([r[1] for r in rows])
    return MetricReport(n=len(rows), psnr_mean=float(ps.mean()), psnr_std=float(ps.std()),
                        ssim_mean_pct=float(ss.mean()), ssim_std_pct=float(ss.std()),
                        per_pair=tuple(rows))


# --------------------------------------------------------------------------
# Error-frequency distributions
# --------------------------------------------------------------------------

def per_pair_errors(dataset: PairedDataset, det_net, mreg_weights=None) -> dict:
    """Mean detected error per pair before (and, when registration weights
    are given, after) warping the source through the full field."""
    before, after = [], []
    coarse_net, fine_net = mreg_weights if mreg_weights is not None else (None, None)
    for pair in dataset:
        before.append(float(detect(pair.x, pair.y, det_net).values.mean()))
        if fine_net is not None or coarse_net is not None:
            x_f = resample(pair.x, full_field(pair.x, pair.y, coarse_net, fine_net))
            after.append(float(detect(x_f, pair.y, det_net).values.mean()))
    return {"before": np.asarray(before), "after": np.asarray(after) if after else None}


def error_histogram(dataset: PairedDataset, det_net, mreg_weights=None, bins: int = 20) -> dict:
    """Frequency distribution of per-pair mean errors; frequencies sum to 1
    per curve."""
    errs = per_pair_errors(dataset, det_net, mreg_weights)
    values = [errs["before"]] + ([errs["after"]] if errs["after"] is not None else [])
    lo = min(float(v.min()) for v in values)
    hi = max(float(v.max()) for v in values)
    if hi <= lo:
        hi = lo + 1e-6
    edges = np.linspace(lo, hi, bins + 1)
    out = {"bin_edges": edges, "before_means": errs["before"], "after_means": errs["after"]}
    counts, _ = np.histogram(errs["before"], bins=edges)
    out["freq_before"] = counts / errs["before"].size
    if errs["after"] is not None:
        counts, _ = np.histogram(errs["after"], bins=edges)
        out["freq_after"] = counts / errs["after"].size
    return out


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.abs(fa - fb).max())


# --------------------------------------------------------------------------
# Ablation harness
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationVariant:
    id: str
    uses_mreg: str  # 'none' | 'fine_only' | 'full'
    uses_mdet: bool
    prior_form: str  # translation prior form, 'none' for the baseline
    lambda_prior: float = 30.0


ABLATION_VARIANTS: dict[str, AblationVariant] = {
    "V1": AblationVariant("V1", "none", False, "none"),
    "V2": AblationVariant("V2", "none", False, "plain"),
    "V3": AblationVariant("V3", "fine_only", False, "fine_only"),
    "V4": AblationVariant("V4", "full", False, "full_mreg"),
    "V5": AblationVariant("V5", "none", True, "mdet_only"),
    "V6": AblationVariant("V6", "full", True, "full"),
}


@dataclass
class AblationCheckpoints:
    """Frozen modules the variants draw from. ``fine_only`` is a fine
    registration trained without the coarse stage."""

    coarse: object = None
    fine: object = None
    fine_only: object = None
    detector: object = None


def _variant_inputs(variant: AblationVariant, ckpts: AblationCheckpoints):
    if variant.uses_mreg == "fine_only":
        if ckpts.fine_only is None:
            raise ConfigurationError(f"variant {variant.id} requires a fine-only registration checkpoint")
        mreg = (None, ckpts.fine_only)
    elif variant.uses_mreg == "full":
        if ckpts.coarse is None or ckpts.fine is None:
            raise ConfigurationError(f"variant {variant.id} requires coarse and fine registration checkpoints")
        mreg = (ckpts.coarse, ckpts.fine)
    else:
        mreg = None
    mdet = None
    if variant.uses_mdet:
        if ckpts.detector is None:
            raise ConfigurationError(f"variant {variant.id} requires a detector checkpoint")
        mdet = ckpts.detector
    return mreg, mdet


def run_ablation(train_dataset: PairedDataset, test_dataset: PairedDataset,
                 variants: list[AblationVariant], checkpoints: AblationCheckpoints,
                 weights: LossWeights, config: CycleTrainConfig,
                 trained_out: dict | None = None) -> dict[str, MetricReport]:
    """Train each variant with its exact loss composition (same seed and
    data order for all) and score it on the held-out aligned test pairs."""
    refs = [pair.reference if pair.reference is not None else pair.y for pair in test_dataset]
    reports: dict[str, MetricReport] = {}
    for variant in variants:
        mreg, mdet = _variant_inputs(variant, checkpoints)
        cfg = replace(config, prior_form=variant.prior_form)
        w = LossWeights(lambda_cyc=weights.lambda_cyc, lambda_prior=variant.lambda_prior,
                        lambda_smooth=weights.lambda_smooth, th=weights.th)
        nets = train_cycle(train_dataset, mreg, mdet, w, cfg)
        preds = [translate(pair.x, nets.G) for pair in test_dataset]
        reports[variant.id] = evaluate_pairs(preds, refs)
        if trained_out is not None:
            trained_out[variant.id] = nets
    return reports
