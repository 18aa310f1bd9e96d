"""Phantom data synthesis and misalignment-error injection.

Phantoms are compositions of random ellipses and annuli on a dark
background rendered in two "modalities": modality B applies a fixed
monotone nonlinear intensity transfer plus per-structure contrast flips,
so no global pointwise intensity map links the two. Corruption modes:

* Random-Affine: small rotation / translation / scaling of the source.
* Mis-Slice: pair slice i with slice i+-offset of the target volume.
* elastic: smooth random dense deformation (used for detector training).

Shuffle Remap partitions the intensity axis into k segments and remaps
each segment linearly onto the extent of another segment, simulating a
different modality while keeping pixels in place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .data import GroundTruthMasks, ImageSlice, PairedDataset, TrainingPair, Volume
from .errors import ValidationError
from .registration import AffineTheta, DeformationField, resample, theta_to_field

_PHANTOM_BLUR_SIGMA = 0.5  # px; edge softening only, geometry untouched


# --------------------------------------------------------------------------
# Parameter types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineParams:
    """Rotation in degrees, isotropic scale factor, translation as a
    fraction of width/height."""

    rotation: float = 0.0
    scale: float = 1.0
    translate_x: float = 0.0
    translate_y: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite([self.rotation, self.scale, self.translate_x, self.translate_y])):
            raise ValidationError("affine parameters must be finite")
        if abs(self.rotation) > 180.0 or self.scale <= 0.0 or max(
                abs(self.translate_x), abs(self.translate_y)) > 1.0:
            raise ValidationError(f"affine parameters out of range: {self}")

    def to_theta(self) -> AffineTheta:
        return AffineTheta(
            rotation=float(np.deg2rad(self.rotation)),
            log_scale=float(np.log(self.scale)),
            translate_x=self.translate_x,
            translate_y=self.translate_y,
        )


IDENTITY_AFFINE = AffineParams()

# Corruption defaults: +-3 degrees, +-3% translation, +-3% scaling.
DEFAULT_AFFINE_RANGES = {"rotation": 3.0, "translate": 0.03, "scale": 0.03}


def sample_affine_params(rng: np.random.Generator, ranges: dict | None = None) -> AffineParams:
    r = dict(DEFAULT_AFFINE_RANGES, **(ranges or {}))
    return AffineParams(
        rotation=float(rng.uniform(-r["rotation"], r["rotation"])),
        scale=float(1.0 + rng.uniform(-r["scale"], r["scale"])),
        translate_x=float(rng.uniform(-r["translate"], r["translate"])),
        translate_y=float(rng.uniform(-r["translate"], r["translate"])),
    )


@dataclass(frozen=True)
class ElasticParams:
    control_grid: int = 8
    max_displacement: float = 4.0  # px
    smoothing_sigma: float = 2.0  # px

    def __post_init__(self):
        if self.control_grid < 2:
            raise ValidationError("control grid must be at least 2x2")
        if self.max_displacement < 0 or self.smoothing_sigma < 0:
            raise ValidationError("elastic magnitudes must be nonnegative")


def default_elastic_params(size: int) -> ElasticParams:
    # displacement and smoothing scale with resolution (4 px at 64x64)
    return ElasticParams(control_grid=8, max_displacement=4.0 * size / 64.0,
                         smoothing_sigma=2.0 * size / 64.0)


@dataclass(frozen=True)
class ShuffleRemapSpec:
    """k intensity segments over [-1, 1], cut at ``boundaries``, with
    ``permutation[j]`` the target slot of source segment j (0-based)."""

    k: int
    boundaries: tuple[float, ...]
    permutation: tuple[int, ...]

    def __post_init__(self):
        if not 2 <= self.k <= 50:
            raise ValidationError(f"k must lie in [2, 50], got {self.k}")
        b = tuple(float(v) for v in self.boundaries)
        if len(b) != self.k - 1:
            raise ValidationError(f"need {self.k - 1} boundaries, got {len(b)}")
        if any(not -1.0 < v < 1.0 for v in b) or any(y <= x for x, y in zip(b, b[1:])):
            raise ValidationError("boundaries must be strictly increasing within (-1, 1)")
        p = tuple(int(v) for v in self.permutation)
        if sorted(p) != list(range(self.k)):
            raise ValidationError("permutation must be a bijection on the segments")
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "permutation", p)

    @staticmethod
    def identity(k: int) -> "ShuffleRemapSpec":
        edges = np.linspace(-1.0, 1.0, k + 1)[1:-1]
        return ShuffleRemapSpec(k, tuple(edges), tuple(range(k)))


def sample_remap_spec(rng: np.random.Generator, k: int | None = None) -> ShuffleRemapSpec:
    """Random spec with a minimum segment width of 2/(4k). Cut points are
    uniform conditioned on that minimum (floor-plus-spacings construction,
    equivalent to resampling until the minimum holds)."""
    if k is None:
        k = int(rng.integers(2, 51))
    min_w = 2.0 / (4.0 * k)
    slack = 2.0 - k * min_w
    u = np.sort(rng.uniform(0.0, slack, size=k - 1))
    boundaries = -1.0 + u + min_w * np.arange(1, k)
    perm = tuple(int(v) for v in rng.permutation(k))
    return ShuffleRemapSpec(k, tuple(float(b) for b in boundaries), perm)


@dataclass(frozen=True, eq=False)
class MDetSample:
    """Detector training quadruple: clean x, deformed x~, remapped y_dg
    (pixel-aligned with x~), and the label |x - x~| / 2."""

    x: ImageSlice
    x_tilde: ImageSlice
    y_dg: ImageSlice
    label: np.ndarray

    def __post_init__(self):
        lab = np.array(self.label, dtype=np.float32, copy=True)
        if lab.shape != self.x.shape or lab.min() < 0.0 or lab.max() > 1.0:
            raise ValidationError("label must match the image shape with values in [0, 1]")
        lab.flags.writeable = False
        object.__setattr__(self, "label", lab)


# --------------------------------------------------------------------------
# Corruption operators
# --------------------------------------------------------------------------

def affine_displacement(params: AffineParams, shape: tuple[int, int]) -> DeformationField:
    return theta_to_field(params.to_theta(), shape)


def random_affine(x: ImageSlice, params: AffineParams) -> ImageSlice:
    """Resample under the center-anchored affine map (rotation, isotropic
    scale, translation), bilinear with zero fill."""
    return resample(x, affine_displacement(params, x.shape))


def random_elastic(x: ImageSlice, params: ElasticParams, seed: int
                   ) -> tuple[ImageSlice, DeformationField]:
    """Smooth random deformation: per-control-point displacements uniform in
    [-m, m], bicubic upsampling to a dense field, Gaussian smoothing, then a
    clip back to [-m, m] per component (bicubic lobes can overshoot)."""
    h, w = x.shape
    rng = np.random.default_rng(seed)
    g = params.control_grid
    m = params.max_displacement
    ctrl = rng.uniform(-m, m, size=(2, g, g)).astype(np.float64)
    if m == 0.0:
        field = DeformationField(np.zeros((h, w, 2), dtype=np.float32))
        return ImageSlice(x.pixels, x.modality_tag, x.slice_index), field
    with torch.no_grad():
        dense = F.interpolate(torch.from_numpy(ctrl).unsqueeze(0), size=(h, w),
                              mode="bicubic", align_corners=True)[0].numpy()
    if params.smoothing_sigma > 0:
        dense = np.stack([ndimage.gaussian_filter(c, params.smoothing_sigma) for c in dense])
    dense = np.clip(dense, -m, m)
    field = DeformationField(np.moveaxis(dense, 0, -1))
    return resample(x, field), field


def shuffle_remap(x: ImageSlice, spec: ShuffleRemapSpec) -> ImageSlice:
    """Pointwise piecewise-linear intensity permutation. Segments are
    half-open [a, b) except the last (closed); segment j is mapped linearly
    onto the extent of segment permutation[j]. Fixed segments pass values
    through unchanged, so the identity spec is exactly the identity."""
    v = np.asarray(x.pixels, dtype=np.float64)
    edges = np.concatenate(([-1.0], np.asarray(spec.boundaries, dtype=np.float64), [1.0]))
    seg = np.searchsorted(np.asarray(spec.boundaries, dtype=np.float64), v, side="right")
    perm = np.asarray(spec.permutation, dtype=np.int64)
    src_lo = edges[seg]
    src_w = edges[seg + 1] - src_lo
    tgt = perm[seg]
    tgt_lo = edges[tgt]
    tgt_w = edges[tgt + 1] - tgt_lo
    out = tgt_lo + (v - src_lo) * (tgt_w / src_w)
    fixed = tgt == seg
    out[fixed] = v[fixed]
    return ImageSlice(np.clip(out, -1.0, 1.0).astype(np.float32),
                      modality_tag=x.modality_tag, slice_index=x.slice_index)


def make_mdet_sample(x: ImageSlice, affine: AffineParams, elastic: ElasticParams,
                     remap: ShuffleRemapSpec, seed: int) -> MDetSample:
    """x~ = elastic(affine(x)); y_dg = shuffle_remap(x~);
    label = |x - x~| / 2."""
    x_tilde, _ = random_elastic(random_affine(x, affine), elastic, seed)
    y_dg = shuffle_remap(x_tilde, remap)
    label = np.abs(x.pixels.astype(np.float64) - x_tilde.pixels.astype(np.float64)) / 2.0
    return MDetSample(x=x, x_tilde=x_tilde, y_dg=y_dg, label=label.astype(np.float32))


def mdet_sample_stream(images: list[ImageSlice], n_steps: int, seed: int,
                       affine_ranges: dict | None = None,
                       elastic: ElasticParams | None = None,
                       k_range: tuple[int, int] = (2, 50)):
    """Online stream of detector samples with fresh random corruption per
    step. Always pairs (x, y_dg) in that order.

    Each sample draws a severity factor in [0, 1] (biased toward small
    values) that scales both the affine ranges and the elastic magnitude,
    so the labels run continuously from exactly aligned to strongly
    deformed: near-zero samples teach the detector its floor, large ones
    teach deep interior disagreement.
    """
    rng = np.random.default_rng(seed)
    if not images:
        raise ValidationError("need at least one source image")
    size = images[0].shape[0]
    base = dict(DEFAULT_AFFINE_RANGES, **(affine_ranges or {}))
    for _ in range(n_steps):
        img = images[int(rng.integers(len(images)))]
        severity = float(rng.uniform(0.0, 1.0)) ** 1.5
        params = sample_affine_params(rng, {k: v * severity for k, v in base.items()})
        spec = sample_remap_spec(rng, int(rng.integers(k_range[0], k_range[1] + 1)))
        el = elastic
        if el is None:
            el = ElasticParams(control_grid=8,
                               max_displacement=severity * 10.0 * size / 64.0,
                               smoothing_sigma=float(rng.uniform(1.5, 3.0)) * size / 64.0)
        yield make_mdet_sample(img, params, el, spec, seed=int(rng.integers(2 ** 31)))


# --------------------------------------------------------------------------
# Phantom generator (stand-in corpus)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class _Structure:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float
    inner: float  # annulus hole fraction, 0 for a filled ellipse
    level_a: float
    level_b: float
    shade_a: tuple[float, float]  # smooth interior shading coefficients
    shade_b: tuple[float, float]
    z_center: float = 0.0
    z_radius: float = 1.0


def _transfer_b(a: float) -> float:
    # fixed monotone nonlinear intensity transfer onto [-1, 1]
    return 2.0 * ((a + 1.0) / 2.0) ** 0.6 - 1.0


def _sample_structures(rng: np.random.Generator, size: int, n_range: tuple[int, int],
                       n_slices: int = 1) -> list[_Structure]:
    """Random ellipses/annuli with two coupled modality renderings.

    The contrast flip is deterministic from shape: annuli invert their
    transferred intensity. One ellipse/annulus pair shares a modality-A
    level, so no global pointwise A->B map exists, yet the translation
    stays a deterministic function of the image (shape context decides).
    """
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    # shapes first: flips follow from them, and at least one of each kind
    inners = np.where(rng.random(n) < 0.4, rng.uniform(0.35, 0.65, n), 0.0)
    inners[int(rng.integers(n))] = 0.0
    if not (inners > 0).any() and n >= 2:
        free = [i for i in range(n) if inners[i] == 0.0]
        inners[free[int(rng.integers(len(free)))]] = float(rng.uniform(0.35, 0.65))
    flips = inners > 0.0
    for _ in range(64):
        levels_a = np.linspace(-0.4, 0.95, n)
        levels_a = levels_a[rng.permutation(n)] + rng.uniform(-0.04, 0.04, n)
        levels_a = np.clip(levels_a, -0.45, 0.97)
        # duplicate one intensity across an (ellipse, annulus) pair:
        # same A level, different B levels
        if flips.any() and (~flips).any():
            i = int(rng.choice(np.nonzero(~flips)[0]))
            j = int(rng.choice(np.nonzero(flips)[0]))
            levels_a[j] = levels_a[i]
        levels_b = np.array([_transfer_b(a) for a in levels_a])
        levels_b[flips] = 0.5 - levels_b[flips]
        gaps = np.abs(levels_b[:, None] - levels_b[None, :])
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() >= 0.18 and np.abs(levels_b + 1.0).min() >= 0.3:
            break
    structures = []
    for idx in range(n):
        # geometry-locked interior shading: without it the piecewise-flat
        # interiors carry no deformation residual and the detector would
        # never learn to score interior disagreement; modality B reuses the
        # same pattern (negated when the contrast flips) so aligned pairs
        # stay consistent with a per-structure pointwise intensity map
        shade = rng.uniform(0.06, 0.14, size=2) * rng.choice([-1.0, 1.0], size=2)
        flip_sign = -1.0 if flips[idx] else 1.0
        structures.append(_Structure(
            cy=float(rng.uniform(0.25, 0.75) * size),
            cx=float(rng.uniform(0.25, 0.75) * size),
            ry=float(max(2.5, rng.uniform(0.08, 0.28) * size)),
            rx=float(max(2.5, rng.uniform(0.08, 0.28) * size)),
            angle=float(rng.uniform(0.0, np.pi)),
            inner=float(inners[idx]),
            level_a=float(levels_a[idx]),
            level_b=float(levels_b[idx]),
            shade_a=(float(shade[0]), float(shade[1])),
            shade_b=(float(flip_sign * shade[0]), float(flip_sign * shade[1])),
            z_center=float(rng.uniform(0.15, 0.85) * n_slices),
            z_radius=float(rng.uniform(0.25, 0.5) * max(n_slices, 1)),
        ))
    return structures


def _paint(structures: list[_Structure], size: int, z: float | None = None
           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render both modalities plus a structure-id map (0 = background,
    later structures overwrite earlier; big structures painted first)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img_a = np.full((size, size), -1.0)
    img_b = np.full((size, size), -1.0)
    ids = np.zeros((size, size), dtype=np.int16)
    order = sorted(range(len(structures)),
                   key=lambda i: structures[i].ry * structures[i].rx, reverse=True)
    for idx in order:
        s = structures[idx]
        ry, rx = s.ry, s.rx
        if z is not None:
            u = (z - s.z_center) / s.z_radius
            if abs(u) >= 1.0:
                continue
            # flattened cross-section profile: size varies along z but a
            # structure never shrinks below ~70% before vanishing, so
            # presence changes between nearby slices stay conspicuous
            f = float(np.sqrt(1.0 - 0.5 * u * u))
            ry, rx = ry * f, rx * f
            if min(ry, rx) < 1.5:
                continue
        dy = yy - s.cy
        dx = xx - s.cx
        c, sn = np.cos(s.angle), np.sin(s.angle)
        u1 = (c * dx + sn * dy) / rx
        u2 = (-sn * dx + c * dy) / ry
        r2 = u1 * u1 + u2 * u2
        mask = r2 <= 1.0
        if s.inner > 0.0:
            mask &= r2 >= s.inner ** 2
        img_a[mask] = s.level_a + s.shade_a[0] * u1[mask] + s.shade_a[1] * u2[mask]
        img_b[mask] = s.level_b + s.shade_b[0] * u1[mask] + s.shade_b[1] * u2[mask]
        ids[mask] = idx + 1
    img_a = ndimage.gaussian_filter(np.clip(img_a, -1.0, 1.0), _PHANTOM_BLUR_SIGMA)
    img_b = ndimage.gaussian_filter(np.clip(img_b, -1.0, 1.0), _PHANTOM_BLUR_SIGMA)
    return img_a, img_b, ids


def make_phantom_pair(seed: int, size: int
                      ) -> tuple[ImageSlice, ImageSlice, GroundTruthMasks]:
    """One pixel-wise aligned two-modality phantom; masks mark every pixel
    aligned."""
    if size < 16:
        raise ValidationError(f"size must be at least 16, got {size}")
    rng = np.random.default_rng(seed)
    structures = _sample_structures(rng, size, n_range=(3, 8))
    img_a, img_b, _ = _paint(structures, size)
    a = ImageSlice(img_a, modality_tag="A")
    b = ImageSlice(img_b, modality_tag="B")
    return a, b, GroundTruthMasks.all_aligned((size, size))


@dataclass(frozen=True, eq=False)
class PhantomSubject:
    """Two aligned modality volumes plus the per-slice structure-id maps
    the mask oracles need."""

    volume_a: Volume
    volume_b: Volume
    structure_ids: np.ndarray  # (n_slices, H, W) int16


def make_phantom_volume(seed: int, size: int, n_slices: int) -> PhantomSubject:
    if size < 16:
        raise ValidationError(f"size must be at least 16, got {size}")
    if n_slices < 1:
        raise ValidationError("need at least one slice")
    rng = np.random.default_rng(seed)
    structures = _sample_structures(rng, size, n_range=(6, 12), n_slices=n_slices)
    slices_a, slices_b, id_maps = [], [], []
    for t in range(n_slices):
        img_a, img_b, ids = _paint(structures, size, z=float(t))
        slices_a.append(ImageSlice(img_a, modality_tag="A", slice_index=t))
        slices_b.append(ImageSlice(img_b, modality_tag="B", slice_index=t))
        id_maps.append(ids)
    sid = f"phantom{seed:06d}"
    return PhantomSubject(
        volume_a=Volume(tuple(slices_a), subject_id=sid, modality_tag="A"),
        volume_b=Volume(tuple(slices_b), subject_id=sid, modality_tag="B"),
        structure_ids=np.stack(id_maps),
    )


# --------------------------------------------------------------------------
# Training-set construction
# --------------------------------------------------------------------------

def warp_ids(ids: np.ndarray, field: DeformationField) -> np.ndarray:
    """Nearest-neighbor warp of a structure-id map (background outside)."""
    h, w = ids.shape
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    py = np.rint(gy + field.displacement[..., 0]).astype(np.int64)
    px = np.rint(gx + field.displacement[..., 1]).astype(np.int64)
    valid = (py >= 0) & (py < h) & (px >= 0) & (px < w)
    out = np.zeros_like(ids)
    out[valid] = ids[py[valid], px[valid]]
    return out


def masks_from_ids(ids_x: np.ndarray, ids_y: np.ndarray) -> GroundTruthMasks:
    """Partition pixels by comparing structure-id maps: structures present
    on only one side are unregistrable, remaining id mismatches are
    registrable, everything else is aligned."""
    present_x = np.setdiff1d(np.unique(ids_x), [0])
    present_y = np.setdiff1d(np.unique(ids_y), [0])
    only_x = np.setdiff1d(present_x, present_y)
    only_y = np.setdiff1d(present_y, present_x)
    unreg = np.isin(ids_x, only_x) | np.isin(ids_y, only_y)
    reg = (ids_x != ids_y) & ~unreg
    aligned = ~(unreg | reg)
    return GroundTruthMasks(aligned, reg, unreg)


def build_training_set(volumes_x: list[Volume], volumes_y: list[Volume], mode: str,
                       slice_offset: int = 3, p: float = 0.5, seed: int = 0,
                       structure_ids: list[np.ndarray] | None = None,
                       affine_ranges: dict | None = None,
                       include_reference: bool = False) -> PairedDataset:
    """Pair up subject volumes under one of the four corruption modes.

    Paired: aligned pairs. RA: random affine applied to the x side (the
    parameters are recorded per pair). MS: with probability p the y slice is
    replaced by slice i+-offset (sign uniform, clamped at volume edges).
    RA+MS: both. Oracle masks come from the structure-id geometry.
    """
    if mode not in ("Paired", "RA", "MS", "RA+MS"):
        raise ValidationError(f"unknown mode {mode!r}")
    if len(volumes_x) != len(volumes_y):
        raise ValidationError("need one y volume per x volume")
    if structure_ids is not None and len(structure_ids) != len(volumes_x):
        raise ValidationError("need one structure-id stack per subject")
    if include_reference and mode != "Paired":
        raise ValidationError("references are only emitted for Paired (test) sets")
    rng = np.random.default_rng(seed)
    pairs = []
    for subj, (vx, vy) in enumerate(zip(volumes_x, volumes_y)):
        if len(vx) != len(vy):
            raise ValidationError(
                f"subject {subj}: unequal slice counts ({len(vx)} vs {len(vy)})")
        n = len(vx)
        ids = structure_ids[subj] if structure_ids is not None else None
        for i in range(n):
            j = i
            if mode in ("MS", "RA+MS") and rng.random() < p:
                sign = 1 if rng.random() < 0.5 else -1
                j = int(np.clip(i + sign * slice_offset, 0, n - 1))
            x_img = vx.slices[i]
            y_img = vy.slices[j]
            affine_truth = None
            ids_x = ids[i] if ids is not None else None
            if mode in ("RA", "RA+MS"):
                params = sample_affine_params(rng, affine_ranges)
                field = affine_displacement(params, x_img.shape)
                x_img = resample(x_img, field)
                affine_truth = (params.rotation, params.scale,
                                params.translate_x, params.translate_y)
                if ids_x is not None:
                    ids_x = warp_ids(ids_x, field)
            masks = None
            if ids is not None:
                masks = masks_from_ids(ids_x, ids[j])
            reference = vy.slices[i] if include_reference else None
            pairs.append(TrainingPair(x_img, y_img, masks=masks, reference=reference,
                                      affine_truth=affine_truth))
    return PairedDataset(tuple(pairs), mode=mode)
