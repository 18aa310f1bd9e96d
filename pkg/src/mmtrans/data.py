"""Core array containers, dataset manifests, and on-disk formats.

Images are 2-D float arrays with intensities in [-1, 1]. Two file formats
are supported:

* ``png16`` -- 16-bit grayscale PNG, [-1, 1] mapped linearly onto
  [0, 65535]. Viewable, lossy only up to half a quantization step.
* ``rawf32`` -- 4-byte magic ``RF32``, uint32 height, uint32 width
  (little-endian), then row-major little-endian float32 pixels.
  Round-trips are bit-exact.

A dataset manifest is a JSON array of records
``{"x": path, "y": path, "masks"?: {...}, "reference"?: path}``; paths are
relative to the manifest file. A sibling ``meta.json`` may carry the
construction mode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import LoadError, ValidationError

RAWF32_MAGIC = b"RF32"
MODES = ("Paired", "RA", "MS", "RA+MS")


def _as_readonly(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class ImageSlice:
    """One 2-D intensity image in [-1, 1]."""

    pixels: np.ndarray
    modality_tag: str = ""
    slice_index: int = 0

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float32, copy=True)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValidationError(f"expected a 2-D image, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValidationError("image contains non-finite values")
        lo, hi = float(px.min()), float(px.max())
        if lo < -1.0 - 1e-5 or hi > 1.0 + 1e-5:
            raise ValidationError(f"intensities outside [-1, 1]: [{lo:.6g}, {hi:.6g}]")
        px = np.clip(px, -1.0, 1.0)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class GroundTruthMasks:
    """Synthesis-time oracle masks partitioning the image into aligned,
    registrable-error, and unregistrable-error pixels."""

    aligned: np.ndarray
    registrable: np.ndarray
    unregistrable: np.ndarray

    def __post_init__(self):
        a = _as_readonly(self.aligned, bool)
        r = _as_readonly(self.registrable, bool)
        u = _as_readonly(self.unregistrable, bool)
        if not (a.shape == r.shape == u.shape) or a.ndim != 2:
            raise ValidationError("masks must share one 2-D shape")
        total = a.astype(np.int64) + r.astype(np.int64) + u.astype(np.int64)
        if not np.all(total == 1):
            raise ValidationError("masks must partition the image (sum to 1 everywhere)")
        object.__setattr__(self, "aligned", a)
        object.__setattr__(self, "registrable", r)
        object.__setattr__(self, "unregistrable", u)

    @property
    def shape(self) -> tuple[int, int]:
        return self.aligned.shape  # type: ignore[return-value]

    @staticmethod
    def all_aligned(shape: tuple[int, int]) -> "GroundTruthMasks":
        ones = np.ones(shape, dtype=bool)
        zeros = np.zeros(shape, dtype=bool)
        return GroundTruthMasks(ones, zeros, zeros)


@dataclass(frozen=True, eq=False)
class Volume:
    """An ordered axial stack of slices from one subject and modality."""

    slices: tuple[ImageSlice, ...]
    subject_id: str = ""
    modality_tag: str = ""

    def __post_init__(self):
        slices = tuple(self.slices)
        if not slices:
            raise ValidationError("volume must contain at least one slice")
        idx = [s.slice_index for s in slices]
        if any(b - a != 1 for a, b in zip(idx, idx[1:])):
            raise ValidationError(f"slice indices must be contiguous and increasing, got {idx}")
        shapes = {s.shape for s in slices}
        if len(shapes) != 1:
            raise ValidationError(f"slices in a volume must share one shape, got {shapes}")
        object.__setattr__(self, "slices", slices)

    def __len__(self) -> int:
        return len(self.slices)


@dataclass(frozen=True, eq=False)
class TrainingPair:
    """One (x, y~) pair, optionally with oracle masks, an aligned reference
    target, and the affine corruption that produced x (degrees, scale,
    tx, ty fractions)."""

    x: ImageSlice
    y: ImageSlice
    masks: GroundTruthMasks | None = None
    reference: ImageSlice | None = None
    affine_truth: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValidationError(f"pair shape mismatch: {self.x.shape} vs {self.y.shape}")
        if self.masks is not None and self.masks.shape != self.x.shape:
            raise ValidationError("mask shape does not match the pair")
        if self.reference is not None and self.reference.shape != self.x.shape:
            raise ValidationError("reference shape does not match the pair")

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape


@dataclass(frozen=True, eq=False)
class PairedDataset:
    pairs: tuple[TrainingPair, ...]
    mode: str = "Paired"

    def __post_init__(self):
        pairs = tuple(self.pairs)
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        shapes = {p.shape for p in pairs}
        if len(shapes) > 1:
            raise ValidationError(f"all pairs must share one shape, got {shapes}")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i: int) -> TrainingPair:
        return self.pairs[i]


# --------------------------------------------------------------------------
# Slice and mask I/O
# --------------------------------------------------------------------------

def save_slice(slice_: ImageSlice, path: str | Path, format: str = "rawf32") -> None:
    """Write one slice. png16 quantizes [-1, 1] onto [0, 65535]; rawf32 is
    bit-exact."""
    path = Path(path)
    if format == "png16":
        codes = np.round((slice_.pixels.astype(np.float64) + 1.0) / 2.0 * 65535.0)
        img = Image.fromarray(codes.astype(np.uint16), mode="I;16")
        img.save(path, format="PNG")
    elif format == "rawf32":
        h, w = slice_.shape
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sII", RAWF32_MAGIC, h, w))
            fh.write(slice_.pixels.astype("<f4").tobytes(order="C"))
    else:
        raise ValidationError(f"unknown slice format {format!r}")


def load_slice(path: str | Path, modality_tag: str = "", slice_index: int = 0) -> ImageSlice:
    """Read a slice from rawf32 or PNG. 8/16-bit integer inputs are mapped
    linearly from their full dynamic range onto [-1, 1]."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"no such file: {path}")
    if path.suffix == ".rf32":
        raw = path.read_bytes()
        if len(raw) < 12 or raw[:4] != RAWF32_MAGIC:
            raise LoadError(f"{path} is not a rawf32 file")
        h, w = struct.unpack("<II", raw[4:12])
        expected = 12 + 4 * h * w
        if len(raw) != expected:
            raise LoadError(f"{path}: expected {expected} bytes, got {len(raw)}")
        px = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w)
        return ImageSlice(px, modality_tag=modality_tag, slice_index=slice_index)
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:  # noqa: BLE001 - normalize PIL failures
        raise LoadError(f"cannot read image {path}: {exc}") from exc
    arr = np.asarray(img)
    if img.mode == "L":
        px = arr.astype(np.float64) / 255.0 * 2.0 - 1.0
    elif img.mode in ("I;16", "I"):
        px = arr.astype(np.float64) / 65535.0 * 2.0 - 1.0
    else:
        raise LoadError(f"{path}: unsupported PNG mode {img.mode!r} (need 8- or 16-bit gray)")
    return ImageSlice(px, modality_tag=modality_tag, slice_index=slice_index)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    img = Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L")
    img.save(Path(path), format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"no such file: {path}")
    img = Image.open(path)
    return np.asarray(img, dtype=np.uint8) > 127


# --------------------------------------------------------------------------
# Dataset manifests
# --------------------------------------------------------------------------

def save_dataset(dataset: PairedDataset, out_dir: str | Path, format: str = "rawf32") -> Path:
    """Write every slice plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "rf32" if format == "rawf32" else "png"
    records = []
    for i, pair in enumerate(dataset):
        rec: dict = {"x": f"x_{i:05d}.{ext}", "y": f"y_{i:05d}.{ext}"}
        save_slice(pair.x, out_dir / rec["x"], format)
        save_slice(pair.y, out_dir / rec["y"], format)
        rec["x_index"] = pair.x.slice_index
        rec["y_index"] = pair.y.slice_index
        if pair.masks is not None:
            rec["masks"] = {
                "aligned": f"m_{i:05d}_aligned.png",
                "registrable": f"m_{i:05d}_registrable.png",
                "unregistrable": f"m_{i:05d}_unregistrable.png",
            }
            save_mask(pair.masks.aligned, out_dir / rec["masks"]["aligned"])
            save_mask(pair.masks.registrable, out_dir / rec["masks"]["registrable"])
            save_mask(pair.masks.unregistrable, out_dir / rec["masks"]["unregistrable"])
        if pair.reference is not None:
            rec["reference"] = f"r_{i:05d}.{ext}"
            save_slice(pair.reference, out_dir / rec["reference"], format)
        if pair.affine_truth is not None:
            rec["affine"] = list(pair.affine_truth)
        records.append(rec)
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(records, indent=1))
    (out_dir / "meta.json").write_text(json.dumps({"mode": dataset.mode, "n": len(dataset)}))
    return manifest


def load_dataset(manifest_path: str | Path) -> PairedDataset:
    """Load a dataset from a manifest; raises LoadError for missing files and
    ValidationError for shape mismatches within a pair."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise LoadError(f"no such manifest: {manifest_path}")
    try:
        records = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise LoadError(f"manifest {manifest_path} must be a JSON array")
    base = manifest_path.parent
    mode = "Paired"
    meta_path = base / "meta.json"
    if meta_path.exists():
        mode = json.loads(meta_path.read_text()).get("mode", "Paired")
    pairs = []
    for rec in records:
        x = load_slice(base / rec["x"], slice_index=int(rec.get("x_index", 0)))
        y = load_slice(base / rec["y"], slice_index=int(rec.get("y_index", 0)))
        masks = None
        if "masks" in rec:
            masks = GroundTruthMasks(
                load_mask(base / rec["masks"]["aligned"]),
                load_mask(base / rec["masks"]["registrable"]),
                load_mask(base / rec["masks"]["unregistrable"]),
            )
        reference = load_slice(base / rec["reference"]) if "reference" in rec else None
        affine = tuple(rec["affine"]) if "affine" in rec else None
        pairs.append(TrainingPair(x, y, masks=masks, reference=reference, affine_truth=affine))
    return PairedDataset(tuple(pairs), mode=mode)
