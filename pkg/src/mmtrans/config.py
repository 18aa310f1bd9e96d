"""Run configuration: one JSON document drives every pipeline stage."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError


def default_device() -> str:
    env = os.environ.get("MMTRANS_DEVICE")
    if env:
        return env
    return "cpu"


@dataclass
class RunConfig:
    seed: int = 0
    image_size: int = 32
    width_mult: float = 0.25
    epochs_mdet: int = 5
    epochs_mreg: int = 5
    epochs_cycle: int = 5
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    lambda_cyc: float = 10.0
    lambda_prior: float = 30.0
    lambda_smooth: float = 1.0
    th: float = 0.1
    mi_bins: int = 32
    adv: str = "log"
    dataset_mode: str = "RA+MS"
    n_subjects: int = 2
    slices_per_subject: int = 12
    n_test_subjects: int = 1
    slice_offset: int = 3
    mis_slice_prob: float = 0.5
    out_dir: str = "runs/desk"
    device: str = ""
    threads: int = 1  # single-threaded numerics keep reruns byte-identical

    def __post_init__(self):
        if not self.device:
            self.device = default_device()
        if self.batch_size != 1:
            raise ConfigurationError("only batch size 1 is supported")
        if self.image_size % 8 != 0 or self.image_size < 16:
            raise ConfigurationError("image_size must be >= 16 and divisible by 8")

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        raw = json.loads(text)
        names = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return RunConfig(**raw)

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"no such config file: {path}")
        return RunConfig.from_json(path.read_text())


PROFILES = {
    # quick CPU runs used throughout the test harness
    "desk": RunConfig(),
    # the reference full-scale setup (256x256, full widths, 80/80/60 epochs)
    "paper": RunConfig(image_size=256, width_mult=1.0, epochs_mdet=80, epochs_mreg=80,
                       epochs_cycle=60, n_subjects=240, slices_per_subject=50,
                       n_test_subjects=20, out_dir="runs/paper", threads=0),
}


def profile(name: str) -> RunConfig:
    if name not in PROFILES:
        raise ConfigurationError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return dataclasses.replace(PROFILES[name])
