"""End-to-end seeded pipeline: synth -> detector -> registration -> cycle
-> evaluate, with resume semantics and an artifact-hash manifest.

Each stage is skipped when its final artifact already exists, so rerunning
a completed directory retrains nothing. With fixed seeds and
single-threaded numerics two runs emit byte-identical metrics CSVs.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from . import synth
from .config import RunConfig
from .data import PairedDataset, load_dataset, load_slice, save_dataset, save_slice
from .detector import DetTrainConfig, train_detector
from .errors import ConfigurationError
from .evaluation import error_histogram, evaluate_pairs, per_pair_errors
from .networks import CoarseRegNet, FineRegNet, detector_net
from .registration import RegTrainConfig, train_coarse, train_fine, write_log_csv
from .translation import CycleNets, CycleTrainConfig, LossWeights, train_cycle, translate

STAGES = ("data", "mdet", "mreg", "cycle", "evaluate")


def _seed_all(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _float(v: float) -> str:
    return f"{v:.6f}"


def run_paths(run_dir: Path) -> dict[str, Path]:
    return {
        "config": run_dir / "config.json",
        "train_manifest": run_dir / "data" / "train" / "manifest.json",
        "test_manifest": run_dir / "data" / "test" / "manifest.json",
        "mdet_images": run_dir / "data" / "mdet_images.json",
        "mdet_ckpt": run_dir / "checkpoints" / "mdet.pt",
        "coarse_ckpt": run_dir / "checkpoints" / "mreg_coarse.pt",
        "fine_ckpt": run_dir / "checkpoints" / "mreg_fine.pt",
        "fine_only_ckpt": run_dir / "checkpoints" / "mreg_fine_only.pt",
        "cycle_ckpt": run_dir / "checkpoints" / "cycle.pt",
        "mdet_log": run_dir / "logs" / "mdet_log.csv",
        "mreg_log": run_dir / "logs" / "mreg_log.csv",
        "cycle_log": run_dir / "logs" / "cycle_log.csv",
        "metrics": run_dir / "metrics" / "test_metrics.csv",
        "summary": run_dir / "metrics" / "summary.json",
        "error_hist": run_dir / "metrics" / "error_hist.csv",
        "manifest": run_dir / "manifest.json",
    }


def load_checkpointed_nets(run_dir: Path, config: RunConfig):
    """Reload the frozen modules of a completed (or partial) run."""
    paths = run_paths(run_dir)
    out = {}
    if paths["mdet_ckpt"].exists():
        net = detector_net(config.width_mult)
        net.load_state_dict(torch.load(paths["mdet_ckpt"], weights_only=True))
        net.eval()
        out["detector"] = net
    if paths["coarse_ckpt"].exists():
        net = CoarseRegNet(config.image_size, config.width_mult)
        net.load_state_dict(torch.load(paths["coarse_ckpt"], weights_only=True))
        net.eval()
        out["coarse"] = net
    for key, name in (("fine", "fine_ckpt"), ("fine_only", "fine_only_ckpt")):
        if paths[name].exists():
            net = FineRegNet(config.width_mult)
            net.load_state_dict(torch.load(paths[name], weights_only=True))
            net.eval()
            out[key] = net
    if paths["cycle_ckpt"].exists():
        from .networks import PatchDiscriminator, ResnetGenerator
        state = torch.load(paths["cycle_ckpt"], weights_only=True)
        nets = CycleNets(
            G=ResnetGenerator(1, 1, config.width_mult),
            F=ResnetGenerator(1, 1, config.width_mult),
            D_X=PatchDiscriminator(1, config.width_mult),
            D_Y=PatchDiscriminator(1, config.width_mult),
        )
        for name, net in (("G", nets.G), ("F", nets.F), ("D_X", nets.D_X), ("D_Y", nets.D_Y)):
            net.load_state_dict(state[name])
            net.eval()
        out["cycle"] = nets
    return out


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def stage_data(run_dir: Path, config: RunConfig) -> None:
    paths = run_paths(run_dir)
    if paths["train_manifest"].exists() and paths["test_manifest"].exists():
        return
    rng = _seed_all(config.seed)
    subjects = [synth.make_phantom_volume(int(rng.integers(2 ** 31)), config.image_size,
                                          config.slices_per_subject)
                for _ in range(config.n_subjects + config.n_test_subjects)]
    train_subj = subjects[: config.n_subjects]
    test_subj = subjects[config.n_subjects:]
    train = synth.build_training_set(
        [s.volume_a for s in train_subj], [s.volume_b for s in train_subj],
        mode=config.dataset_mode, slice_offset=config.slice_offset,
        p=config.mis_slice_prob, seed=config.seed,
        structure_ids=[s.structure_ids for s in train_subj])
    test = synth.build_training_set(
        [s.volume_a for s in test_subj], [s.volume_b for s in test_subj],
        mode="Paired", seed=config.seed + 1,
        structure_ids=[s.structure_ids for s in test_subj], include_reference=True)
    save_dataset(train, paths["train_manifest"].parent)
    save_dataset(test, paths["test_manifest"].parent)
    # clean source-modality slices feed the detector's corruption stream
    mdet_dir = run_dir / "data" / "mdet"
    mdet_dir.mkdir(parents=True, exist_ok=True)
    rel_paths = []
    i = 0
    for subj in train_subj:
        for sl in subj.volume_a.slices:
            rel = f"mdet/clean_{i:05d}.rf32"
            save_slice(sl, run_dir / "data" / rel, "rawf32")
            rel_paths.append(rel)
            i += 1
    paths["mdet_images"].write_text(json.dumps(rel_paths))


def stage_mdet(run_dir: Path, config: RunConfig) -> None:
    paths = run_paths(run_dir)
    if paths["mdet_ckpt"].exists():
        return
    _seed_all(config.seed + 10)
    rel_paths = json.loads(paths["mdet_images"].read_text())
    images = [load_slice(run_dir / "data" / rel) for rel in rel_paths]
    steps = config.epochs_mdet * len(images)
    rows: list = []
    det_cfg = DetTrainConfig(lr=config.lr, betas=config.betas, width_mult=config.width_mult,
                             seed=config.seed + 10, device=config.device,
                             steps_per_epoch=len(images), log_rows=rows)
    stream = synth.mdet_sample_stream(images, steps, seed=config.seed + 10,
                                      elastic=synth.default_elastic_params(config.image_size))
    net = train_detector(stream, det_cfg)
    paths["mdet_ckpt"].parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), paths["mdet_ckpt"])
    write_log_csv(rows, paths["mdet_log"], ("epoch", "l1_loss"))


def stage_mreg(run_dir: Path, config: RunConfig) -> None:
    paths = run_paths(run_dir)
    if paths["coarse_ckpt"].exists() and paths["fine_ckpt"].exists():
        return
    _seed_all(config.seed + 20)
    train = load_dataset(paths["train_manifest"])
    nets = load_checkpointed_nets(run_dir, config)
    if "detector" not in nets:
        raise ConfigurationError("mreg stage needs the detector checkpoint; run the mdet stage first")
    rows: list = []
    reg_cfg = RegTrainConfig(epochs=config.epochs_mreg, lr=config.lr, betas=config.betas,
                             width_mult=config.width_mult, mi_bins=config.mi_bins,
                             lambda_smooth=config.lambda_smooth, seed=config.seed + 20,
                             device=config.device, log_rows=rows)
    coarse = train_coarse(train, reg_cfg)
    fine = train_fine(train, coarse, nets["detector"], reg_cfg)
    paths["coarse_ckpt"].parent.mkdir(parents=True, exist_ok=True)
    torch.save(coarse.state_dict(), paths["coarse_ckpt"])
    torch.save(fine.state_dict(), paths["fine_ckpt"])
    write_log_csv(rows, paths["mreg_log"], ("stage", "epoch", "loss", "smooth"))


def stage_cycle(run_dir: Path, config: RunConfig) -> None:
    paths = run_paths(run_dir)
    if paths["cycle_ckpt"].exists():
        return
    _seed_all(config.seed + 30)
    train = load_dataset(paths["train_manifest"])
    nets = load_checkpointed_nets(run_dir, config)
    for need in ("detector", "coarse", "fine"):
        if need not in nets:
            raise ConfigurationError(f"cycle stage needs the {need} checkpoint")
    rows: list = []
    cyc_cfg = CycleTrainConfig(epochs=config.epochs_cycle, lr=config.lr, betas=config.betas,
                               width_mult=config.width_mult, adv=config.adv, prior_form="full",
                               seed=config.seed + 30, device=config.device, log_rows=rows)
    weights = LossWeights(lambda_cyc=config.lambda_cyc, lambda_prior=config.lambda_prior,
                          lambda_smooth=config.lambda_smooth, th=config.th)
    out = train_cycle(train, (nets["coarse"], nets["fine"]), nets["detector"], weights, cyc_cfg)
    paths["cycle_ckpt"].parent.mkdir(parents=True, exist_ok=True)
    torch.save({"G": out.G.state_dict(), "F": out.F.state_dict(),
                "D_X": out.D_X.state_dict(), "D_Y": out.D_Y.state_dict()},
               paths["cycle_ckpt"])
    write_log_csv(rows, paths["cycle_log"], ("epoch", "adv_gen", "cycle", "prior", "disc"))


def stage_evaluate(run_dir: Path, config: RunConfig) -> None:
    paths = run_paths(run_dir)
    if paths["metrics"].exists():
        return
    _seed_all(config.seed + 40)
    test = load_dataset(paths["test_manifest"])
    train = load_dataset(paths["train_manifest"])
    nets = load_checkpointed_nets(run_dir, config)
    preds = [translate(pair.x, nets["cycle"].G) for pair in test]
    refs = [pair.reference if pair.reference is not None else pair.y for pair in test]
    report = evaluate_pairs(preds, refs)
    paths["metrics"].parent.mkdir(parents=True, exist_ok=True)
    with open(paths["metrics"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("pair", "psnr_db", "ssim_pct"))
        for i, (p, s) in enumerate(report.per_pair):
            writer.writerow((i, _float(p), _float(s)))
    paths["summary"].write_text(json.dumps({
        "n": report.n,
        "psnr_db": {"mean": _float(report.psnr_mean), "std": _float(report.psnr_std)},
        "ssim_pct": {"mean": _float(report.ssim_mean_pct), "std": _float(report.ssim_std_pct)},
    }, indent=1))
    hist = error_histogram(train, nets["detector"], (nets["coarse"], nets["fine"]))
    with open(paths["error_hist"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("bin_lo", "bin_hi", "freq_before", "freq_after"))
        for i in range(len(hist["freq_before"])):
            writer.writerow((_float(hist["bin_edges"][i]), _float(hist["bin_edges"][i + 1]),
                             _float(hist["freq_before"][i]), _float(hist["freq_after"][i])))


def write_artifact_manifest(run_dir: Path) -> Path:
    manifest_path = run_paths(run_dir)["manifest"]
    entries = {}
    for path in sorted(run_dir.rglob("*")):
        if path.is_file() and path != manifest_path:
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            entries[str(path.relative_to(run_dir))] = digest
    manifest_path.write_text(json.dumps(entries, indent=1, sort_keys=True))
    return manifest_path


def pipeline(config: RunConfig) -> Path:
    """Execute all stages in order, skipping any whose artifacts exist."""
    run_dir = Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    paths = run_paths(run_dir)
    paths["config"].write_text(config.to_json())
    if config.threads > 0:
        torch.set_num_threads(config.threads)
    stage_fns = {"data": stage_data, "mdet": stage_mdet, "mreg": stage_mreg,
                 "cycle": stage_cycle, "evaluate": stage_evaluate}
    for stage in STAGES:
        try:
            stage_fns[stage](run_dir, config)
        except Exception as exc:
            raise ConfigurationError(f"pipeline stage '{stage}' failed: {exc}") from exc
    write_artifact_manifest(run_dir)
    return run_dir


# --------------------------------------------------------------------------
# Reporting
# --------------------------------------------------------------------------

def report(run_dir: str | Path) -> Path:
    """Markdown summary plus PNG plots; incomplete runs produce a partial
    report with warnings."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    paths = run_paths(run_dir)
    warnings: list[str] = []
    lines = ["# Run report", ""]
    if paths["config"].exists():
        config = RunConfig.from_json(paths["config"].read_text())
        lines += ["## Config", "", "```json", config.to_json(), "```", ""]
    else:
        raise ConfigurationError(f"{run_dir} does not contain a run (no config.json)")

    if paths["summary"].exists():
        summary = json.loads(paths["summary"].read_text())
        lines += ["## Test metrics", "",
                  f"- PSNR: {summary['psnr_db']['mean']} +- {summary['psnr_db']['std']} dB",
                  f"- SSIM: {summary['ssim_pct']['mean']} +- {summary['ssim_pct']['std']} %",
                  f"- pairs: {summary['n']}", ""]
    else:
        warnings.append("no metrics summary (evaluate stage incomplete)")

    ablation_path = run_dir / "metrics" / "ablation.csv"
    if ablation_path.exists():
        lines += ["## Ablation", ""]
        lines += ["| variant | PSNR (dB) | SSIM (%) |", "|---|---|---|"]
        with open(ablation_path) as fh:
            for row in list(csv.DictReader(fh)):
                lines.append(f"| {row['variant']} | {row['psnr_mean']}+-{row['psnr_std']} "
                             f"| {row['ssim_mean']}+-{row['ssim_std']} |")
        lines.append("")

    for log_name, title in (("mdet_log", "detector loss"), ("cycle_log", "cycle losses")):
        path = paths[log_name]
        if not path.exists():
            warnings.append(f"missing log {path.name}")
            continue
        with open(path) as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not body:
            continue
        fig, ax = plt.subplots(figsize=(5, 3))
        for col in range(1, len(header)):
            ax.plot([float(r[0]) for r in body], [float(r[col]) for r in body], label=header[col])
        ax.set_xlabel("epoch")
        ax.set_title(title)
        ax.legend(fontsize=7)
        fig.tight_layout()
        out_png = run_dir / f"plot_{log_name}.png"
        fig.savefig(out_png, dpi=110)
        plt.close(fig)
        lines += [f"![{title}]({out_png.name})", ""]

    if paths["error_hist"].exists():
        with open(paths["error_hist"]) as fh:
            rows = list(csv.DictReader(fh))
        centers = [(float(r["bin_lo"]) + float(r["bin_hi"])) / 2 for r in rows]
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(centers, [float(r["freq_before"]) for r in rows], "r-o", ms=3, label="before registration")
        ax.plot(centers, [float(r["freq_after"]) for r in rows], "b-o", ms=3, label="after registration")
        ax.set_xlabel("mean detected error per pair")
        ax.set_ylabel("frequency")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(run_dir / "plot_error_hist.png", dpi=110)
        plt.close(fig)
        lines += ["![error distributions](plot_error_hist.png)", ""]
    else:
        warnings.append("missing error histogram")

    nets = load_checkpointed_nets(run_dir, config)
    if "cycle" in nets and paths["test_manifest"].exists():
        test = load_dataset(paths["test_manifest"])
        k = min(4, len(test))
        fig, axes = plt.subplots(k, 4, figsize=(8, 2 * k), squeeze=False)
        for i in range(k):
            pair = test[i]
            pred = translate(pair.x, nets["cycle"].G)
            ref = pair.reference if pair.reference is not None else pair.y
            residual = np.abs(pred.pixels - ref.pixels)
            panels = [(pair.x.pixels, "input"), (pred.pixels, "translated"),
                      (ref.pixels, "reference"), (residual, "|residual|")]
            for j, (img, title) in enumerate(panels):
                vmin, vmax = (-1, 1) if j < 3 else (0, float(residual.max()) or 1)
                axes[i][j].imshow(img, cmap="gray", vmin=vmin, vmax=vmax)
                axes[i][j].set_axis_off()
                if i == 0:
                    axes[i][j].set_title(title, fontsize=8)
        fig.tight_layout()
        fig.savefig(run_dir / "plot_samples.png", dpi=110)
        plt.close(fig)
        lines += ["![samples](plot_samples.png)", ""]
    else:
        warnings.append("no translation checkpoint; sample grid skipped")

    if warnings:
        lines += ["## Warnings", ""] + [f"- {w}" for w in warnings] + [""]
    out = run_dir / "report.md"
    out.write_text("\n".join(lines))
    return out
