"""Command-line interface.

Subcommands: synth-data, train-mdet, train-mreg, train-cycle, translate,
evaluate, ablate, error-hist, pipeline, report. The device defaults to the
MMTRANS_DEVICE environment variable (cpu otherwise); --seed is global.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import torch

from . import synth
from .config import RunConfig, default_device, profile
from .data import ImageSlice, load_dataset, load_slice, save_dataset, save_slice
from .detector import DetTrainConfig, detect, format_percent, mean_misalignment_error, train_detector
from .errors import MMTransError
from .evaluation import (ABLATION_VARIANTS, AblationCheckpoints, error_histogram,
                         evaluate_pairs, run_ablation)
from .networks import CoarseRegNet, FineRegNet, ResnetGenerator, detector_net
from .pipeline import load_checkpointed_nets, pipeline, report, run_paths
from .registration import RegTrainConfig, train_coarse, train_fine, write_log_csv
from .translation import CycleTrainConfig, LossWeights, train_cycle, translate


def _add_seed(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0)


def _load_detector(path: str, width_mult: float):
    net = detector_net(width_mult)
    net.load_state_dict(torch.load(path, weights_only=True))
    net.eval()
    return net


def _load_mreg(coarse_path: str | None, fine_path: str | None, image_size: int, width_mult: float):
    coarse = fine = None
    if coarse_path:
        coarse = CoarseRegNet(image_size, width_mult)
        coarse.load_state_dict(torch.load(coarse_path, weights_only=True))
        coarse.eval()
    if fine_path:
        fine = FineRegNet(width_mult)
        fine.load_state_dict(torch.load(fine_path, weights_only=True))
        fine.eval()
    return coarse, fine


def cmd_synth_data(args) -> int:
    subjects = [synth.make_phantom_volume(args.seed + 7919 * i, args.size, args.slices_per_subject)
                for i in range(args.n_subjects)]
    dataset = synth.build_training_set(
        [s.volume_a for s in subjects], [s.volume_b for s in subjects],
        mode=args.mode, slice_offset=args.offset, p=args.prob, seed=args.seed,
        structure_ids=[s.structure_ids for s in subjects],
        include_reference=args.mode == "Paired" and args.with_reference)
    manifest = save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} pairs to {manifest}")
    return 0


def cmd_train_mdet(args) -> int:
    cfg = {}
    if args.phantom_config:
        cfg = json.loads(Path(args.phantom_config).read_text())
    size = int(cfg.get("size", 64))
    n_images = int(cfg.get("n_images", 32))
    images = []
    for i in range(n_images):
        a, _, _ = synth.make_phantom_pair(args.seed + 31 * i, size)
        images.append(a)
    rows: list = []
    det_cfg = DetTrainConfig(width_mult=args.width_mult, seed=args.seed, device=args.device,
                             steps_per_epoch=len(images), log_rows=rows)
    stream = synth.mdet_sample_stream(images, args.epochs * len(images), seed=args.seed,
                                      elastic=synth.default_elastic_params(size))
    net = train_detector(stream, det_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), out)
    write_log_csv(rows, out.with_suffix(".csv"), ("epoch", "l1_loss"))
    print(f"wrote detector checkpoint to {out}")
    return 0


def cmd_train_mreg(args) -> int:
    dataset = load_dataset(args.dataset)
    image_size = dataset[0].shape[0]
    det = _load_detector(args.mdet_checkpoint, args.width_mult)
    rows: list = []
    reg_cfg = RegTrainConfig(epochs=args.epochs, lr=args.lr, width_mult=args.width_mult,
                             lambda_smooth=args.lambda_smooth, seed=args.seed,
                             device=args.device, log_rows=rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.fine_only:
        fine = train_fine(dataset, None, det, reg_cfg)
        torch.save(fine.state_dict(), out / "mreg_fine_only.pt")
    else:
        coarse = train_coarse(dataset, reg_cfg)
        torch.save(coarse.state_dict(), out / "mreg_coarse.pt")
        fine = train_fine(dataset, coarse, det, reg_cfg)
        torch.save(fine.state_dict(), out / "mreg_fine.pt")
    write_log_csv(rows, out / "mreg_log.csv", ("stage", "epoch", "loss", "smooth"))
    print(f"wrote registration checkpoints to {out} (image size {image_size})")
    return 0


def cmd_train_cycle(args) -> int:
    dataset = load_dataset(args.dataset)
    image_size = dataset[0].shape[0]
    mreg = _load_mreg(args.mreg_coarse, args.mreg_fine, image_size, args.width_mult)
    mdet = _load_detector(args.mdet_checkpoint, args.width_mult) if args.mdet_checkpoint else None
    rows: list = []
    cfg = CycleTrainConfig(epochs=args.epochs, width_mult=args.width_mult, adv=args.adv,
                           prior_form=args.prior_form, seed=args.seed, device=args.device,
                           log_rows=rows)
    weights = LossWeights(lambda_cyc=args.lambda_cyc, lambda_prior=args.lambda_prior)
    nets = train_cycle(dataset, mreg if any(mreg) else None, mdet, weights, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"G": nets.G.state_dict(), "F": nets.F.state_dict(),
                "D_X": nets.D_X.state_dict(), "D_Y": nets.D_Y.state_dict()}, out)
    write_log_csv(rows, out.with_suffix(".csv"), ("epoch", "adv_gen", "cycle", "prior", "disc"))
    print(f"wrote translation checkpoint to {out}")
    return 0


def cmd_translate(args) -> int:
    state = torch.load(args.checkpoint, weights_only=True)
    G = ResnetGenerator(1, 1, args.width_mult)
    G.load_state_dict(state["G"] if "G" in state else state)
    G.eval()
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = sorted(Path(args.input).glob("*.rf32")) + sorted(Path(args.input).glob("*.png"))
    for path in inputs:
        pred = translate(load_slice(path), G)
        save_slice(pred, out_dir / f"{path.stem}_translated.png", "png16")
        save_slice(pred, out_dir / f"{path.stem}_translated.rf32", "rawf32")
    print(f"translated {len(inputs)} slices into {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    preds = [load_slice(p) for p in sorted(Path(args.pred).glob("*.rf32"))]
    refs = [load_slice(p) for p in sorted(Path(args.ref).glob("*.rf32"))]
    rep = evaluate_pairs(preds, refs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("pair", "psnr_db", "ssim_pct"))
        for i, (p, s) in enumerate(rep.per_pair):
            writer.writerow((i, f"{p:.6f}", f"{s:.6f}"))
    print(rep.summary())
    return 0


def cmd_ablate(args) -> int:
    run_dir = Path(args.run_dir)
    config = RunConfig.load(run_paths(run_dir)["config"])
    nets = load_checkpointed_nets(run_dir, config)
    train = load_dataset(run_paths(run_dir)["train_manifest"])
    test = load_dataset(run_paths(run_dir)["test_manifest"])
    variant_ids = [v.strip() for v in args.variants.split(",") if v.strip()]
    variants = [ABLATION_VARIANTS[v] for v in variant_ids]
    fine_only = nets.get("fine_only")
    if any(v.uses_mreg == "fine_only" for v in variants) and fine_only is None:
        rows: list = []
        reg_cfg = RegTrainConfig(epochs=config.epochs_mreg, lr=config.lr,
                                 width_mult=config.width_mult, seed=config.seed + 21,
                                 device=config.device, log_rows=rows)
        fine_only = train_fine(train, None, nets["detector"], reg_cfg)
        torch.save(fine_only.state_dict(), run_paths(run_dir)["fine_only_ckpt"])
    ckpts = AblationCheckpoints(coarse=nets.get("coarse"), fine=nets.get("fine"),
                                fine_only=fine_only, detector=nets.get("detector"))
    cfg = CycleTrainConfig(epochs=config.epochs_cycle, width_mult=config.width_mult,
                           adv=config.adv, seed=config.seed + 30, device=config.device)
    weights = LossWeights(lambda_cyc=config.lambda_cyc, lambda_prior=config.lambda_prior,
                          lambda_smooth=config.lambda_smooth, th=config.th)
    reports = run_ablation(train, test, variants, ckpts, weights, cfg)
    out = run_dir / "metrics" / "ablation.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("variant", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"))
        for vid in variant_ids:
            rep = reports[vid]
            writer.writerow((vid, f"{rep.psnr_mean:.4f}", f"{rep.psnr_std:.4f}",
                             f"{rep.ssim_mean_pct:.4f}", f"{rep.ssim_std_pct:.4f}"))
            print(f"{vid}: {rep.summary()}")
    return 0


def cmd_error_hist(args) -> int:
    dataset = load_dataset(args.dataset)
    image_size = dataset[0].shape[0]
    det = _load_detector(args.mdet_checkpoint, args.width_mult)
    mreg = None
    if args.mreg_coarse or args.mreg_fine:
        mreg = _load_mreg(args.mreg_coarse, args.mreg_fine, image_size, args.width_mult)
    hist = error_histogram(dataset, det, mreg, bins=args.bins)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        has_after = hist["after_means"] is not None
        writer.writerow(("bin_lo", "bin_hi", "freq_before") + (("freq_after",) if has_after else ()))
        for i in range(len(hist["freq_before"])):
            row = [f"{hist['bin_edges'][i]:.6f}", f"{hist['bin_edges'][i + 1]:.6f}",
                   f"{hist['freq_before'][i]:.6f}"]
            if has_after:
                row.append(f"{hist['freq_after'][i]:.6f}")
            writer.writerow(row)
    _, mean, std = mean_misalignment_error(dataset, det)
    print(f"mean misalignment error: {mean:.2f}±{std:.2f} %")
    return 0


def cmd_detect(args) -> int:
    dataset = load_dataset(args.dataset)
    det = _load_detector(args.mdet_checkpoint, args.width_mult)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, pair in enumerate(dataset):
        err = detect(pair.x, pair.y, det)
        rows.append((i, format_percent(float(err.values.mean()))))
        save_slice(ImageSlice(err.values * 2.0 - 1.0), out_dir / f"errmap_{i:05d}.png", "png16")
    with open(out_dir / "errors.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("pair", "mean_error_pct"))
        writer.writerows(rows)
    print(f"wrote {len(rows)} error maps to {out_dir}")
    return 0


def cmd_pipeline(args) -> int:
    if args.config:
        config = RunConfig.load(args.config)
    else:
        config = profile(args.profile)
    if args.out:
        config.out_dir = args.out
    if args.seed is not None:
        config.seed = args.seed
    run_dir = pipeline(config)
    print(f"pipeline complete: {run_dir}")
    return 0


def cmd_report(args) -> int:
    out = report(args.run_dir)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmtrans",
                                     description="Misalignment-tolerant multi-modal image translation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="emit a phantom dataset directory")
    p.add_argument("--mode", choices=("Paired", "RA", "MS", "RA+MS"), default="RA+MS")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-subjects", type=int, default=2)
    p.add_argument("--slices-per-subject", type=int, default=12)
    p.add_argument("--offset", type=int, default=3)
    p.add_argument("--prob", type=float, default=0.5)
    p.add_argument("--with-reference", action="store_true")
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train-mdet", help="train the misalignment detector")
    p.add_argument("--phantom-config", default=None, help="JSON with size/n_images overrides")
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--width-mult", type=float, default=1.0)
    p.add_argument("--device", default=default_device())
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.set_defaults(fn=cmd_train_mdet)

    p = sub.add_parser("train-mreg", help="train coarse + fine registration")
    p.add_argument("--dataset", required=True, help="manifest path")
    p.add_argument("--mdet-checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda-smooth", type=float, default=1.0)
    p.add_argument("--width-mult", type=float, default=1.0)
    p.add_argument("--fine-only", action="store_true", help="train R_F directly on the raw pairs")
    p.add_argument("--device", default=default_device())
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_seed(p)
    p.set_defaults(fn=cmd_train_mreg)

    p = sub.add_parser("train-cycle", help="train the translation module")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mreg-coarse", default=None)
    p.add_argument("--mreg-fine", default=None)
    p.add_argument("--mdet-checkpoint", default=None)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lambda-cyc", type=float, default=10.0)
    p.add_argument("--lambda-prior", type=float, default=30.0)
    p.add_argument("--adv", choices=("log", "lsgan"), default="log")
    p.add_argument("--prior-form", choices=("none", "plain", "fine_only", "full_mreg",
                                            "mdet_only", "full"), default="full")
    p.add_argument("--width-mult", type=float, default=1.0)
    p.add_argument("--device", default=default_device())
    p.add_argument("--out", required=True, help="checkpoint file")
    _add_seed(p)
    p.set_defaults(fn=cmd_train_cycle)

    p = sub.add_parser("translate", help="run a trained generator over a directory")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--width-mult", type=float, default=1.0)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("evaluate", help="PSNR/SSIM of predictions vs references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", default="metrics.csv")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="run ablation variants inside a pipeline run dir")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--variants", default="V1,V2,V3,V4,V5,V6")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("error-hist", help="per-pair detector error distribution CSV")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mdet-checkpoint", required=True)
    p.add_argument("--mreg-coarse", default=None)
    p.add_argument("--mreg-fine", default=None)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--width-mult", type=float, default=1.0)
    p.add_argument("--out", default="error_hist.csv")
    p.set_defaults(fn=cmd_error_hist)

    p = sub.add_parser("detect", help="emit per-pair error CSVs and error-map PNGs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mdet-checkpoint", required=True)
    p.add_argument("--width-mult", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("pipeline", help="run synth -> mdet -> mreg -> cycle -> evaluate")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--config", default=None, help="JSON config file (overrides profile)")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("report", help="summarize a completed run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MMTransError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
