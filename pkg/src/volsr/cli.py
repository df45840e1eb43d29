"""Command-line interface: degrade, train, infer, evaluate, slices, split.

Every command writes a JSON run manifest beside its outputs recording the
resolved configuration, seed, paths, and argv, so any run can be reproduced
by replaying the recorded argv (bit-exactly in single-threaded mode).

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Errors print to stderr as one machine-parseable line: "error[kind]: message".
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .losses import LOG_FIELDS, LossWeights, log_row
from .metrics import (
    EVAL_FIELDS,
    FEATURE_DISTANCE_NOTE,
    default_data_range,
    eval_row,
    evaluate_pair,
)
from .models import (
    DiscriminatorConfig,
    FeatureExtractor2D,
    GeneratorConfig,
    config_from_dict,
    config_to_dict,
    init_params,
)
from .nn import AdamConfig
from .pipeline import (
    NonFiniteLossError,
    PatchSpec,
    PipelineError,
    SlidingWindowSpec,
    TrainConfig,
    load_dataset,
    load_dataset_manifest,
    pad_to_multiple,
    save_dataset_manifest,
    sliding_window_infer,
    split_manifest,
    train,
)
from .spectral import kspace_degrade
from .volume import Axis, Volume, load_volume, normalize, resample_trilinear, save_volume


class _Parser(argparse.ArgumentParser):
    """Argparse with single-line machine-parseable usage errors."""

    def error(self, message):
        self.exit(2, f"error[usage]: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(
    path: Path,
    command: str,
    config: dict,
    seed,
    inputs,
    outputs,
    argv,
    started: str,
    notes: dict | None = None,
) -> None:
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "argv": list(argv),
        "version": __version__,
        "started": started,
        "finished": _now(),
        "notes": notes or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _resolve_threads(args) -> int | None:
    env = os.environ.get("VOLSR_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise PipelineError(f"VOLSR_THREADS must be an integer, got {env!r}")
    return args.threads


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="volsr",
        description="Volumetric GAN super-resolution: frequency-domain degradation, "
        "patch-based training, sliding-window inference, and evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"volsr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_threads(p):
        p.add_argument(
            "--threads",
            type=_positive_int,
            default=None,
            help="BLAS thread cap; 1 gives the bit-reproducible path "
            "(env VOLSR_THREADS overrides)",
        )

    p = sub.add_parser("degrade", help="frequency-domain downsample VBIN volumes")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="input VBIN file(s)")
    p.add_argument("--out", required=True, help="output file (single input) or directory")
    p.add_argument("--scale", type=_positive_int, default=4, help="per-axis factor (default 4)")
    add_threads(p)

    p = sub.add_parser("train", help="train the generator/discriminator pair")
    p.add_argument("--data", required=True, help="dataset manifest (JSON list of VBIN paths)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=_positive_int, required=True)
    p.add_argument("--batch-size", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda1", type=float, default=1.0, help="pixel weight")
    p.add_argument("--lambda2", type=float, default=1.0, help="perceptual weight")
    p.add_argument("--lambda3", type=float, default=0.01, help="adversarial weight")
    p.add_argument("--lr-gen", type=float, default=1e-4, help="generator Adam lr")
    p.add_argument("--lr-disc", type=float, default=1e-4, help="discriminator Adam lr")
    p.add_argument("--patch", type=_positive_int, default=96, help="HR patch size")
    p.add_argument("--scale", type=_positive_int, default=4)
    p.add_argument("--samples-per-volume", type=_positive_int, default=16)
    p.add_argument("--weighting", choices=("weighted", "uniform"), default="weighted")
    p.add_argument("--nf", type=_positive_int, default=16, help="generator base channels")
    p.add_argument("--gc", type=_positive_int, default=8, help="generator growth channels")
    p.add_argument("--blocks", type=_positive_int, default=4, help="RRDB block count")
    p.add_argument("--disc-base", type=_positive_int, default=16)
    p.add_argument("--disc-depth", type=_positive_int, default=3)
    p.add_argument("--checkpoint-every", type=_nonneg_int, default=0)
    p.add_argument("--perc-stride", type=_positive_int, default=1, help="perceptual slice stride")
    p.add_argument("--fx-seed", type=int, default=0, help="feature-extractor weight seed")
    p.add_argument("--no-figures", action="store_true", help="skip the loss-curve figure")
    add_threads(p)

    p = sub.add_parser("infer", help="super-resolve an LR volume with a checkpoint")
    p.add_argument("--in", dest="input", required=True, help="LR VBIN file")
    p.add_argument("--checkpoint", required=True, help="generator checkpoint")
    p.add_argument("--out", required=True, help="output SR VBIN path")
    p.add_argument("--window", type=_positive_int, default=96, help="HR-space window")
    p.add_argument("--overlap", type=float, default=0.25)
    p.add_argument("--blend", choices=("gaussian", "constant"), default="gaussian")
    p.add_argument(
        "--no-normalize",
        action="store_true",
        help="feed raw intensities instead of per-volume min-max normalizing "
        "and rescaling back",
    )
    add_threads(p)

    p = sub.add_parser("evaluate", help="SSIM/PSNR/feature-distance report")
    p.add_argument("--sr", nargs="+", required=True, help="candidate VBIN file(s)")
    p.add_argument("--hr", nargs="+", required=True, help="reference VBIN file(s)")
    p.add_argument("--lr", nargs="+", default=None, help="LR VBIN file(s) for the baseline")
    p.add_argument(
        "--baseline",
        action="store_true",
        help="also score a trilinear upsampling of each --lr volume",
    )
    p.add_argument("--out", required=True, help="output CSV path or directory")
    p.add_argument("--data-range", type=float, default=None, help="override per-pair range")
    p.add_argument("--fx-seed", type=int, default=0)
    p.add_argument("--no-feature-distance", action="store_true")
    p.add_argument("--no-figures", action="store_true", help="skip the metrics figure")
    add_threads(p)

    p = sub.add_parser("slices", help="export axial/coronal/sagittal slice PNGs")
    p.add_argument("--in", dest="input", required=True, help="VBIN file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--index", type=int, nargs=3, default=None, metavar=("Z", "Y", "X"),
        help="slice indices per axis (default: centers)",
    )
    p.add_argument(
        "--clip", type=float, nargs=2, default=None, metavar=("LO", "HI"),
        help="intensity clip range applied before the 8-bit mapping",
    )
    p.add_argument(
        "--zoom", type=int, nargs=4, default=None, metavar=("Z", "Y", "X", "EXTENT"),
        help="crop an EXTENT^3 region at corner (Z, Y, X) before slicing",
    )
    p.add_argument("--no-figures", action="store_true", help="skip the 3-view panel figure")
    add_threads(p)

    p = sub.add_parser("split", help="k-fold split of a dataset manifest")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--folds", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    add_threads(p)

    return parser


def _cmd_degrade(args, argv) -> None:
    started = _now()
    ins = [Path(p) for p in args.inputs]
    out = Path(args.out)
    dir_mode = len(ins) > 1 or out.is_dir()
    if dir_mode:
        out.mkdir(parents=True, exist_ok=True)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    outputs = []
    notes = {}
    for src in ins:
        v = load_volume(src)
        padded, orig_shape = pad_to_multiple(v, 2 * args.scale)
        if padded.data.shape != orig_shape:
            notes[src.name] = {
                "original_shape": list(orig_shape),
                "padded_shape": list(padded.data.shape),
            }
        lr = kspace_degrade(padded, args.scale)
        dst = out / src.name if dir_mode else out
        save_volume(lr, dst)
        outputs.append(dst)
        print(f"{src} -> {dst} {tuple(lr.data.shape)}")
    manifest_path = (out if dir_mode else out.parent) / (
        "manifest.json" if dir_mode else out.name + ".manifest.json"
    )
    _write_manifest(
        manifest_path,
        "degrade",
        {"scale": args.scale},
        None,
        ins,
        outputs,
        argv,
        started,
        notes={"padding": notes} if notes else None,
    )


def _train_hyper(cfg: TrainConfig, spec: PatchSpec) -> dict:
    return {
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "gen_opt": asdict(cfg.gen_opt),
        "disc_opt": asdict(cfg.disc_opt),
        "weights": asdict(cfg.weights),
        "patch": asdict(spec),
        "perc_slice_stride": cfg.perc_slice_stride,
        "fx_seed": cfg.fx_seed,
    }


def _cmd_train(args, argv) -> None:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(args.data)
    gen_cfg = GeneratorConfig(
        base_channels=args.nf,
        growth_channels=args.gc,
        num_rrdb_blocks=args.blocks,
        upscale=args.scale,
    )
    disc_cfg = DiscriminatorConfig(base_channels=args.disc_base, depth=args.disc_depth)
    spec = PatchSpec(
        hr_patch=args.patch,
        scale=args.scale,
        samples_per_volume=args.samples_per_volume,
        weighting=args.weighting,
    )
    cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        gen_config=gen_cfg,
        disc_config=disc_cfg,
        gen_opt=AdamConfig(lr=args.lr_gen),
        disc_opt=AdamConfig(lr=args.lr_disc),
        weights=LossWeights(args.lambda1, args.lambda2, args.lambda3),
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        perc_slice_stride=args.perc_stride,
        fx_seed=args.fx_seed,
    )
    from .nn import save_checkpoint

    hyper = _train_hyper(cfg, spec)
    outputs = []

    def checkpoint(step, g_params, d_params):
        if step == cfg.steps:
            g_name, d_name = "generator.ckpt", "discriminator.ckpt"
        else:
            g_name = f"generator_step{step:06d}.ckpt"
            d_name = f"discriminator_step{step:06d}.ckpt"
        save_checkpoint(out / g_name, g_params, hyper, cfg.seed, config_to_dict(gen_cfg))
        save_checkpoint(out / d_name, d_params, hyper, cfg.seed + 1, config_to_dict(disc_cfg))
        outputs.extend([out / g_name, out / d_name])

    _, _, log = train(dataset, cfg, spec, checkpoint_callback=checkpoint)

    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_FIELDS)
        for step, report in enumerate(log, start=1):
            writer.writerow(log_row(step, report))
    outputs.append(log_path)

    if not args.no_figures:
        from .viz import save_loss_curves

        rows = [dict(zip(LOG_FIELDS, log_row(step, r))) for step, r in enumerate(log, start=1)]
        outputs.append(save_loss_curves(rows, out / "loss_curves.png"))

    _write_manifest(
        out / "manifest.json",
        "train",
        {
            "train": hyper,
            "generator": config_to_dict(gen_cfg),
            "discriminator": config_to_dict(disc_cfg),
        },
        cfg.seed,
        [args.data],
        outputs,
        argv,
        started,
    )
    final = log[-1]
    print(
        f"trained {cfg.steps} steps: pixel {final.pixel:.5f}, "
        f"perc {final.perceptual:.5f}, disc {final.discriminator:.5f}; outputs in {out}"
    )


def _load_generator_checkpoint(path):
    from .nn import load_param_store

    store, manifest = load_param_store(path)
    cfg = config_from_dict(manifest.get("config", {}))
    if not isinstance(cfg, GeneratorConfig):
        raise PipelineError(f"{path}: checkpoint does not hold a generator config")
    expected = init_params(cfg, 0)
    if expected.names() != store.names():
        raise PipelineError(f"{path}: parameter names do not match the embedded config")
    for name, tensor in expected.items():
        if tensor.shape != store[name].shape:
            raise PipelineError(
                f"{path}: parameter {name!r} shape {store[name].shape} does not "
                f"match the embedded config {tensor.shape}"
            )
    return store, cfg


def _cmd_infer(args, argv) -> None:
    started = _now()
    store, gen_cfg = _load_generator_checkpoint(args.checkpoint)
    lr = load_volume(args.input)
    spec = SlidingWindowSpec(window=args.window, overlap=args.overlap, blend=args.blend)
    work = lr
    lo = hi = None
    if not args.no_normalize:
        lo, hi = float(lr.data.min()), float(lr.data.max())
        work = normalize(lr)
    sr = sliding_window_infer(work, store, gen_cfg, spec)
    if lo is not None and hi > lo:
        sr = Volume(sr.data.astype(np.float64) * (hi - lo) + lo, sr.spacing, lr.intensity_meta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(sr, out)
    _write_manifest(
        out.parent / (out.name + ".manifest.json"),
        "infer",
        {
            "window": spec.window,
            "overlap": spec.overlap,
            "blend": spec.blend,
            "normalize": not args.no_normalize,
            "generator": config_to_dict(gen_cfg),
        },
        None,
        [args.input, args.checkpoint],
        [out],
        argv,
        started,
    )
    print(f"{args.input} -> {out} {tuple(sr.data.shape)}")


def _cmd_evaluate(args, argv) -> None:
    started = _now()
    if len(args.sr) != len(args.hr):
        raise PipelineError(
            f"--sr and --hr must pair up, got {len(args.sr)} vs {len(args.hr)}"
        )
    if args.baseline:
        if not args.lr or len(args.lr) != len(args.hr):
            raise PipelineError("--baseline needs --lr files pairing up with --hr")
    out = Path(args.out)
    if out.is_dir() or not out.suffix:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "evaluation.csv"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        csv_path = out
    fx = None
    if not args.no_feature_distance:
        fx = FeatureExtractor2D.create(seed=args.fx_seed)
        print(f"note: {FEATURE_DISTANCE_NOTE}")
    rows = []
    for i, (sr_path, hr_path) in enumerate(zip(args.sr, args.hr)):
        hr = load_volume(hr_path)
        sr = load_volume(sr_path)
        data_range = args.data_range if args.data_range else default_data_range(hr)
        volume_id = Path(hr_path).stem
        rows.append(
            eval_row(volume_id, "model", evaluate_pair(sr, hr, data_range, fx))
        )
        if args.baseline:
            lr = load_volume(args.lr[i])
            factors = tuple(h / l for h, l in zip(hr.data.shape, lr.data.shape))
            tri = resample_trilinear(lr, factors)
            rows.append(
                eval_row(volume_id, "trilinear", evaluate_pair(tri, hr, data_range, fx))
            )
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(EVAL_FIELDS)
        writer.writerows(rows)
    outputs = [csv_path]
    if not args.no_figures:
        from .viz import save_metrics_figure

        dict_rows = [dict(zip(EVAL_FIELDS, r)) for r in rows]
        outputs.append(save_metrics_figure(dict_rows, csv_path.with_suffix(".png")))
    _write_manifest(
        csv_path.parent / (csv_path.name + ".manifest.json"),
        "evaluate",
        {
            "baseline": args.baseline,
            "data_range": args.data_range,
            "feature_distance": not args.no_feature_distance,
            "fx_seed": args.fx_seed,
        },
        args.fx_seed,
        list(args.sr) + list(args.hr) + list(args.lr or []),
        outputs,
        argv,
        started,
    )
    print(f"wrote {csv_path} ({len(rows)} rows)")


def _cmd_slices(args, argv) -> None:
    started = _now()
    v = load_volume(args.input)
    if args.zoom is not None:
        z, y, x, extent = args.zoom
        if extent < 1:
            raise PipelineError(f"zoom extent must be >= 1, got {extent}")
        shape = v.data.shape
        if not (0 <= z < shape[0] and 0 <= y < shape[1] and 0 <= x < shape[2]):
            raise PipelineError(f"zoom corner {(z, y, x)} outside volume {shape}")
        data = v.data[z : z + extent, y : y + extent, x : x + extent]
        v = Volume(data, v.spacing, v.intensity_meta)
    indices = args.index
    if indices is None:
        indices = tuple(n // 2 for n in v.data.shape)
    clip = tuple(args.clip) if args.clip is not None else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .viz import save_slice_panel, save_slice_png
    from .volume import slice_image

    outputs = []
    for axis, idx in zip((Axis.AXIAL, Axis.CORONAL, Axis.SAGITTAL), indices):
        name = axis.name.lower()
        img = slice_image(v, axis, idx)
        outputs.append(save_slice_png(img, out / f"{name}.png", clip))
    if not args.no_figures:
        outputs.append(save_slice_panel(v, out / "panel.png", tuple(indices), clip))
    _write_manifest(
        out / "manifest.json",
        "slices",
        {"index": list(indices), "clip": list(clip) if clip else None, "zoom": args.zoom},
        None,
        [args.input],
        outputs,
        argv,
        started,
    )
    for p in outputs:
        print(p)


def _cmd_split(args, argv) -> None:
    started = _now()
    entries = load_dataset_manifest(args.data)
    folds = split_manifest(entries, args.folds, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, (train_entries, val_entries) in enumerate(folds):
        train_path = out / f"fold{i}_train.json"
        val_path = out / f"fold{i}_val.json"
        save_dataset_manifest(train_entries, train_path)
        save_dataset_manifest(val_entries, val_path)
        outputs.extend([train_path, val_path])
    _write_manifest(
        out / "manifest.json",
        "split",
        {"folds": args.folds},
        args.seed,
        [args.data],
        outputs,
        argv,
        started,
    )
    print(f"wrote {len(outputs)} fold manifests to {out}")


_HANDLERS = {
    "degrade": _cmd_degrade,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
    "slices": _cmd_slices,
    "split": _cmd_split,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = _resolve_threads(args)
        limiter = threadpool_limits(limits=threads) if threads is not None else None
        try:
            _HANDLERS[args.command](args, argv)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
        return 0
    except NonFiniteLossError as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError, KeyError) as exc:
        # KeyError's str() wraps the message in quotes; unwrap it.
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"error[data]: {message}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
