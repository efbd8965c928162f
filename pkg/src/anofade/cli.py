"""Command-line interface.

Subcommands: train, infer, eval, synth-preview, sweep, verify-process.
Argument errors exit with status 2 (argparse convention); operational
failures print the error and exit 1; success exits 0.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import data as dataio
from .config import read_config, train_config_from_mapping
from .diffusion import SCHEDULE_SHAPES, forward_sample, make_schedule, reverse_step
from .evaluation import DEFAULT_FPR_LIMIT, auroc, aupro, sweep_fusion, sweep_inference
from .inference import (
    DEFAULT_FUSE_WEIGHT,
    DEFAULT_KERNEL_SIZE,
    DEFAULT_MASK_THRESHOLD,
    run_reverse,
    score_image,
)
from .model import load_denoiser
from .synthesis import TexturePool, make_texture_dataset, make_training_batch
from .training import train

SINGLE_STEP_TOL = 1e-6
TELESCOPE_TOL = 1e-5


def _add_train(sub):
    p = sub.add_parser("train", help="train a denoiser on normal images")
    p.add_argument("--config", help="key-value config file")
    p.add_argument("--out-dir", required=True, help="checkpoints and logs go here")
    src = p.add_argument_group("data source")
    src.add_argument("--data-root", help="dataset root directory")
    src.add_argument("--category", help="dataset category name")
    src.add_argument("--toy", type=int, metavar="N",
                     help="train on N generated texture images instead of a dataset")
    for flag, typ in (("--epochs", int), ("--batch-size", int), ("--lr", float),
                      ("--lr-drop-epoch", int), ("--steps", int), ("--seed", int),
                      ("--image-size", int), ("--base-width", int),
                      ("--num-threads", int), ("--checkpoint-every", int)):
        p.add_argument(flag, type=typ)
    p.add_argument("--schedule", choices=SCHEDULE_SHAPES, dest="schedule_shape")
    p.add_argument("--texture-dir")
    return p


def _cmd_train(args) -> int:
    mapping = read_config(args.config) if args.config else {}
    overrides = {
        key: getattr(args, key)
        for key in ("epochs", "batch_size", "lr", "lr_drop_epoch", "steps", "seed",
                    "image_size", "base_width", "num_threads", "checkpoint_every",
                    "schedule_shape", "texture_dir")
    }
    overrides["out_dir"] = args.out_dir
    config = train_config_from_mapping(mapping, overrides)

    if args.toy:
        images = list(make_texture_dataset(args.toy, config.image_size, config.seed))
    elif args.data_root and args.category:
        layout = dataio.load_dataset(args.data_root, args.category)
        resize = dataio.default_resize_for(config.image_size)
        images = [
            dataio.preprocess(dataio.load_image(p), resize_to=resize,
                              crop_to=config.image_size)
            for p in layout.train_images
        ]
    else:
        raise ValueError("provide --data-root with --category, or --toy N")

    result = train(images, config)
    print(f"trained {config.epochs} epochs on {len(images)} images")
    print(f"final total loss: {result.history[-1]['loss_total']:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _add_infer(sub):
    p = sub.add_parser("infer", help="run anomaly removal over a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lambda", dest="fuse_weight", type=float, default=DEFAULT_FUSE_WEIGHT,
                   help="blend weight between mask-mean and reconstruction evidence")
    p.add_argument("--kernel", type=int, default=DEFAULT_KERNEL_SIZE)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--schedule", choices=SCHEDULE_SHAPES, default="linear")
    p.add_argument("--tau", type=float, default=DEFAULT_MASK_THRESHOLD,
                   help="mask binarization threshold fed to the next step")
    p.add_argument("--mask-source", choices=("blend", "disc", "recon", "last"),
                   default="blend")
    p.add_argument("--image-size", type=int)
    p.add_argument("--resize-size", type=int)
    p.add_argument("--save-trace", action="store_true",
                   help="dump per-step images and masks as PNG")
    return p


def _infer_sizes(args, payload):
    stored = (payload.get("extra") or {}).get("train_config") or {}
    image_size = args.image_size or stored.get("image_size") or dataio.DEFAULT_CROP
    resize_size = args.resize_size or dataio.default_resize_for(image_size)
    return image_size, resize_size


def _cmd_infer(args) -> int:
    model, payload = load_denoiser(args.checkpoint)
    image_size, resize_size = _infer_sizes(args, payload)
    schedule = make_schedule(args.schedule, args.steps)
    input_dir, out_dir = Path(args.input_dir), Path(args.out_dir)
    paths = [p for p in sorted(input_dir.iterdir())
             if p.suffix.lower() in dataio.IMAGE_EXTENSIONS]
    if not paths:
        raise ValueError(f"no images found in {input_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for path in paths:
        image = dataio.preprocess(dataio.load_image(path), resize_to=resize_size,
                                  crop_to=image_size)
        trace = score_image(model, image, schedule,
                            fuse_weight=args.fuse_weight, kernel_size=args.kernel,
                            mask_source=args.mask_source, mask_threshold=args.tau)
        dataio.save_mask16(out_dir / f"{path.stem}_mask.png", trace.mask_final)
        rows.append((path.name, trace.score))
        if args.save_trace:
            trace_dir = out_dir / "trace" / path.stem
            for i, (img, msk) in enumerate(zip(trace.images, trace.masks)):
                t = schedule.steps - i
                dataio.save_image(trace_dir / f"step{t:03d}_image.png", img)
                dataio.save_mask16(trace_dir / f"step{t:03d}_mask.png", msk)

    with open(out_dir / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "score"])
        writer.writerows(rows)
    print(f"scored {len(rows)} images -> {out_dir / 'scores.csv'}")
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="AUROC/AUPRO from predicted masks and ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--fpr-limit", type=float, default=DEFAULT_FPR_LIMIT)
    return p


def _cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    pred_paths = sorted(pred_dir.glob("*_mask.png")) or sorted(pred_dir.glob("*.png"))
    if not pred_paths:
        raise ValueError(f"no predicted masks in {pred_dir}")

    csv_scores = {}
    scores_csv = pred_dir / "scores.csv"
    if scores_csv.exists():
        with open(scores_csv, newline="") as fh:
            for row in csv.DictReader(fh):
                csv_scores[Path(row["image"]).stem] = float(row["score"])

    names, scores, labels, pred_maps, gt_maps = [], [], [], [], []
    for path in pred_paths:
        stem = path.stem.removesuffix("_mask")
        pred = dataio.load_mask16(path)
        gt_path = None
        for name in (f"{stem}_mask", stem):
            for ext in dataio.IMAGE_EXTENSIONS:
                candidate = gt_dir / f"{name}{ext}"
                if candidate.exists():
                    gt_path = candidate
                    break
            if gt_path:
                break
        gt = dataio.load_mask(gt_path) if gt_path else np.zeros_like(pred)
        names.append(stem)
        scores.append(csv_scores.get(stem, float(pred.max())))
        labels.append(int(gt.any()))
        pred_maps.append(pred)
        gt_maps.append(gt)

    report = {"auroc": auroc(scores, labels)}
    if any(labels):
        report["aupro"] = aupro(pred_maps, gt_maps, args.fpr_limit)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "score", "label"])
        for name, score, label in zip(names, scores, labels):
            writer.writerow([name, score, label])
        writer.writerow(["AUROC", report["auroc"], ""])
        if "aupro" in report:
            writer.writerow(["AUPRO", report["aupro"], ""])
    line = f"AUROC {report['auroc']:.4f}"
    if "aupro" in report:
        line += f"  AUPRO {report['aupro']:.4f}"
    print(line)
    return 0


def _add_synth_preview(sub):
    p = sub.add_parser("synth-preview",
                       help="write synthetic anomaly samples for visual audit")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--schedule", choices=SCHEDULE_SHAPES, default="linear")
    p.add_argument("--data-root")
    p.add_argument("--category")
    p.add_argument("--texture-dir")
    return p


def _cmd_synth_preview(args) -> int:
    if args.data_root and args.category:
        layout = dataio.load_dataset(args.data_root, args.category)
        normals = [
            dataio.preprocess(dataio.load_image(p),
                              resize_to=dataio.default_resize_for(args.size),
                              crop_to=args.size)
            for p in layout.train_images
        ]
    else:
        normals = list(make_texture_dataset(max(args.count, 4), args.size, args.seed))
    # the first half of a batch is anomalous: feed twice the wanted count
    pool_normals = [normals[i % len(normals)] for i in range(2 * args.count)]
    schedule = make_schedule(args.schedule, args.steps)
    batch = make_training_batch(pool_normals, schedule, args.seed,
                                pool=TexturePool(args.texture_dir))
    out_dir = Path(args.out_dir)
    for i, sample in enumerate(batch[: args.count]):
        dataio.save_image(out_dir / f"sample{i:03d}_image.png", sample.image_t)
        dataio.save_mask16(out_dir / f"sample{i:03d}_mask.png", sample.gt_mask)
        dataio.save_mask16(out_dir / f"sample{i:03d}_prev_mask.png", sample.prev_mask)
    print(f"wrote {args.count} sample triplets to {out_dir}")
    return 0


def _add_sweep(sub):
    p = sub.add_parser("sweep", help="metric-vs-parameter table over a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--parameter", required=True,
                   choices=("lambda", "kernel", "steps", "schedule"))
    p.add_argument("--values", required=True,
                   help="comma-separated list, e.g. 0,0.5,0.95,1")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="fuse_weight", type=float,
                   default=DEFAULT_FUSE_WEIGHT)
    p.add_argument("--kernel", type=int, default=DEFAULT_KERNEL_SIZE)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--schedule", choices=SCHEDULE_SHAPES, default="linear")
    p.add_argument("--image-size", type=int)
    p.add_argument("--resize-size", type=int)
    p.add_argument("--fpr-limit", type=float, default=DEFAULT_FPR_LIMIT)
    return p


def _cmd_sweep(args) -> int:
    model, payload = load_denoiser(args.checkpoint)
    image_size, resize_size = _infer_sizes(args, payload)
    layout = dataio.load_dataset(args.data_root, args.category)
    if not layout.test_images:
        raise ValueError("dataset has no test split to sweep over")

    images, labels, gt_maps = [], [], []
    for path, defect in layout.test_images:
        images.append(dataio.preprocess(dataio.load_image(path), resize_to=resize_size,
                                        crop_to=image_size))
        labels.append(0 if defect == "good" else 1)
        mask_path = layout.masks[path]
        if mask_path is None:
            gt_maps.append(np.zeros((image_size, image_size), dtype=np.float32))
        else:
            gt = dataio.load_mask(mask_path)
            gt_maps.append(dataio.preprocess(gt, resize_to=resize_size,
                                             crop_to=image_size)[..., 0] > 0)

    raw_values = [v for v in args.values.split(",") if v]
    if args.parameter in ("lambda", "kernel", "steps"):
        values = [float(v) if args.parameter == "lambda" else int(v) for v in raw_values]
    else:
        values = raw_values

    if args.parameter in ("lambda", "kernel"):
        schedule = make_schedule(args.schedule, args.steps)
        traces = [run_reverse(model, img, schedule) for img in images]
        rows = sweep_fusion(traces, labels, gt_maps, args.parameter, values,
                            fpr_limit=args.fpr_limit, fuse_weight=args.fuse_weight,
                            kernel_size=args.kernel)
    else:
        rows = sweep_inference(model, images, labels, gt_maps, args.parameter, values,
                               base_shape=args.schedule, base_steps=args.steps,
                               fpr_limit=args.fpr_limit, fuse_weight=args.fuse_weight,
                               kernel_size=args.kernel)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["parameter", "value", "auroc", "aupro"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} sweep rows to {out}")
    return 0


def _add_verify(sub):
    p = sub.add_parser("verify-process",
                       help="check the blending algebra against its exact identities")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--size", type=int, default=16)
    return p


def _cmd_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst_single = worst_tele = 0.0
    region_ok = True
    for trial in range(args.trials):
        shape = SCHEDULE_SHAPES[trial % len(SCHEDULE_SHAPES)]
        steps = int(rng.choice([5, 20]))
        schedule = make_schedule(shape, steps)
        normal = rng.uniform(-1, 1, size=(args.size, args.size, 3))
        anomaly = rng.uniform(-1, 1, size=(args.size, args.size, 3))
        mask = (rng.random((args.size, args.size)) < 0.3).astype(np.float64)

        x = forward_sample(normal, anomaly, mask, schedule, steps)
        for t in range(steps, 0, -1):
            expected = forward_sample(normal, anomaly, mask, schedule, t - 1)
            stepped = reverse_step(forward_sample(normal, anomaly, mask, schedule, t),
                                   mask, anomaly, normal, schedule, t)
            worst_single = max(worst_single, float(np.abs(stepped - expected).max()))
            x = reverse_step(x, mask, anomaly, normal, schedule, t)
            region_ok &= bool(np.array_equal(x[mask == 0], normal[mask == 0]))
        worst_tele = max(worst_tele, float(np.abs(x - normal).max()))

    ok = worst_single < SINGLE_STEP_TOL and worst_tele < TELESCOPE_TOL and region_ok
    print(f"single-step identity: max error {worst_single:.3e} "
          f"({'PASS' if worst_single < SINGLE_STEP_TOL else 'FAIL'}, tol {SINGLE_STEP_TOL})")
    print(f"full telescoping:     max error {worst_tele:.3e} "
          f"({'PASS' if worst_tele < TELESCOPE_TOL else 'FAIL'}, tol {TELESCOPE_TOL})")
    print(f"masked-out pixels untouched: {'PASS' if region_ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anofade",
        description="Surface anomaly detection by iterative transparency removal",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train(sub)
    _add_infer(sub)
    _add_eval(sub)
    _add_synth_preview(sub)
    _add_sweep(sub)
    _add_verify(sub)
    return parser


_COMMANDS = {
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "synth-preview": _cmd_synth_preview,
    "sweep": _cmd_sweep,
    "verify-process": _cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
