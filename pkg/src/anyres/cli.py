"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, distill, segment
from .config import ConfigError, RunConfig, load_config
from .imageio import IGNORE_LABEL, read_pgm, read_ppm, write_ppm
from .tensor import bilinear_resize
from .vit import ModelParams, ViTConfig, forward, forward_window, init_params, load_checkpoint, save_checkpoint
from .window import crop_windows, plan_windows, stitch_predictions

log = logging.getLogger("anyres")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class DataError(Exception):
    pass


def list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".ppm")


def load_dataset(directory: Path) -> list[tuple[str, np.ndarray | None]]:
    items = []
    for path in list_images(directory):
        try:
            items.append((path.stem, read_ppm(path)))
        except (OSError, ValueError) as exc:
            log.warning("cannot read %s: %s", path, exc)
            items.append((path.stem, None))
    return items


def load_model(run: RunConfig, *sections: str) -> tuple[ModelParams, ViTConfig]:
    """First ``<section>.checkpoint`` that is set, falling back to ``model.checkpoint``."""
    for section in sections + ("model",):
        if run.get(section, "checkpoint"):
            path = run.require_path(section, "checkpoint")
            break
    else:
        raise ConfigError("no checkpoint configured (set model.checkpoint)")
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def snap_to_patches(image: np.ndarray, P: int) -> np.ndarray:
    h, w = image.shape[:2]
    nh, nw = max(P, round(h / P) * P), max(P, round(w / P) * P)
    return image if (nh, nw) == (h, w) else bilinear_resize(image, nh, nw)


# -- commands ---------------------------------------------------------------


def cmd_init_params(run: RunConfig, args) -> int:
    cfg = run.vit_config()
    out = run.require_path("model", "checkpoint", must_exist=False)
    seed = args.seed if args.seed is not None else run.get("model", "init_seed", 0)
    save_checkpoint(out, init_params(cfg, seed), cfg)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_precompute(run: RunConfig, args) -> int:
    train_cfg = run.train_config()
    dataset_dir = run.require_path("train", "dataset")
    store_path = run.require_path("train", "store", must_exist=False)
    teacher, vit_cfg = load_model(run, "teacher")
    stride = run.get("teacher", "stride", 24)
    dtype = run.get("train", "store_dtype", "f32")
    if dtype not in distill.DTYPES:
        raise ConfigError(f"train.store_dtype must be one of {sorted(distill.DTYPES)}")
    dataset = load_dataset(dataset_dir)
    readable = sum(img is not None for _, img in dataset)
    if not dataset:
        log.warning("dataset directory %s holds no .ppm images", dataset_dir)
    elif readable == 0:
        raise DataError("no readable images in dataset")
    try:
        records = distill.precompute_teacher(
            dataset, teacher, vit_cfg, train_cfg, stride, store_path, dtype=dtype, threads=args.threads
        )
    except (RuntimeError, OSError) as exc:
        raise DataError(str(exc)) from exc
    print(f"{len(records)} records, {store_path.stat().st_size} bytes")
    return EXIT_OK


def cmd_train(run: RunConfig, args) -> int:
    train_cfg = run.train_config()
    dataset_dir = run.require_path("train", "dataset")
    store_path = run.require_path("train", "store")
    out = run.require_path("train", "output", must_exist=False)
    student, vit_cfg = load_model(run)
    try:
        store = distill.read_store(store_path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read feature store: {exc}") from exc
    dataset = load_dataset(dataset_dir)
    dataset_ids = {image_id for image_id, img in dataset if img is not None}
    stray = [rec.image_id for rec in store if rec.image_id not in dataset_ids]
    if stray:
        raise DataError(f"store records without dataset images: {', '.join(stray)}")

    log_path = run.path("train", "log")
    lines = []
    try:
        params = distill.train(
            train_cfg, vit_cfg, dataset, store, student,
            on_step=lambda e, s, i, loss: lines.append(f"{e} {s} {i} {loss!r}"),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    save_checkpoint(out, params, vit_cfg)
    if log_path is not None:
        log_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(f"wrote {out} after {len(lines)} steps")
    return EXIT_OK


def _predict(image, params, cfg: ViTConfig, classes, mode: str, stride: int) -> np.ndarray:
    H, W = image.shape[:2]
    if mode == "single_pass":
        view = snap_to_patches(image, cfg.patch_size)
        feats, _ = forward(view, params, cfg)
        return segment.predict_mask(segment.class_similarities(feats, classes), H, W)
    K = cfg.native_side
    plan = plan_windows(H, W, K, stride, cfg.patch_size)
    sims = []
    for win in crop_windows(image, plan):
        y = segment.class_similarities(forward_window(win, params, cfg), classes)
        sims.append(bilinear_resize(y, K, K))
    return np.argmax(stitch_predictions(sims, plan), axis=-1)


def evaluate(run: RunConfig, mode: str) -> segment.EvalReport:
    if mode not in ("single_pass", "sliding_window"):
        raise ConfigError(f"eval mode must be single_pass or sliding_window, got {mode!r}")
    images_dir = run.require_path("eval", "images")
    masks_dir = run.require_path("eval", "masks")
    classes_path = run.require_path("eval", "class_embeddings")
    try:
        classes = segment.read_class_embeddings(classes_path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read class embeddings: {exc}") from exc
    params, cfg = load_model(run, "eval")
    stride = run.get("eval", "stride", run.get("teacher", "stride", cfg.native_side // 2))
    ignore = run.get("eval", "ignore_index", IGNORE_LABEL)

    images = list_images(images_dir)
    missing = [p.name for p in images if not (masks_dir / f"{p.stem}.pgm").exists()]
    if missing:
        raise DataError(f"no mask for images: {', '.join(missing)}")
    preds, gts = [], []
    for path in images:
        try:
            image = read_ppm(path)
            gt = read_pgm(masks_dir / f"{path.stem}.pgm")
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        if gt.shape != image.shape[:2]:
            raise DataError(f"{path.stem}: mask {gt.shape} does not match image {image.shape[:2]}")
        try:
            preds.append(_predict(image, params, cfg, classes, mode, stride))
        except ValueError as exc:
            raise DataError(f"{path.stem}: {exc}") from exc
        gts.append(gt)
    return segment.miou(preds, gts, classes.C, ignore, classes.names)


def cmd_eval(run: RunConfig, args) -> int:
    mode = args.mode or run.get("eval", "mode", "single_pass")
    report = evaluate(run, mode)
    print(report.table())
    out = run.path("eval", "output")
    if out is not None:
        out.write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_bench(run: RunConfig, args) -> int:
    params, cfg = load_model(run, "bench")
    H = run.get("bench", "image_h", 1024)
    W = run.get("bench", "image_w", 1024)
    image = np.random.default_rng(args.seed or 0).random((H, W, 3))
    strides = run.get("bench", "strides", [16, 32, 64, 128, 256, 512])
    records = bench.sweep(
        params, cfg, image, cfg.native_side, strides,
        sub_batch=run.get("bench", "sub_batch", 60),
        warmup=run.get("bench", "warmup", 10),
        trials=run.get("bench", "trials", 1),
        threads=args.threads,
    )
    text = bench.records_to_csv(records)
    out = run.path("bench", "output")
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")
        print(f"wrote {out}")
    if args.svg:
        if not args.metric_file or not args.metric:
            raise ConfigError("--svg needs --metric-file and --metric")
        with open(args.metric_file, newline="", encoding="utf-8") as fh:
            metrics = {(r["mode"], r["s"]): r[args.metric] for r in csv.DictReader(fh)}
        rows = list(csv.DictReader(text.splitlines()))
        for row in rows:
            row[args.metric] = metrics.get((row["mode"], row["s"]))
        Path(args.svg).write_text(bench.svg_scatter(rows, args.metric), encoding="utf-8")
    return EXIT_OK


def cmd_pca_viz(run: RunConfig, args) -> int:
    teacher, cfg = load_model(run, "teacher")
    P, K = cfg.patch_size, cfg.native_side
    try:
        image = read_ppm(args.image)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    image = distill.ensure_min_side(snap_to_patches(image, P), K, P)
    stride = run.get("teacher", "stride", 24)
    basis = distill.teacher_features(image, teacher, cfg, stride)
    if args.student:
        student, scfg = load_checkpoint(args.student)
        feats, _ = forward(image, student, scfg)
    else:
        feats = basis
    try:
        rgb = segment.pca_project(feats, basis)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    write_ppm(args.output, np.repeat(np.repeat(rgb, P, axis=0), P, axis=1))
    print(f"wrote {args.output}")
    return EXIT_OK


COMMANDS = {
    "init-params": cmd_init_params,
    "precompute": cmd_precompute,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "pca-viz": cmd_pca_viz,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anyres", description=__doc__.splitlines()[0])
    parser.add_argument("--config", required=True, help="flat section.key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="overrides train.seed and model.init_seed")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("init-params", help="write a freshly initialised checkpoint")
    sub.add_parser("precompute", help="build the teacher feature store")
    sub.add_parser("train", help="distil the stored teacher features into the student")
    p = sub.add_parser("eval", help="score segmentation with mIoU")
    p.add_argument("--mode", choices=["single_pass", "sliding_window"])
    p = sub.add_parser("bench", help="time single-pass and sliding-window inference")
    p.add_argument("--svg", help="also write a time-vs-metric scatter plot")
    p.add_argument("--metric-file", help="CSV with mode,s,<metric> columns for the plot")
    p.add_argument("--metric", help="metric column to plot")
    p = sub.add_parser("pca-viz", help="colour features by their top principal components")
    p.add_argument("--image", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--student", help="checkpoint whose single-pass features are projected")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        run = load_config(args.config)
        if args.seed is not None:
            run.values["train"]["seed"] = args.seed
        return COMMANDS[args.command](run, args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (AssertionError, FloatingPointError) as exc:
        log.error("internal invariant violated: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
