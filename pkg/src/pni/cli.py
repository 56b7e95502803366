"""Command-line surface: synth | fit | score | eval | ensemble | refine-data.

Every command reads the same flat config file (``--config``), applies
``--set key=value`` overrides, and resolves path arguments against
``--workdir``. Commands exchange state only through files, so any stage
can be rerun in isolation.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import benchmark, metrics, pipeline, scoring, tensorio
from .config import load_config
from .refine import (CommandBridgeRefiner, composite_anomaly,
                     generate_defect_mask, normalize_map)

IMAGE_EXTENSIONS = (".pgm", ".ppm", ".png", ".jpg", ".jpeg", ".bmp")


def _collect_images(input_dir, split=None):
    """(names, images) from a dataset dir (manifest-driven) or a plain
    directory of image files."""
    manifest = input_dir / "manifest.tsv"
    if manifest.exists() and split is not None:
        rows, _ = benchmark.read_manifest(input_dir)
        names = [r["name"] for r in rows if r["split"] == split]
        images = [tensorio.read_image(input_dir / split / n) for n in names]
        return names, images
    names = sorted(
        p.name for p in input_dir.iterdir()
        if p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not names:
        raise ValueError(f"no images found in {input_dir}")
    return names, [tensorio.read_image(input_dir / n) for n in names]


def _train_inputs(cfg, input_path):
    """(featmaps, image_size) for fitting, from images or a PNIT manifest."""
    if cfg.feature_source == "pnit":
        _, maps, image_size = pipeline.featmaps_from_manifest(input_path, cfg)
        return maps, image_size
    _, images = _collect_images(input_path, split="train")
    maps = [pipeline.extract_featmap(im, cfg) for im in images]
    return maps, (cfg.crop_to, cfg.crop_to)


def cmd_synth(cfg, args):
    data = benchmark.generate_benchmark(cfg.bench_spec())
    benchmark.write_benchmark(data, args.out_dir)
    print(f"wrote {len(data.train_images)} train / {len(data.test_images)} test "
          f"images to {args.out_dir}")
    return 0


def cmd_fit(cfg, args):
    maps, image_size = _train_inputs(cfg, args.train_input)
    meta = pipeline.fit(cfg, maps, args.model_dir, image_size)
    skipped = [name for flag, name in
               ((cfg.use_position, "histogram"), (cfg.use_neighbor, "mlp"))
               if not flag]
    manifest = [f"# seed = {cfg.seed}"]
    manifest += [f"skipped = {name}" for name in skipped]
    manifest += [f"trained = {meta['n_emb']} emb / {meta['n_dist']} dist on "
                 f"{meta['grid_h']}x{meta['grid_w']} grid"]
    (args.model_dir / "fit_manifest.txt").write_text("\n".join(manifest) + "\n")
    print(f"fitted models in {args.model_dir} "
          f"(score range [{meta['score_min']:.4g}, {meta['score_max']:.4g}], "
          f"image p99 {meta['img_p99']:.4g})")
    return 0


def _make_refiner(args, out_dir):
    command = args.refiner_cmd or os.environ.get("PNI_BRIDGE_CMD")
    if not command:
        return None
    bridge_dir = args.bridge_dir if args.bridge_dir else out_dir / "bridge"
    return CommandBridgeRefiner(command, bridge_dir)


def cmd_score(cfg, args):
    models, meta = pipeline.load_models(args.model_dir)
    models = pipeline.with_ablation(models, cfg.use_position, cfg.use_neighbor)
    if cfg.feature_source == "pnit":
        names, maps, _ = pipeline.featmaps_from_manifest(args.input, cfg)
        images = [None] * len(names)
    else:
        names, images = _collect_images(args.input, split="test")
        maps = [pipeline.extract_featmap(im, cfg) for im in images]
    refiner = _make_refiner(args, args.out_dir)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# seed = {cfg.seed}", f"# model_dir = {args.model_dir}",
             "# columns: name\timage_score\tmap\tfused_max"]
    for name, image, fm in zip(names, images, maps):
        stem = Path(name).stem
        if refiner is not None:
            if image is None:
                raise ValueError("refiner needs source images, not PNIT features")
            prepped = pipeline.preprocess(image, cfg.resize_to, cfg.crop_to)
            amap, final, fused_max = pipeline.score_with_refiner(
                models, meta, fm, prepped, refiner, cfg.fuse_ratio
            )
            fused_text = f"{fused_max:.17g}"
        else:
            amap, final = pipeline.score_one(models, meta, fm)
            if cfg.normalize_scores:
                final = normalize_map(final, meta["score_min"], meta["score_max"])
            fused_text = "-"
        tensorio.write_tensor(args.out_dir / f"{stem}_map.pnit", final)
        lo, hi = float(final.min()), float(final.max())
        tensorio.write_map_image(
            args.out_dir / f"{stem}_map.ppm", final, lo, hi if hi > lo else lo + 1.0
        )
        lines.append(f"{name}\t{amap.image_score:.17g}\t{stem}_map.pnit\t{fused_text}")
    (args.out_dir / "scores.tsv").write_text("\n".join(lines) + "\n")
    print(f"scored {len(names)} images into {args.out_dir}")
    return 0


def read_scores_manifest(scores_dir):
    rows = []
    for line in (scores_dir / "scores.tsv").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, image_score, map_file, fused = line.split("\t")
        rows.append({"name": name, "image_score": float(image_score),
                     "map": map_file, "fused": fused})
    return rows


def cmd_eval(cfg, args):
    score_rows = read_scores_manifest(args.scores_dir)
    data_rows, _ = benchmark.read_manifest(args.dataset_dir)
    labels_by_name = {r["name"]: r for r in data_rows if r["split"] == "test"}

    image_scores, image_labels = [], []
    pixel_scores, pixel_labels = [], []
    for row in score_rows:
        if row["name"] not in labels_by_name:
            raise ValueError(f"scored image {row['name']} missing from dataset manifest")
        entry = labels_by_name[row["name"]]
        image_scores.append(row["image_score"])
        image_labels.append(entry["label"])
        amap = tensorio.read_tensor(args.scores_dir / row["map"], strict=True)
        if entry["mask"] is None:
            mask = np.zeros(amap.shape, dtype=np.int64)
        else:
            mask = (tensorio.read_image(args.dataset_dir / "masks" / entry["mask"]) > 0.5)
        if mask.shape != amap.shape:
            raise ValueError(f"mask/map shape mismatch for {row['name']}")
        pixel_scores.append(np.asarray(amap, dtype=np.float64).ravel())
        pixel_labels.append(mask.astype(np.int64).ravel())

    pixel_scores = np.concatenate(pixel_scores)
    pixel_labels = np.concatenate(pixel_labels)
    report = {
        "seed": cfg.seed,
        "detection_auroc": metrics.auroc(image_scores, image_labels),
        "localization_auroc": metrics.auroc(pixel_scores, pixel_labels),
    }
    threshold, f1 = metrics.f1_optimal_threshold(pixel_scores, pixel_labels)
    fpr, fnr = metrics.error_rates(pixel_scores, pixel_labels, threshold)
    report.update({"f1_threshold": threshold, "f1": f1, "fpr": fpr, "fnr": fnr})

    text = "".join(f"{k} = {v}\n" for k, v in report.items())
    args.report.write_text(text)
    print(text, end="")
    return 0


def cmd_ensemble(cfg, args):
    map_names = None
    for d in args.in_dirs:
        names = sorted(p.name for p in d.glob("*_map.pnit"))
        if not names:
            raise ValueError(f"no *_map.pnit files in {d}")
        if map_names is None:
            map_names = names
        elif names != map_names:
            raise ValueError(f"{d} holds a different map set than {args.in_dirs[0]}")
    per_dir = []
    for d in args.in_dirs:
        maps = {n: tensorio.read_tensor(d / n).astype(np.float64) for n in map_names}
        if args.normalize:
            lo = min(float(m.min()) for m in maps.values())
            hi = max(float(m.max()) for m in maps.values())
            maps = {n: normalize_map(m, lo, hi if hi > lo else lo + 1.0)
                    for n, m in maps.items()}
        per_dir.append(maps)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# seed = {cfg.seed}", "# columns: name\timage_score\tmap\tfused_max"]
    for n in map_names:
        avg = scoring.ensemble_average([maps[n] for maps in per_dir])
        tensorio.write_tensor(args.out_dir / n, avg)
        lines.append(f"{Path(n).stem.removesuffix('_map')}\t{float(avg.max()):.17g}"
                     f"\t{n}\t-")
    (args.out_dir / "scores.tsv").write_text("\n".join(lines) + "\n")
    print(f"averaged {len(args.in_dirs)} map sets into {args.out_dir}")
    return 0


def cmd_refine_data(cfg, args):
    models, meta = pipeline.load_models(args.model_dir)
    _, images = _collect_images(args.train_input, split="train")
    if len(images) < 2:
        raise ValueError("need at least two training images to composite defects")
    prepped = [pipeline.preprocess(im, cfg.resize_to, cfg.crop_to) for im in images]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# seed = {cfg.seed}", "# columns: name\timage\tmask\tamap"]
    for i in range(args.count):
        clean_idx = int(rng.integers(len(prepped)))
        defect_idx = int((clean_idx + 1 + rng.integers(len(prepped) - 1)) % len(prepped))
        clean = prepped[clean_idx]
        h, w = clean.shape[:2]
        mask = generate_defect_mask(rng, h, w)
        image = composite_anomaly(clean, prepped[defect_idx], mask)
        fm = pipeline.extract_featmap_from_preprocessed(image, cfg)
        _, post = pipeline.score_one(models, meta, fm)
        amap = normalize_map(post, meta["score_min"], meta["score_max"])
        stem = f"sample_{i:04d}"
        img_name = f"{stem}.pgm" if image.ndim == 2 else f"{stem}.ppm"
        if image.ndim == 2:
            tensorio.write_gray_image(args.out_dir / img_name, image)
        else:
            tensorio.write_rgb_image(args.out_dir / img_name, image)
        tensorio.write_gray_image(args.out_dir / f"{stem}_mask.pgm",
                                  mask.astype(np.float64))
        tensorio.write_tensor(args.out_dir / f"{stem}_amap.pnit", amap)
        lines.append(f"{stem}\t{img_name}\t{stem}_mask.pgm\t{stem}_amap.pnit")
    (args.out_dir / "manifest.tsv").write_text("\n".join(lines) + "\n")
    print(f"wrote {args.count} defect samples to {args.out_dir}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pni",
        description="position/neighborhood-conditioned anomaly detection pipeline",
    )
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument("--workdir", type=Path, default=Path("."),
                        help="root for all relative paths")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    p.add_argument("out_dir", type=Path)

    p = sub.add_parser("fit", help="fit coresets and priors on normal images")
    p.add_argument("train_input", type=Path,
                   help="dataset dir, image dir, or features manifest")
    p.add_argument("model_dir", type=Path)

    p = sub.add_parser("score", help="score images against fitted models")
    p.add_argument("model_dir", type=Path)
    p.add_argument("input", type=Path,
                   help="dataset dir, image dir, or features manifest")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--refiner-cmd", help="external refiner command "
                   "(default: PNI_BRIDGE_CMD environment variable)")
    p.add_argument("--bridge-dir", type=Path,
                   help="bridge exchange directory (default: OUT_DIR/bridge)")

    p = sub.add_parser("eval", help="compute detection/localization metrics")
    p.add_argument("scores_dir", type=Path)
    p.add_argument("dataset_dir", type=Path)
    p.add_argument("report", type=Path)

    p = sub.add_parser("ensemble", help="average score maps from several runs")
    p.add_argument("out_dir", type=Path)
    p.add_argument("in_dirs", type=Path, nargs="+")
    p.add_argument("--normalize", action="store_true",
                   help="min-max normalize each input dir before averaging")

    p = sub.add_parser("refine-data", help="emit synthetic defect triples "
                       "for refiner training")
    p.add_argument("train_input", type=Path)
    p.add_argument("model_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--count", type=int, default=64)
    return parser


_PATH_ARGS = ("out_dir", "train_input", "model_dir", "input", "scores_dir",
              "dataset_dir", "report", "bridge_dir")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        for name in _PATH_ARGS:
            value = getattr(args, name, None)
            if value is not None:
                setattr(args, name, args.workdir / value)
        if hasattr(args, "in_dirs"):
            args.in_dirs = [args.workdir / d for d in args.in_dirs]
        handler = {
            "synth": cmd_synth, "fit": cmd_fit, "score": cmd_score,
            "eval": cmd_eval, "ensemble": cmd_ensemble,
            "refine-data": cmd_refine_data,
        }[args.command]
        return handler(cfg, args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
