"""End-to-end orchestration: fit models, score images, emit artifacts.

Model directory layout::

    config.txt        exact config the models were fitted with
    model.meta        derived values: grid size, coreset sizes, score stats
    c_emb.pnit/.idx   embedding coreset + provenance sidecar
    c_dist.pnit/.idx  distribution coreset + member indices
    voronoi.idx       C_emb -> C_dist cell assignment
    hist_counts.pnit  position histogram counts (absent when position off)
    mlp/              network checkpoint (absent when neighborhood off)

Train-score statistics (normalization min/max, image-score p99) are
computed after reloading the serialized models so fit-time numbers match
what any later score run will reproduce.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import coreset as cs
from . import distmodel as dm
from . import scoring
from . import tensorio
from .config import PipelineConfig, dump_config
from .features import aggregate_patches, extract_toy_hierarchy, merge_hierarchy, preprocess
from .mlp import MlpTrainConfig, NeighborhoodMlp
from .refine import apply_refiner, fuse_refined, normalize_map


def extract_featmap(image, cfg: PipelineConfig):
    """Preprocess one image and run the toy extractor chain."""
    img = preprocess(image, cfg.resize_to, cfg.crop_to)
    return extract_featmap_from_preprocessed(img, cfg)


def extract_featmap_from_preprocessed(image, cfg: PipelineConfig):
    """Toy extractor chain on an already resized/cropped image."""
    hier = extract_toy_hierarchy(image, cfg.seed, cfg.toy_channels)
    merged = merge_hierarchy(hier, cfg.use_levels)
    return aggregate_patches(merged, cfg.agg_patch, cfg.d)


def score_params(cfg: PipelineConfig):
    return scoring.ScoreParams(
        lam=cfg.lam,
        tau=None if cfg.tau == 0 else cfg.tau,
        sigma=cfg.sigma,
        eq7_mode=cfg.eq7_mode,
    )


def fit(cfg: PipelineConfig, train_featmaps, model_dir, image_size):
    """Build coresets and priors from training feature maps, serialize
    them, and record train-score statistics. Returns the meta dict."""
    cfg.validate()
    maps = list(train_featmaps)
    if not maps:
        raise ValueError("empty training set")
    bank = cs.build_memory_bank(maps)
    emb_count = min(len(bank), max(1, round(cfg.emb_fraction * len(bank))))
    dist_count = min(cfg.dist_size, emb_count)
    projection = cfg.projection_dim or None
    c_emb, c_dist = cs.subsample(bank, emb_count, dist_count, cfg.seed, projection)

    model_dir.mkdir(parents=True, exist_ok=True)
    cs.save_coresets(model_dir, c_emb, c_dist)

    if cfg.use_position:
        hist = dm.build_position_histogram(maps, c_dist.vectors, cfg.p)
        dm.save_histogram(model_dir, hist)
    if cfg.use_neighbor:
        train_cfg = MlpTrainConfig(
            epochs=cfg.epochs, learning_rate=cfg.lr, batch_size=cfg.batch,
            sched_gamma=cfg.sched_gamma, sched_step=cfg.sched_step, seed=cfg.seed,
        )
        net = dm.train_neighborhood_mlp(
            maps, c_dist.vectors, cfg.p, train_cfg,
            hidden_width=cfg.mlp_width, n_layers=cfg.mlp_layers,
            temperature=cfg.temperature,
        )
        net.save(model_dir / "mlp")

    d, grid_h, grid_w = maps[0].shape
    params = score_params(cfg)
    params.validate()
    meta = {
        "d": d, "grid_h": grid_h, "grid_w": grid_w,
        "image_h": image_size[0], "image_w": image_size[1],
        "n_emb": emb_count, "n_dist": dist_count,
        "p": cfg.p, "lam": cfg.lam, "tau": params.resolve_tau(dist_count),
        "sigma": cfg.sigma, "eq7_mode": cfg.eq7_mode,
        "temperature": cfg.temperature, "seed": cfg.seed,
        "use_position": cfg.use_position, "use_neighbor": cfg.use_neighbor,
    }
    _write_meta(model_dir / "model.meta", meta)
    (model_dir / "config.txt").write_text(dump_config(cfg))

    # score the training set with the reloaded models so the recorded
    # statistics match later runs bit for bit
    models, meta = load_models(model_dir)
    lo, hi = np.inf, -np.inf
    image_scores = []
    for fm in maps:
        amap = scoring.score_map(fm, models)
        post = scoring.postprocess_map(
            amap.scores, meta["image_h"], meta["image_w"], meta["sigma"]
        )
        lo, hi = min(lo, float(post.min())), max(hi, float(post.max()))
        image_scores.append(amap.image_score)
    meta["score_min"] = lo
    meta["score_max"] = hi if hi > lo else lo + 1.0
    meta["img_p99"] = float(np.percentile(image_scores, 99))
    _write_meta(model_dir / "model.meta", meta)
    return meta


_META_TYPES = {
    "d": int, "grid_h": int, "grid_w": int, "image_h": int, "image_w": int,
    "n_emb": int, "n_dist": int, "p": int, "seed": int,
    "lam": float, "tau": float, "sigma": float, "temperature": float,
    "score_min": float, "score_max": float, "img_p99": float,
    "eq7_mode": str,
    "use_position": lambda s: s == "True", "use_neighbor": lambda s: s == "True",
}


def _write_meta(path, meta):
    path.write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))


def read_meta(path):
    meta = {}
    for line in path.read_text().splitlines():
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        meta[key] = _META_TYPES.get(key, str)(value)
    return meta


def load_models(model_dir):
    """Reload serialized models into a scoring-ready bundle."""
    meta = read_meta(model_dir / "model.meta")
    c_emb, c_dist = cs.load_coresets(model_dir)
    hist = None
    if meta["use_position"]:
        hist = dm.load_histogram(model_dir, (meta["grid_h"], meta["grid_w"]))
    net = None
    if meta["use_neighbor"]:
        net = NeighborhoodMlp.load(model_dir / "mlp")
        net.temperature = meta["temperature"]
    params = scoring.ScoreParams(
        lam=meta["lam"], tau=meta["tau"], sigma=meta["sigma"],
        eq7_mode=meta["eq7_mode"],
    )
    models = scoring.FittedModels(
        c_emb_vectors=c_emb.vectors, c_dist_vectors=c_dist.vectors,
        voronoi=c_dist.voronoi, histogram=hist, network=net,
        neighborhood_p=meta["p"], params=params,
        use_position=meta["use_position"], use_neighbor=meta["use_neighbor"],
    )
    return models, meta


def with_ablation(models, use_position, use_neighbor):
    """Scoring-time prior selection; the requested priors must exist."""
    if use_position and models.histogram is None:
        raise ValueError("model was fitted without the position histogram")
    if use_neighbor and models.network is None:
        raise ValueError("model was fitted without the neighborhood network")
    return dataclasses.replace(
        models, use_position=use_position, use_neighbor=use_neighbor
    )


def score_one(models, meta, featmap):
    """Feature-resolution scores plus the post-processed image-resolution map."""
    amap = scoring.score_map(featmap, models)
    post = scoring.postprocess_map(
        amap.scores, meta["image_h"], meta["image_w"], meta["sigma"]
    )
    return amap, post


def score_with_refiner(models, meta, featmap, image, refiner, fuse_ratio):
    """Normalized, refined, and fused image-resolution map.

    Returns (anomaly_map, final_map, fused_max).
    """
    amap, post = score_one(models, meta, featmap)
    normalized = normalize_map(post, meta["score_min"], meta["score_max"])
    refined = apply_refiner(refiner, image, normalized)
    fused = fuse_refined(normalized, refined, fuse_ratio)
    return amap, fused, float(fused.max())


def write_features_manifest(path, entries, image_size):
    """Feature manifest for the PNIT ingestion path.

    ``entries`` are (name, level, relative_path) rows; all features must
    come from images of one size.
    """
    lines = [f"# image_size = {image_size[0]} {image_size[1]}",
             "# columns: name\tlevel\tpath"]
    lines += [f"{name}\t{level}\t{rel}" for name, level, rel in entries]
    path.write_text("\n".join(lines) + "\n")


def read_features_manifest(path):
    """Returns ({name: {level: array}}, image_size), preserving file order."""
    base = path.parent
    image_size = None
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            text = line[1:].strip()
            if text.startswith("image_size"):
                _, _, value = text.partition("=")
                h, w = value.split()
                image_size = (int(h), int(w))
            continue
        name, level, rel = line.split("\t")
        rows.append((name, int(level), rel))
    if image_size is None:
        raise ValueError(f"{path}: missing '# image_size = H W' line")
    hierarchies = {}
    for name, level, rel in rows:
        arr = tensorio.read_tensor(base / rel, strict=True).astype(np.float64)
        if arr.ndim != 3:
            raise ValueError(f"feature file {rel} must be rank 3 (c, h, w)")
        hierarchies.setdefault(name, {})[level] = arr
    return hierarchies, image_size


def featmaps_from_manifest(path, cfg: PipelineConfig):
    """Merged + aggregated feature maps for every image in a manifest."""
    hierarchies, image_size = read_features_manifest(path)
    names, maps = [], []
    for name, hier in hierarchies.items():
        merged = merge_hierarchy(hier, cfg.use_levels)
        maps.append(aggregate_patches(merged, cfg.agg_patch, cfg.d))
        names.append(name)
    return names, maps, image_size
