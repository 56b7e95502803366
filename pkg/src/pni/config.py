"""Flat key = value pipeline configuration.

Defaults are the full-scale settings; desk-scale runs override them in
the config file or with repeated ``--set key=value`` flags. Unknown keys
are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


def _parse_bool(text):
    val = text.strip().lower()
    if val in ("true", "1", "yes", "on"):
        return True
    if val in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text):
    return tuple(int(part) for part in text.replace(",", " ").split())


@dataclass
class PipelineConfig:
    seed: int = 0
    # feature extraction
    feature_source: str = "toy"          # toy | pnit
    resize_to: int = 512
    crop_to: int = 480
    use_levels: tuple = (2, 3)
    toy_channels: tuple = (16, 32)
    agg_patch: int = 5
    d: int = 1024
    # coresets
    emb_fraction: float = 0.01
    dist_size: int = 2048
    projection_dim: int = 0              # 0 disables random projection
    # conditional prior
    p: int = 9
    mlp_layers: int = 10
    mlp_width: int = 2048
    epochs: int = 15
    lr: float = 1e-3
    batch: int = 2048
    sched_gamma: float = 0.1
    sched_step: int = 5
    temperature: float = 2.0
    use_position: bool = True
    use_neighbor: bool = True
    # scoring
    lam: float = 1.0
    tau: float = 0.0                     # 0 derives 1 / (2 * |C_dist|)
    sigma: float = 8.0
    eq7_mode: str = "voronoi"
    normalize_scores: bool = False
    fuse_ratio: float = 0.1
    # synthetic benchmark
    bench_grid: int = 8
    bench_palette: int = 4
    bench_cell_px: int = 8
    bench_noise: float = 0.05
    bench_layout: str = "stripes"
    bench_train: int = 60
    bench_test_normal: int = 14
    bench_permute: int = 13
    bench_blob: int = 13

    def validate(self):
        if self.feature_source not in ("toy", "pnit"):
            raise ValueError(f"feature_source must be toy or pnit, got {self.feature_source!r}")
        if self.crop_to > self.resize_to:
            raise ValueError("crop_to must not exceed resize_to")
        if self.agg_patch < 1 or self.agg_patch % 2 == 0:
            raise ValueError("agg_patch must be a positive odd integer")
        if self.d < 1:
            raise ValueError("d must be positive")
        if not 0.0 < self.emb_fraction <= 1.0:
            raise ValueError("emb_fraction must lie in (0, 1]")
        if self.dist_size < 1:
            raise ValueError("dist_size must be positive")
        if self.p < 3 or self.p % 2 == 0:
            raise ValueError("neighborhood p must be an odd integer >= 3")
        if self.mlp_layers < 2:
            raise ValueError("mlp_layers must be at least 2")
        if min(self.mlp_width, self.epochs, self.batch, self.sched_step) < 1:
            raise ValueError("mlp_width, epochs, batch, sched_step must be positive")
        if self.lr <= 0 or self.sched_gamma <= 0:
            raise ValueError("lr and sched_gamma must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative (0 derives the default)")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.eq7_mode not in ("voronoi", "literal"):
            raise ValueError(f"eq7_mode must be voronoi or literal, got {self.eq7_mode!r}")
        if not 0.0 <= self.fuse_ratio <= 1.0:
            raise ValueError("fuse_ratio must lie in [0, 1]")
        if self.feature_source == "toy":
            from .features import TOY_LEVELS

            if len(self.toy_channels) != len(TOY_LEVELS):
                raise ValueError(
                    f"toy_channels needs one entry per extractor level {TOY_LEVELS}"
                )
            unknown = [lv for lv in self.use_levels if lv not in TOY_LEVELS]
            if unknown:
                raise ValueError(f"toy extractor has no levels {unknown}")
        return self

    def bench_spec(self):
        from .benchmark import BenchSpec

        return BenchSpec(
            grid=self.bench_grid, palette=self.bench_palette,
            cell_px=self.bench_cell_px, noise=self.bench_noise,
            layout_rule=self.bench_layout,
            n_train=self.bench_train, n_test_normal=self.bench_test_normal,
            n_permute=self.bench_permute, n_blob=self.bench_blob,
            seed=self.seed,
        )


_PARSERS = {int: int, float: float, str: lambda s: s.strip(), bool: _parse_bool,
            tuple: _parse_int_tuple}


def _field_types():
    out = {}
    for f in fields(PipelineConfig):
        out[f.name] = type(getattr(PipelineConfig(), f.name))
    return out


def parse_config(text, base=None):
    """Parse flat ``key = value`` lines into a PipelineConfig."""
    cfg = base if base is not None else PipelineConfig()
    types = _field_types()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        try:
            setattr(cfg, key, _PARSERS[types[key]](value.strip()))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return cfg


def desk_config(seed=0):
    """Desk-scale profile for the synthetic benchmark.

    One benchmark cell maps onto exactly one stride-8 feature cell, so
    toy features are strictly cell-local and swapped cells stay invisible
    to a prior-free scorer by construction.
    """
    return PipelineConfig(
        seed=seed,
        resize_to=64, crop_to=64,
        use_levels=(3,), toy_channels=(16, 24),
        agg_patch=1, d=24,
        emb_fraction=0.10, dist_size=64,
        p=3, mlp_layers=4, mlp_width=128,
        epochs=15, lr=1e-3, batch=256,
        sigma=1.0,
    ).validate()


def load_config(path, overrides=()):
    """Read a config file (optional) and apply ``key=value`` override strings."""
    cfg = PipelineConfig()
    if path is not None:
        cfg = parse_config(path.read_text(), cfg)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        cfg = parse_config(f"{key} = {value}", cfg)
    return cfg.validate()


def dump_config(cfg):
    """Serialize back to the flat text form (stable field order)."""
    lines = []
    for f in fields(PipelineConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = np.format_float_positional(value, trim="0")
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
