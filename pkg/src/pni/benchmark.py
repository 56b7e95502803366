"""Synthetic benchmark where local appearance is normal but context is not.

Images are a grid of textured cells. Each token renders as one fixed
random pattern plus per-image noise, and the token layout is a fixed
function of position (striped by default, like an ordered cable bundle).
Two anomaly kinds probe different failure modes:

* ``permute`` swaps the tokens of two cells. Every swapped cell's texture
  still occurs somewhere in the normal set, so a purely local scorer has
  nothing to latch onto; only position or neighborhood context exposes it.
  Swap pairs are chosen so neither token occurs within the other cell's
  3x3 cell window, keeping the permutation invisible to local statistics
  but fully exposed to 3x3 context models.
* ``blob`` stamps an out-of-palette texture under a random blob mask, a
  plain local defect that any scorer should catch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .refine import generate_defect_mask


@dataclass
class BenchSpec:
    grid: int = 8
    palette: int = 4
    cell_px: int = 8
    noise: float = 0.05
    layout_rule: str = "stripes"   # stripes | random
    n_train: int = 60
    n_test_normal: int = 14
    n_permute: int = 13
    n_blob: int = 13
    seed: int = 0

    @property
    def image_px(self):
        return self.grid * self.cell_px

    def validate(self):
        if self.palette < 2:
            raise ValueError("benchmark spec infeasible: need at least 2 tokens")
        if self.grid < 2:
            raise ValueError("benchmark spec infeasible: need at least 2 cells per side")
        if self.cell_px < 4:
            raise ValueError("cells must be at least 4 px for the feature strides")
        if self.layout_rule not in ("stripes", "random"):
            raise ValueError(f"unknown layout rule {self.layout_rule!r}")
        if not 0 <= self.noise <= 0.15:
            # token patterns live in [0.15, 0.85]; larger noise would blur
            # the inter-token separation the benchmark relies on
            raise ValueError(f"noise {self.noise} outside [0, 0.15]")
        for name in ("n_train", "n_test_normal", "n_permute", "n_blob"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.n_train == 0:
            raise ValueError("need at least one training image")


@dataclass
class BenchmarkData:
    spec: BenchSpec
    train_images: list = field(default_factory=list)
    test_images: list = field(default_factory=list)
    test_masks: list = field(default_factory=list)   # binary (H, W), zeros for normals
    test_labels: list = field(default_factory=list)  # 0 normal, 1 anomalous
    test_kinds: list = field(default_factory=list)   # "normal" | "permute" | "blob"


def _render(spec, patterns, layout, rng):
    g, cp = spec.grid, spec.cell_px
    tiles = patterns[layout]                       # (g, g, cp, cp)
    img = tiles.transpose(0, 2, 1, 3).reshape(g * cp, g * cp)
    img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def _window_tokens(layout, r, c):
    g = layout.shape[0]
    block = layout[max(0, r - 1):min(g, r + 2), max(0, c - 1):min(g, c + 2)]
    return set(int(t) for t in block.ravel())


def _pick_swap_cells(layout, rng):
    """Two cells whose tokens stay outside each other's 3x3 cell context,
    so the swap is locally normal yet contextually impossible."""
    g = layout.shape[0]
    for _ in range(512):
        r1, c1, r2, c2 = (int(v) for v in rng.integers(0, g, 4))
        t1, t2 = int(layout[r1, c1]), int(layout[r2, c2])
        if t1 == t2:
            continue
        if t2 in _window_tokens(layout, r1, c1):
            continue
        if t1 in _window_tokens(layout, r2, c2):
            continue
        return (r1, c1), (r2, c2)
    raise ValueError(
        "benchmark spec infeasible: no cell pair swaps without leaking "
        "into the other's 3x3 context (palette too small or layout too mixed)"
    )


def _make_layout(spec, rng):
    if spec.layout_rule == "stripes":
        cols = np.arange(spec.grid) % spec.palette
        return np.tile(cols, (spec.grid, 1))
    layout = rng.integers(0, spec.palette, (spec.grid, spec.grid))
    if np.unique(layout).size < 2:
        # vanishingly unlikely for any practical spec, but permutation
        # anomalies need two distinct tokens somewhere
        layout.flat[0] = (layout.flat[1] + 1) % spec.palette
    return layout


def generate_benchmark(spec: BenchSpec) -> BenchmarkData:
    """Deterministic dataset: all-normal train split plus a mixed test split."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    patterns = rng.uniform(0.15, 0.85, (spec.palette, spec.cell_px, spec.cell_px))
    layout = _make_layout(spec, rng)

    data = BenchmarkData(spec=spec)
    h = w = spec.image_px
    cp = spec.cell_px

    for _ in range(spec.n_train):
        data.train_images.append(_render(spec, patterns, layout, rng))

    for _ in range(spec.n_test_normal):
        data.test_images.append(_render(spec, patterns, layout, rng))
        data.test_masks.append(np.zeros((h, w), dtype=np.uint8))
        data.test_labels.append(0)
        data.test_kinds.append("normal")

    for _ in range(spec.n_permute):
        (r1, c1), (r2, c2) = _pick_swap_cells(layout, rng)
        swapped = layout.copy()
        swapped[r1, c1], swapped[r2, c2] = layout[r2, c2], layout[r1, c1]
        data.test_images.append(_render(spec, patterns, swapped, rng))
        mask = np.zeros((h, w), dtype=np.uint8)
        for (r, c) in ((r1, c1), (r2, c2)):
            mask[r * cp:(r + 1) * cp, c * cp:(c + 1) * cp] = 1
        data.test_masks.append(mask)
        data.test_labels.append(1)
        data.test_kinds.append("permute")

    for _ in range(spec.n_blob):
        img = _render(spec, patterns, layout, rng)
        mask = generate_defect_mask(rng, h, w, n_patterns_range=(1, 2),
                                    scale_range=(0.15, 0.35))
        out_of_palette = np.clip(
            rng.uniform(0.0, 1.0, img.shape) + rng.normal(0.0, spec.noise, img.shape),
            0.0, 1.0,
        )
        data.test_images.append(np.where(mask > 0, out_of_palette, img))
        data.test_masks.append(mask)
        data.test_labels.append(1)
        data.test_kinds.append("blob")

    return data


def write_benchmark(data: BenchmarkData, out_dir):
    """Write images, masks, and a TSV manifest under ``out_dir``."""
    for sub in ("train", "test", "masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    lines = [
        f"# seed = {data.spec.seed}",
        f"# grid = {data.spec.grid}",
        f"# palette = {data.spec.palette}",
        f"# cell_px = {data.spec.cell_px}",
        "# columns: split\tname\tlabel\tkind\tmask",
    ]
    for i, img in enumerate(data.train_images):
        name = f"train_{i:03d}.pgm"
        tensorio.write_gray_image(out_dir / "train" / name, img)
        lines.append(f"train\t{name}\t0\tnormal\t-")
    for i, img in enumerate(data.test_images):
        name = f"test_{i:03d}.pgm"
        mask_name = f"mask_{i:03d}.pgm"
        tensorio.write_gray_image(out_dir / "test" / name, img)
        tensorio.write_gray_image(
            out_dir / "masks" / mask_name, data.test_masks[i].astype(np.float64)
        )
        lines.append(
            f"test\t{name}\t{data.test_labels[i]}\t{data.test_kinds[i]}\t{mask_name}"
        )
    (out_dir / "manifest.tsv").write_text("\n".join(lines) + "\n")


def read_manifest(dataset_dir):
    """Parse a dataset manifest into a list of row dicts plus metadata."""
    meta, rows = {}, []
    for line in (dataset_dir / "manifest.tsv").read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        split, name, label, kind, mask = line.split("\t")
        rows.append(
            {"split": split, "name": name, "label": int(label), "kind": kind,
             "mask": None if mask == "-" else mask}
        )
    return rows, meta
