"""Anomaly-map refinement support: synthetic defects, losses, fusion.

The refinement network itself is pluggable. The primary package ships an
identity refiner and a file-protocol client that hands the image and the
normalized map to an external command through a bridge directory:

    <bridge_dir>/input_image.pnit   (3, H, W) float32, values in [0, 1]
    <bridge_dir>/input_map.pnit     (H, W) float32, values in [0, 1]
    <bridge_dir>/refined_map.pnit   written back by the bridge command

The command is invoked with the bridge directory as its last argument.
"""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass

import numpy as np

from . import tensorio


@dataclass
class DefectSample:
    """Synthetic training triple: composite image, binary ground-truth
    mask, and the pipeline's own normalized estimate of it."""

    image: np.ndarray
    mask: np.ndarray
    estimated_map: np.ndarray


def _random_blob_polygon(rng, n_vertices=16):
    """Closed random-walk polygon in the unit disk: jittered angles with a
    smoothed radius walk."""
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    steps = rng.normal(0.0, 0.25, n_vertices)
    radii = np.empty(n_vertices)
    radii[0] = rng.uniform(0.5, 1.0)
    for i in range(1, n_vertices):
        radii[i] = np.clip(radii[i - 1] + steps[i], 0.25, 1.0)
    # moving average closes the loop smoothly
    radii = (radii + np.roll(radii, 1) + np.roll(radii, -1)) / 3.0
    return radii * np.cos(angles), radii * np.sin(angles)


def _fill_polygon(mask, xs, ys):
    """Even-odd scanline fill of one polygon into a binary mask."""
    h, w = mask.shape
    y_min = max(int(np.floor(ys.min())), 0)
    y_max = min(int(np.ceil(ys.max())), h - 1)
    x1, y1 = xs, ys
    x2, y2 = np.roll(xs, -1), np.roll(ys, -1)
    for row in range(y_min, y_max + 1):
        yc = row + 0.5
        crossing = ((y1 <= yc) & (y2 > yc)) | ((y2 <= yc) & (y1 > yc))
        if not crossing.any():
            continue
        t = (yc - y1[crossing]) / (y2[crossing] - y1[crossing])
        cuts = np.sort(x1[crossing] + t * (x2[crossing] - x1[crossing]))
        for a, b in zip(cuts[0::2], cuts[1::2]):
            lo = max(int(np.ceil(a - 0.5)), 0)
            hi = min(int(np.ceil(b - 0.5)) - 1, w - 1)
            if hi >= lo:
                mask[row, lo:hi + 1] = 1


def generate_defect_mask(rng, height, width, n_patterns_range=(1, 3),
                         scale_range=(0.08, 0.35)):
    """Union of randomly placed, randomly rescaled blob patterns.

    Strictly binary, never empty; deterministic for a given generator
    state.
    """
    if height < 8 or width < 8:
        raise ValueError(f"canvas {height}x{width} too small for defect patterns")
    lo, hi = n_patterns_range
    mask = np.zeros((height, width), dtype=np.uint8)
    for _ in range(64):  # retry budget against degenerate draws
        n_patterns = int(rng.integers(lo, hi + 1))
        for _ in range(n_patterns):
            ux, uy = _random_blob_polygon(rng)
            scale = rng.uniform(*scale_range) * min(height, width)
            cx = rng.uniform(0, width)
            cy = rng.uniform(0, height)
            _fill_polygon(mask, ux * scale + cx, uy * scale + cy)
        if mask.any():
            return mask
    raise AssertionError("defect mask stayed empty after 64 attempts")


def composite_anomaly(i_clean, i_defect, mask):
    """Paste ``i_defect`` over ``i_clean`` where the binary mask is set."""
    clean = np.asarray(i_clean)
    defect = np.asarray(i_defect)
    m = np.asarray(mask)
    if clean.shape != defect.shape:
        raise ValueError(f"image shapes differ: {clean.shape} vs {defect.shape}")
    if m.shape != clean.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {clean.shape}")
    if clean.ndim == 3:
        m = m[:, :, None]
    return np.where(m > 0, defect, clean)


def _forward_gradients(arr):
    """Forward differences along rows and columns, zero at the far edge."""
    gh = np.zeros_like(arr)
    gw = np.zeros_like(arr)
    gh[:-1, :] = arr[1:, :] - arr[:-1, :]
    gw[:, :-1] = arr[:, 1:] - arr[:, :-1]
    return gh, gw


def refine_loss(a_refined, a_true):
    """(l_reg, l_grad, total): L2-norm regression plus gradient-difference
    terms, each divided by the pixel count."""
    ref = np.asarray(a_refined, dtype=np.float64)
    true = np.asarray(a_true, dtype=np.float64)
    if ref.shape != true.shape:
        raise ValueError(f"map shapes differ: {ref.shape} vs {true.shape}")
    hw = ref.size
    l_reg = float(np.linalg.norm(ref - true)) / hw
    gh_r, gw_r = _forward_gradients(ref)
    gh_t, gw_t = _forward_gradients(true)
    l_grad = (float(np.linalg.norm(gh_r - gh_t)) + float(np.linalg.norm(gw_r - gw_t))) / hw
    return l_reg, l_grad, l_reg + l_grad


def normalize_map(values, lo, hi):
    """Min-max normalization into [0, 1] with clamping."""
    if not lo < hi:
        raise ValueError(f"normalization min {lo} must be < max {hi}")
    return np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def fuse_refined(a_hat, a_tilde, ratio=0.10):
    """Convex blend (1 - ratio) * a_hat + ratio * a_tilde."""
    hat = np.asarray(a_hat, dtype=np.float64)
    tilde = np.asarray(a_tilde, dtype=np.float64)
    if hat.shape != tilde.shape:
        raise ValueError(f"map shapes differ: {hat.shape} vs {tilde.shape}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"fuse ratio {ratio} outside [0, 1]")
    return (1.0 - ratio) * hat + ratio * tilde


class IdentityRefiner:
    """Pass-through refiner; the primary-only pipeline default."""

    name = "identity"

    def refine(self, image, amap):
        return np.asarray(amap, dtype=np.float64).copy()


class GroundTruthRefiner:
    """Test double that returns a fixed target map regardless of input."""

    name = "ground-truth"

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def refine(self, image, amap):
        return self.target.copy()


class CommandBridgeRefiner:
    """Runs an external command over the bridge directory protocol."""

    def __init__(self, command, bridge_dir):
        self.command = command
        self.bridge_dir = bridge_dir
        self.name = f"bridge({command})"

    def refine(self, image, amap):
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = np.stack([img] * 3)
        elif img.ndim == 3 and img.shape[2] == 3:
            img = img.transpose(2, 0, 1)
        self.bridge_dir.mkdir(parents=True, exist_ok=True)
        tensorio.write_tensor(self.bridge_dir / "input_image.pnit", img)
        tensorio.write_tensor(self.bridge_dir / "input_map.pnit", amap)
        argv = shlex.split(self.command) + [str(self.bridge_dir)]
        result = subprocess.run(argv, capture_output=True, text=True)
        if result.returncode != 0:
            raise RuntimeError(
                f"bridge command {argv} failed with code {result.returncode}: "
                f"{result.stderr.strip()}"
            )
        return tensorio.read_tensor(
            self.bridge_dir / "refined_map.pnit", strict=True
        ).astype(np.float64)


def apply_refiner(refiner, image, a_hat):
    """Run a refiner and validate its output contract."""
    amap = np.asarray(a_hat, dtype=np.float64)
    try:
        out = refiner.refine(image, amap)
    except Exception as exc:
        raise RuntimeError(f"refiner {refiner.name!r} failed: {exc}") from exc
    out = np.asarray(out, dtype=np.float64)
    if out.shape != amap.shape:
        raise RuntimeError(
            f"refiner {refiner.name!r} changed map shape {amap.shape} -> {out.shape}"
        )
    if not np.all(np.isfinite(out)):
        raise RuntimeError(f"refiner {refiner.name!r} produced non-finite values")
    return out
