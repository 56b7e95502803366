"""Images to patch-level feature maps.

A feature hierarchy is a dict mapping level number to a (c, h, w) array
with spatial size shrinking as the level grows. The shipped extractor is
a deterministic toy: each level-j cell is a seeded random projection of
its box-filtered stride cell, clamped to [-1, 1]. Real backbone features
arrive through PNIT files instead and join the pipeline at
``merge_hierarchy``.
"""

from __future__ import annotations

import numpy as np

from .scoring import upsample_bilinear

TOY_LEVELS = (2, 3)
TOY_STRIDES = {2: 4, 3: 8}


def resize_bilinear(image, out_h, out_w):
    """Bilinear resize of a (H, W) or (H, W, C) image."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return upsample_bilinear(arr, out_h, out_w)
    return np.stack(
        [upsample_bilinear(arr[..., c], out_h, out_w) for c in range(arr.shape[2])],
        axis=2,
    )


def preprocess(image, resize_to, crop_to):
    """Bilinear resize to a square, then a centered square crop."""
    if crop_to > resize_to:
        raise ValueError(f"crop_to {crop_to} exceeds resize_to {resize_to}")
    resized = resize_bilinear(image, resize_to, resize_to)
    off = (resize_to - crop_to) // 2
    return resized[off:off + crop_to, off:off + crop_to].copy()


def _level_features(image, stride, n_channels, rng):
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    gh, gw = h // stride, w // stride
    if gh == 0 or gw == 0:
        raise ValueError(f"image {h}x{w} smaller than one stride-{stride} cell")
    cells = (
        arr[:gh * stride, :gw * stride]
        .reshape(gh, stride, gw, stride, c)
        .transpose(0, 2, 1, 3, 4)
    )
    # 2x2 box filter inside the cell keeps the receptive field exactly the cell
    boxed = 0.25 * (
        cells[:, :, :-1, :-1] + cells[:, :, 1:, :-1]
        + cells[:, :, :-1, 1:] + cells[:, :, 1:, 1:]
    )
    flat = boxed.reshape(gh, gw, -1) - 0.5
    proj = rng.standard_normal((flat.shape[2], n_channels)) / np.sqrt(flat.shape[2])
    z = flat @ proj
    return np.clip(z, -1.0, 1.0).transpose(2, 0, 1)


def extract_toy_hierarchy(image, seed, channels=(16, 32)):
    """Two-level deterministic feature hierarchy (strides 4 and 8)."""
    hier = {}
    for level, n_channels in zip(TOY_LEVELS, channels):
        rng = np.random.default_rng(np.random.SeedSequence([seed, level]))
        hier[level] = _level_features(image, TOY_STRIDES[level], n_channels, rng)
    return hier


def merge_hierarchy(hier, use_levels=(2, 3)):
    """Concatenate the requested levels along channels, resizing smaller
    levels bilinearly up to the componentwise max spatial size."""
    missing = [lv for lv in use_levels if lv not in hier]
    if missing:
        raise ValueError(f"hierarchy lacks requested levels {missing}")
    if not use_levels:
        raise ValueError("no levels requested")
    maps = [np.asarray(hier[lv], dtype=np.float64) for lv in use_levels]
    target_h = max(m.shape[1] for m in maps)
    target_w = max(m.shape[2] for m in maps)
    resized = []
    for m in maps:
        if m.shape[1:] == (target_h, target_w):
            resized.append(m)
        else:
            resized.append(
                np.stack([upsample_bilinear(ch, target_h, target_w) for ch in m])
            )
    return np.concatenate(resized, axis=0)


def _window_means(featmap, patch):
    """Clipped-window spatial means per channel via an integral image."""
    c, h, w = featmap.shape
    r = patch // 2
    integral = np.zeros((c, h + 1, w + 1))
    integral[:, 1:, 1:] = featmap.cumsum(axis=1).cumsum(axis=2)
    i0 = np.clip(np.arange(h) - r, 0, h)
    i1 = np.clip(np.arange(h) + r + 1, 0, h)
    j0 = np.clip(np.arange(w) - r, 0, w)
    j1 = np.clip(np.arange(w) + r + 1, 0, w)
    sums = (
        integral[:, i1[:, None], j1[None, :]]
        - integral[:, i0[:, None], j1[None, :]]
        - integral[:, i1[:, None], j0[None, :]]
        + integral[:, i0[:, None], j0[None, :]]
    )
    counts = (i1 - i0)[:, None] * (j1 - j0)[None, :]
    return sums / counts


def aggregate_patches(featmap, agg_patch, d):
    """Average each position's agg_patch x agg_patch neighborhood (clipped
    at borders), then adaptively pool channels down to ``d``.

    Channel pooling averages contiguous bins [floor(b*c/d), ceil((b+1)*c/d));
    when c < d the bins overlap, repeating channels.
    """
    fm = np.asarray(featmap, dtype=np.float64)
    if agg_patch % 2 == 0:
        raise ValueError(f"agg_patch {agg_patch} must be odd")
    if d < 1:
        raise ValueError("output dimension must be at least 1")
    pooled = fm if agg_patch == 1 else _window_means(fm, agg_patch)
    c = pooled.shape[0]
    if d == c:
        return pooled
    out = np.empty((d,) + pooled.shape[1:])
    for b in range(d):
        lo = (b * c) // d
        hi = -(-((b + 1) * c) // d)  # ceil
        out[b] = pooled[lo:hi].mean(axis=0)
    return out
