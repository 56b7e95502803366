"""Conditional prior over distribution-coreset indices.

Two estimators are combined: a per-position histogram of nearest
distribution-coreset indices accumulated over the whole training set, and
a network fed with the concatenated neighborhood features of a position.
Averaging the two gives the prior that scoring thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import coreset as cs
from .mlp import MlpTrainConfig, NeighborhoodMlp
from . import tensorio


@dataclass
class PositionHistogram:
    """Per-position categorical counts over C_dist indices, plus the
    normalized probabilities. ``counts`` and ``probs`` are (h, w, K)."""

    counts: np.ndarray
    probs: np.ndarray

    @property
    def grid_shape(self):
        return self.counts.shape[:2]

    @property
    def n_classes(self):
        return self.counts.shape[2]


def _check_window(p, allow_center_only=False):
    if p < 1 or p % 2 == 0:
        raise ValueError(f"neighborhood size p={p} must be a positive odd integer")
    if p < 3 and not allow_center_only:
        raise ValueError("neighborhood size p=1 has no neighbors to condition on")


def neighborhood_vector(featmap, x, p):
    """Concatenated neighbor features of position ``x`` in row-major scan
    order, center excluded; out-of-bounds slots stay zero so the length is
    always (p*p - 1) * d."""
    _check_window(p)
    d, h, w = featmap.shape
    i, j = x
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"position {x} outside {h}x{w} map")
    r = p // 2
    out = np.zeros((p * p - 1) * d)
    slot = 0
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            if di == 0 and dj == 0:
                continue
            ii, jj = i + di, j + dj
            if 0 <= ii < h and 0 <= jj < w:
                out[slot * d:(slot + 1) * d] = featmap[:, ii, jj]
            slot += 1
    return out


def neighborhood_matrix(featmap, p):
    """All neighborhood vectors of a (d, h, w) map at once, (h*w, (p*p-1)*d).

    Row-major over positions and over window slots, matching
    ``neighborhood_vector``.
    """
    _check_window(p)
    d, h, w = featmap.shape
    r = p // 2
    padded = np.zeros((d, h + 2 * r, w + 2 * r))
    padded[:, r:r + h, r:r + w] = featmap
    slots = []
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            if di == 0 and dj == 0:
                continue
            block = padded[:, r + di:r + di + h, r + dj:r + dj + w]
            slots.append(block.reshape(d, h * w).T)
    return np.concatenate(slots, axis=1)


def nearest_dist_indices(featmap, c_dist_vectors):
    """(h, w) map of each position's nearest C_dist index."""
    d, h, w = featmap.shape
    flat = featmap.reshape(d, h * w).T
    return cs.nearest_indices(flat, c_dist_vectors).reshape(h, w)


def build_position_histogram(featmaps, c_dist_vectors, p):
    """Count nearest C_dist indices in the p x p window around every
    position, over all training maps, with windows clipped at borders.

    Unlike neighborhood vectors, a center-only window (p=1) is valid here.
    """
    _check_window(p, allow_center_only=True)
    maps = list(featmaps)
    if not maps:
        raise ValueError("empty training set")
    k = c_dist_vectors.shape[0]
    h, w = maps[0].shape[1:]
    onehot_total = np.zeros((h, w, k))
    for fm in maps:
        if fm.shape[1:] != (h, w):
            raise ValueError("feature maps disagree on spatial size")
        idx = nearest_dist_indices(fm, c_dist_vectors)
        flat = onehot_total.reshape(-1, k)
        flat[np.arange(h * w), idx.ravel()] += 1.0
    r = p // 2
    counts = np.zeros_like(onehot_total)
    for di in range(-r, r + 1):
        src_i = slice(max(0, di), h + min(0, di))
        dst_i = slice(max(0, -di), h + min(0, -di))
        for dj in range(-r, r + 1):
            src_j = slice(max(0, dj), w + min(0, dj))
            dst_j = slice(max(0, -dj), w + min(0, -dj))
            counts[dst_i, dst_j] += onehot_total[src_i, src_j]
    probs = counts / counts.sum(axis=2, keepdims=True)
    return PositionHistogram(counts=counts, probs=probs)


def training_samples(featmaps, c_dist_vectors, p):
    """(neighborhood vector, center's nearest C_dist index) pairs for
    every position of every training map."""
    xs, ys = [], []
    for fm in featmaps:
        xs.append(neighborhood_matrix(fm, p))
        ys.append(nearest_dist_indices(fm, c_dist_vectors).ravel())
    return np.concatenate(xs), np.concatenate(ys)


def train_neighborhood_mlp(featmaps, c_dist_vectors, p, cfg: MlpTrainConfig,
                           hidden_width=2048, n_layers=10, temperature=2.0):
    """Fit the neighborhood prior network on all training positions.

    The label of a position is the nearest C_dist index of its own center
    feature; the input is its zero-padded neighborhood vector.
    """
    maps = list(featmaps)
    if not maps:
        raise ValueError("empty training set")
    x, y = training_samples(maps, c_dist_vectors, p)
    widths = [x.shape[1]] + [hidden_width] * (n_layers - 1) + [c_dist_vectors.shape[0]]
    net = NeighborhoodMlp(widths, seed=cfg.seed, temperature=temperature)
    net.fit(x, y, cfg)
    return net


def mlp_forward(net, inputs, temperature=None):
    """Probability vectors over C_dist for one or more neighborhood inputs."""
    arr = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if arr.shape[1] != net.input_width:
        raise ValueError(f"input width {arr.shape[1]} != expected {net.input_width}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite neighborhood input")
    probs = net.predict_proba(arr, temperature)
    return probs[0] if np.asarray(inputs).ndim == 1 else probs


def combined_prior(hist_probs, mlp_probs):
    """Average of the position prior and the neighborhood prior."""
    a = np.asarray(hist_probs, dtype=np.float64)
    b = np.asarray(mlp_probs, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"prior length mismatch: {a.shape} vs {b.shape}")
    return 0.5 * (a + b)


def save_histogram(model_dir, hist):
    h, w, k = hist.counts.shape
    tensorio.write_tensor(model_dir / "hist_counts.pnit", hist.counts.reshape(h * w, k))


def load_histogram(model_dir, grid_shape):
    h, w = grid_shape
    counts = tensorio.read_tensor(model_dir / "hist_counts.pnit").astype(np.float64)
    counts = counts.reshape(h, w, counts.shape[1])
    return PositionHistogram(counts=counts, probs=counts / counts.sum(axis=2, keepdims=True))
