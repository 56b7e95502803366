"""Memory bank construction and greedy coreset subsampling.

All normal patch features are pooled into a memory bank, then thinned
twice with k-center greedy selection: once into a large embedding coreset
used for distance computation, and once more into a small distribution
coreset that serves as the categorical support of the conditional prior.
Each embedding-coreset member is assigned to its nearest distribution
center (a Voronoi partition) so scoring can refine distances inside the
winning cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorio


@dataclass
class MemoryBank:
    """Pooled patch features. ``vectors`` is (N, d); ``provenance`` is
    (N, 3) rows of (image index, h, w)."""

    vectors: np.ndarray
    provenance: np.ndarray

    def __len__(self):
        return self.vectors.shape[0]


@dataclass
class EmbeddingCoreset:
    vectors: np.ndarray          # (M, d), subset of the bank
    bank_indices: np.ndarray     # (M,) indices into the bank
    provenance: np.ndarray       # (M, 3)


@dataclass
class DistributionCoreset:
    vectors: np.ndarray          # (K, d), subset of the embedding coreset
    emb_indices: np.ndarray      # (K,) indices into the embedding coreset
    voronoi: np.ndarray          # (M,) nearest C_dist index per C_emb member


def build_memory_bank(featmaps):
    """Flatten (d, h, w) feature maps into a bank of h*w vectors per image."""
    maps = list(featmaps)
    if not maps:
        raise ValueError("empty training set")
    d = maps[0].shape[0]
    vectors = []
    provenance = []
    for img_idx, fm in enumerate(maps):
        if fm.ndim != 3 or fm.shape[0] != d:
            raise ValueError(
                f"feature map {img_idx} has shape {fm.shape}, expected d={d} channels"
            )
        _, h, w = fm.shape
        vectors.append(fm.reshape(d, h * w).T)
        hh, ww = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        provenance.append(
            np.column_stack([np.full(h * w, img_idx), hh.ravel(), ww.ravel()])
        )
    return MemoryBank(
        vectors=np.ascontiguousarray(np.concatenate(vectors), dtype=np.float64),
        provenance=np.concatenate(provenance).astype(np.int64),
    )


def pairwise_sq_dists(queries, points):
    """Squared L2 distances, (nq, np). Clamped at 0 against rounding."""
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    sq = (q * q).sum(axis=1)[:, None] + (p * p).sum(axis=1)[None, :] - 2.0 * q @ p.T
    return np.maximum(sq, 0.0)


def nearest(query_vector, vector_set):
    """Exact nearest neighbor: (index, L2 distance). Ties pick the lowest index.

    Computed with the direct (a - b)^2 form so index and distance agree
    bit-for-bit with a per-element exhaustive scan.
    """
    points = np.asarray(vector_set, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("vector set must be a non-empty (n, d) array")
    q = np.asarray(query_vector, dtype=np.float64)
    if q.shape != (points.shape[1],):
        raise ValueError(f"query dim {q.shape} does not match set dim {points.shape[1]}")
    diff = points - q
    sq = (diff * diff).sum(axis=1)
    idx = int(np.argmin(sq))
    return idx, float(np.sqrt(sq[idx]))


def nearest_indices(queries, points, block=4096):
    """Argmin over ``points`` for each query row; ties pick the lowest index."""
    q = np.asarray(queries, dtype=np.float64)
    out = np.empty(q.shape[0], dtype=np.int64)
    for start in range(0, q.shape[0], block):
        sq = pairwise_sq_dists(q[start:start + block], points)
        out[start:start + block] = np.argmin(sq, axis=1)
    return out


def kcenter_greedy(points, target_count, seed, projection_dim=None, first_index=None):
    """Classic k-center greedy selection over row vectors.

    The first index comes from a seeded uniform draw (or ``first_index``);
    every following pick maximizes the minimum distance to the selected
    set, ties broken by lowest index. ``projection_dim`` computes
    distances in a seeded Gaussian random projection instead of the
    original space.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= target_count <= n:
        raise ValueError(f"target_count {target_count} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    if projection_dim is not None:
        proj = rng.standard_normal((pts.shape[1], projection_dim))
        proj /= np.sqrt(projection_dim)
        pts = pts @ proj
    start = int(rng.integers(n)) if first_index is None else int(first_index)
    selected = np.empty(target_count, dtype=np.int64)
    selected[0] = start
    min_sq = pairwise_sq_dists(pts, pts[start][None, :])[:, 0]
    for i in range(1, target_count):
        nxt = int(np.argmax(min_sq))
        selected[i] = nxt
        np.minimum(min_sq, pairwise_sq_dists(pts, pts[nxt][None, :])[:, 0], out=min_sq)
    return selected


def assign_voronoi(c_emb, c_dist_indices):
    """Map every embedding-coreset member to its nearest distribution center.

    ``c_dist_indices`` are indices into ``c_emb`` rows; every center maps
    to itself, so no cell is empty.
    """
    emb = np.asarray(c_emb, dtype=np.float64)
    centers_idx = np.asarray(c_dist_indices, dtype=np.int64)
    if np.any(centers_idx < 0) or np.any(centers_idx >= emb.shape[0]):
        raise ValueError("distribution coreset is not contained in the embedding coreset")
    assignment = nearest_indices(emb, emb[centers_idx])
    # A center is at distance 0 from itself; ties elsewhere in the set could
    # steal it, so pin centers to their own cell explicitly.
    assignment[centers_idx] = np.arange(len(centers_idx))
    return assignment


def subsample(bank, emb_count, dist_count, seed, projection_dim=None):
    """Build the embedding and distribution coresets from a memory bank."""
    emb_sel = kcenter_greedy(bank.vectors, emb_count, seed, projection_dim)
    c_emb = EmbeddingCoreset(
        vectors=bank.vectors[emb_sel],
        bank_indices=emb_sel,
        provenance=bank.provenance[emb_sel],
    )
    dist_sel = kcenter_greedy(c_emb.vectors, dist_count, seed + 1, projection_dim)
    voronoi = assign_voronoi(c_emb.vectors, dist_sel)
    c_dist = DistributionCoreset(
        vectors=c_emb.vectors[dist_sel],
        emb_indices=dist_sel,
        voronoi=voronoi,
    )
    return c_emb, c_dist


def save_coresets(model_dir, c_emb, c_dist):
    """Serialize both coresets as PNIT tensors plus PNII index sidecars."""
    tensorio.write_tensor(model_dir / "c_emb.pnit", c_emb.vectors)
    tensorio.write_index(
        model_dir / "c_emb.idx",
        np.column_stack([c_emb.bank_indices, c_emb.provenance]),
    )
    tensorio.write_tensor(model_dir / "c_dist.pnit", c_dist.vectors)
    tensorio.write_index(model_dir / "c_dist.idx", c_dist.emb_indices)
    tensorio.write_index(model_dir / "voronoi.idx", c_dist.voronoi)


def load_coresets(model_dir):
    emb_side = tensorio.read_index(model_dir / "c_emb.idx")
    c_emb = EmbeddingCoreset(
        vectors=tensorio.read_tensor(model_dir / "c_emb.pnit").astype(np.float64),
        bank_indices=emb_side[:, 0],
        provenance=emb_side[:, 1:],
    )
    c_dist = DistributionCoreset(
        vectors=tensorio.read_tensor(model_dir / "c_dist.pnit").astype(np.float64),
        emb_indices=tensorio.read_index(model_dir / "c_dist.idx")[:, 0],
        voronoi=tensorio.read_index(model_dir / "voronoi.idx")[:, 0],
    )
    return c_emb, c_dist
