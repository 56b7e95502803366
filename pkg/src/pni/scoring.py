"""Conditional-likelihood anomaly scoring and map post-processing.

A position's likelihood is the best surviving coreset explanation: over
every distribution-coreset element whose prior clears the threshold, take
exp(-lambda * distance) to the closest usable embedding-coreset vector,
and keep the max. The anomaly score is the negative log of that, which
collapses to lambda times the smallest surviving distance; both forms are
implemented and must agree.

Post-processing follows the pipeline order: bilinear upsample to input
resolution, then Gaussian smoothing with a kernel truncated at radius
ceil(4 * sigma) and renormalized, reflected at borders.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import coreset as cs
from . import distmodel as dm


@dataclass
class ScoreParams:
    lam: float = 1.0
    tau: float | None = None          # defaults to 1 / (2 * |C_dist|)
    sigma: float = 8.0
    eq7_mode: str = "voronoi"         # or "literal"

    def resolve_tau(self, n_dist):
        tau = 1.0 / (2.0 * n_dist) if self.tau is None else self.tau
        if not 0.0 < tau < 1.0 / n_dist:
            raise ValueError(f"tau {tau} outside (0, 1/|C_dist|)")
        return tau

    def validate(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.eq7_mode not in ("voronoi", "literal"):
            raise ValueError(f"unknown eq7_mode {self.eq7_mode!r}")


@dataclass
class AnomalyMap:
    scores: np.ndarray
    image_score: float


def threshold_fn(x, tau):
    """1 where x strictly exceeds tau, else 0. Elementwise on arrays."""
    return (np.asarray(x) > tau).astype(np.float64)


def literal_anchor_vectors(c_dist_vectors, c_emb_vectors):
    """Per C_dist element, the nearest embedding-coreset vector.

    This is the test-feature-independent anchor; whenever C_dist is a
    subset of C_emb it is the element itself.
    """
    idx = cs.nearest_indices(c_dist_vectors, c_emb_vectors)
    return c_emb_vectors[idx]


def _surviving(prior_vector, tau):
    survive = np.asarray(prior_vector) > tau
    if not survive.any():
        raise AssertionError(
            "no coreset element survived the prior threshold; "
            "tau must stay below 1/|C_dist|"
        )
    return survive


def feature_likelihood(phi, prior_vector, c_dist_vectors, c_emb_vectors,
                       voronoi, params: ScoreParams):
    """Likelihood of one feature vector given its prior, in (0, 1]."""
    params.validate()
    k = c_dist_vectors.shape[0]
    tau = params.resolve_tau(k)
    survive = _surviving(prior_vector, tau)
    dists = _candidate_distances(
        np.asarray(phi, dtype=np.float64)[None, :],
        c_dist_vectors, c_emb_vectors, voronoi, params.eq7_mode,
    )[0]
    return float(np.exp(-params.lam * dists[survive].min()))


def _candidate_distances(queries, c_dist_vectors, c_emb_vectors, voronoi, mode):
    """(nq, K) distance from each query to each C_dist element's anchor:
    the nearest member of its Voronoi cell, or the literal fixed anchor."""
    k = c_dist_vectors.shape[0]
    if mode == "literal":
        anchors = literal_anchor_vectors(c_dist_vectors, c_emb_vectors)
        return np.sqrt(cs.pairwise_sq_dists(queries, anchors))
    sq = cs.pairwise_sq_dists(queries, c_emb_vectors)
    out = np.empty((queries.shape[0], k))
    for c in range(k):
        members = np.flatnonzero(voronoi == c)
        out[:, c] = sq[:, members].min(axis=1)
    return np.sqrt(out)


@dataclass
class FittedModels:
    """Everything scoring needs: coresets, priors, and parameters."""

    c_emb_vectors: np.ndarray
    c_dist_vectors: np.ndarray
    voronoi: np.ndarray
    histogram: dm.PositionHistogram | None
    network: object | None
    neighborhood_p: int
    params: ScoreParams = field(default_factory=ScoreParams)
    use_position: bool = True
    use_neighbor: bool = True


def position_priors(models: FittedModels, featmap):
    """(h*w, K) combined prior at every position of a test map."""
    d, h, w = featmap.shape
    k = models.c_dist_vectors.shape[0]
    use_pos = models.use_position and models.histogram is not None
    use_nb = models.use_neighbor and models.network is not None
    if use_pos:
        if models.histogram.grid_shape != (h, w):
            raise ValueError(
                f"test map {h}x{w} does not match trained grid {models.histogram.grid_shape}"
            )
        hist_probs = models.histogram.probs.reshape(h * w, k)
    if use_nb:
        neigh = dm.neighborhood_matrix(featmap, models.neighborhood_p)
        mlp_probs = dm.mlp_forward(models.network, neigh)
    if use_pos and use_nb:
        return dm.combined_prior(hist_probs, mlp_probs)
    if use_pos:
        return hist_probs
    if use_nb:
        return mlp_probs
    return np.full((h * w, k), 1.0 / k)


def score_map(featmap, models: FittedModels):
    """Negative-log-likelihood score per position, plus the image score
    (max over positions), at feature resolution."""
    models.params.validate()
    d, h, w = featmap.shape
    if models.c_emb_vectors.shape[1] != d:
        raise ValueError(
            f"feature dim {d} does not match coreset dim {models.c_emb_vectors.shape[1]}"
        )
    k = models.c_dist_vectors.shape[0]
    tau = models.params.resolve_tau(k)
    priors = position_priors(models, featmap)
    flat = featmap.reshape(d, h * w).T
    dists = _candidate_distances(
        flat, models.c_dist_vectors, models.c_emb_vectors, models.voronoi,
        models.params.eq7_mode,
    )
    survive = priors > tau
    rows_ok = survive.any(axis=1)
    if not rows_ok.all():
        raise AssertionError("prior threshold left a position with no candidates")
    masked = np.where(survive, dists, np.inf)
    scores = models.params.lam * masked.min(axis=1)
    grid = scores.reshape(h, w)
    return AnomalyMap(scores=grid, image_score=float(grid.max()))


# -- post-processing ----------------------------------------------------------


def upsample_bilinear(values, out_h, out_w):
    """Half-pixel-center bilinear interpolation of a 2-D map to (out_h, out_w)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D map")
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be at least 1x1")
    in_h, in_w = arr.shape
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    ylo, yhi, wy = axis_coords(out_h, in_h)
    xlo, xhi, wx = axis_coords(out_w, in_w)
    top = arr[ylo][:, xlo] * (1 - wx) + arr[ylo][:, xhi] * wx
    bot = arr[yhi][:, xlo] * (1 - wx) + arr[yhi][:, xhi] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def gaussian_kernel(sigma):
    """Normalized 1-D Gaussian taps truncated at radius ceil(4 * sigma)."""
    radius = int(np.ceil(4.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _reflect_indices(n, radius):
    """Index map of length n + 2*radius mirroring about the edges."""
    idx = np.arange(-radius, n + radius)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def gaussian_smooth(values, sigma):
    """Separable Gaussian convolution with reflected borders; identity at
    sigma == 0."""
    arr = np.asarray(values, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return arr.copy()
    kernel = gaussian_kernel(sigma)
    radius = len(kernel) // 2

    def convolve_rows(a):
        idx = _reflect_indices(a.shape[1], radius)
        padded = a[:, idx]
        out = np.zeros_like(a)
        for t, wgt in enumerate(kernel):
            out += wgt * padded[:, t:t + a.shape[1]]
        return out

    return convolve_rows(convolve_rows(arr).T).T


def postprocess_map(scores, out_h, out_w, sigma):
    """Upsample a feature-resolution map to image resolution and smooth it."""
    return gaussian_smooth(upsample_bilinear(scores, out_h, out_w), sigma)


def ensemble_average(maps):
    """Elementwise mean of same-shape maps (inputs already in [0, 1])."""
    stack = list(maps)
    if not stack:
        raise ValueError("no maps to ensemble")
    shape = np.asarray(stack[0]).shape
    for m in stack[1:]:
        if np.asarray(m).shape != shape:
            raise ValueError("ensemble maps must share one shape")
    return np.mean(np.stack([np.asarray(m, dtype=np.float64) for m in stack]), axis=0)
