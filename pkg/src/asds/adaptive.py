"""Per-patch adaptive components: sub-dictionary selection, non-local search,
AR/non-local regularization matrices and reweighted sparsity weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .training import AR_OFFSETS, highpass

__all__ = [
    "NLConfig",
    "NLNeighborhood",
    "PatchCoder",
    "select_cluster",
    "select_clusters",
    "find_similar",
    "search_similar",
    "nl_weights",
    "host_patches",
    "build_A",
    "build_B",
    "estimate_sigma",
    "similar_code_spread",
    "compute_lambda",
]


# ---------------------------------------------------------------------------
# Sub-dictionary / AR model selection

def select_clusters(patches, model, chunk=1024):
    """Cluster index for each row of ``patches``.

    Distances between high-pass features and centroids are measured after
    projection onto the centroid subspace; ties go to the lowest index.
    """
    arr = np.asarray(patches, dtype=np.float64).reshape(-1, model.n)
    feats = highpass(arr, model.patch_size) @ model.projector.T
    cents = model.projected_centroids
    out = np.empty(len(feats), dtype=np.intp)
    for s in range(0, len(feats), chunk):
        diff = feats[s:s + chunk, None, :] - cents[None, :, :]
        out[s:s + chunk] = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
    return out


def select_cluster(patch, model):
    return int(select_clusters(np.asarray(patch)[None, :], model)[0])


class PatchCoder:
    """Analysis/synthesis with a per-patch choice of sub-dictionary.

    Codes are kept in an ``(N, r_max)`` array; entries past the rank of a
    patch's dictionary are identically zero (see :attr:`mask`).
    """

    def __init__(self, assignment, model):
        self.assignment = np.asarray(assignment, dtype=np.intp)
        self.dictionaries = model.dictionaries
        self.n = model.n
        ranks = np.array(model.ranks)[self.assignment]
        self.r_max = int(ranks.max())
        self.mask = np.arange(self.r_max)[None, :] < ranks[:, None]
        self.groups = [(k, np.flatnonzero(self.assignment == k))
                       for k in np.unique(self.assignment)]

    def analyze(self, patches):
        codes = np.zeros((len(self.assignment), self.r_max))
        for k, idx in self.groups:
            phi = self.dictionaries[k]
            codes[idx, : phi.shape[1]] = patches[idx] @ phi
        return codes

    def synthesize(self, codes):
        out = np.empty((len(self.assignment), self.n))
        for k, idx in self.groups:
            phi = self.dictionaries[k]
            out[idx] = codes[idx, : phi.shape[1]] @ phi.T
        return out

    def analyze_similar(self, stacks):
        """Codes of ``(N, L, n)`` patch stacks, each under its row's dictionary."""
        codes = np.zeros(stacks.shape[:2] + (self.r_max,))
        for k, idx in self.groups:
            phi = self.dictionaries[k]
            codes[idx, :, : phi.shape[1]] = stacks[idx] @ phi
        return codes


# ---------------------------------------------------------------------------
# Non-local search

@dataclass
class NLConfig:
    """Similar-patch search settings.

    ``cutoff`` is an optional hard bound on squared patch distance; ``h``
    fixes the weight bandwidth instead of the adaptive mean-distance rule.
    """

    count: int = 10
    search_radius: int = 12
    cutoff: float | None = None
    h: float | None = None

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("NL count must be >= 1")
        if self.search_radius < 1:
            raise ValueError("NL search radius must be >= 1")


@dataclass
class NLNeighborhood:
    """Similar patches for a set of grid patches.

    ``anchors[i, l]`` is the top-left pixel of the ``l``-th most similar
    patch, ``distances[i, l]`` its squared L2 distance and ``weights[i, l]``
    its prediction weight. Slots beyond the available candidates are marked
    ``False`` in ``valid`` and carry zero weight.
    """

    anchors: np.ndarray
    distances: np.ndarray
    weights: np.ndarray
    valid: np.ndarray


def _window_offsets(radius):
    d = np.arange(-radius, radius + 1)
    dr, dc = np.meshgrid(d, d, indexing="ij")
    keep = (dr != 0) | (dc != 0)
    return np.stack([dr[keep], dc[keep]], axis=1)


def search_similar(estimate, grid, cfg, patches=None):
    """Find the ``cfg.count`` nearest patches (stride 1) inside the search window.

    Candidates are every patch position within ``cfg.search_radius`` pixels
    (per axis) of the centre patch's anchor, excluding the patch itself.
    Neighbours come back sorted by distance, ties broken by window scan
    order. If the cutoff removes every candidate, the closest one is kept.
    """
    x = np.asarray(estimate, dtype=np.float64)
    if x.shape != grid.shape:
        raise ValueError("estimate does not match grid")
    if patches is None:
        patches = np.arange(grid.patch_count)
    patches = np.asarray(patches, dtype=np.intp)
    p = grid.patch_size
    nc = len(grid.cols)
    ar = grid.rows[patches // nc]
    ac = grid.cols[patches % nc]
    max_r, max_c = grid.height - p, grid.width - p

    offsets = _window_offsets(cfg.search_radius)
    dist = np.full((len(patches), len(offsets)), np.inf)
    for j, (dr, dc) in enumerate(offsets):
        cr, cc = ar + dr, ac + dc
        ok = (cr >= 0) & (cr <= max_r) & (cc >= 0) & (cc <= max_c)
        if not np.any(ok):
            continue
        sq = (x - np.roll(x, (-dr, -dc), axis=(0, 1))) ** 2
        r0, c0 = ar[ok], ac[ok]
        acc = np.zeros(len(r0))
        for u in range(p):
            for v in range(p):
                acc += sq[r0 + u, c0 + v]
        dist[ok, j] = acc

    order = np.argsort(dist, axis=1, kind="stable")[:, : cfg.count]
    d_sel = np.take_along_axis(dist, order, axis=1)
    valid = np.isfinite(d_sel)
    if cfg.cutoff is not None:
        valid &= d_sel <= cfg.cutoff
        valid[:, 0] |= np.isfinite(d_sel[:, 0])
    if not np.all(valid[:, 0]):
        raise ValueError("search window contains no candidate patches")
    anchors = np.stack(
        [ar[:, None] + offsets[order, 0], ac[:, None] + offsets[order, 1]], axis=-1
    )
    d_sel = np.where(valid, d_sel, np.inf)
    weights = nl_weights(d_sel, cfg.h, valid)
    return NLNeighborhood(anchors, d_sel, weights, valid)


def find_similar(estimate, grid, center_patch, cfg):
    """Neighbours of one grid patch: ``(anchors (L, 2), distances (L,))``."""
    if not 0 <= center_patch < grid.patch_count:
        raise IndexError(f"patch index {center_patch} out of range")
    nb = search_similar(estimate, grid, cfg, [center_patch])
    keep = nb.valid[0]
    return nb.anchors[0][keep], nb.distances[0][keep]


def nl_weights(distances, h=None, valid=None):
    """Normalized ``exp(-e / h)`` weights, row-wise for 2-D input.

    With ``h=None`` the bandwidth is the mean of the row's distances,
    floored at 1e-8.
    """
    d = np.asarray(distances, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    if valid is None:
        valid = np.ones(d.shape, dtype=bool)
    valid = np.atleast_2d(valid)
    dz = np.where(valid, d, 0.0)
    if np.any(dz < 0):
        raise ValueError("distances must be non-negative")
    if h is None:
        hh = np.maximum(dz.sum(axis=1) / valid.sum(axis=1), 1e-8)[:, None]
    else:
        hh = float(h)
    dmin = np.min(np.where(valid, d, np.inf), axis=1, keepdims=True)
    w = np.where(valid, np.exp(-(dz - dmin) / hh), 0.0)
    w /= w.sum(axis=1, keepdims=True)
    return w[0] if single else w


# ---------------------------------------------------------------------------
# Regularization matrices

def _nearest(centers, length):
    pos = np.arange(length)
    return np.argmin(np.abs(pos[:, None] - centers[None, :]), axis=1)


def host_patches(grid):
    """Patch whose centre is nearest to each pixel, and the pixel's offset from it.

    The grid is a Cartesian product, so the nearest centre is found per axis;
    ties resolve to the earlier patch in scan order.

    Returns
    -------
    host : ndarray of int, shape (H, W)
    dr, dc : ndarray of int, shape (H, W)
    """
    half = grid.patch_size // 2
    rc = grid.rows + half
    cc = grid.cols + half
    ir = _nearest(rc, grid.height)
    ic = _nearest(cc, grid.width)
    host = ir[:, None] * len(grid.cols) + ic[None, :]
    dr = np.arange(grid.height)[:, None] - rc[ir][:, None]
    dc = np.arange(grid.width)[None, :] - cc[ic][None, :]
    dr, dc = np.broadcast_arrays(dr, dc)
    return host, dr.copy(), dc.copy()


def build_A(assignment, model, grid):
    """Sparse AR prediction matrix: ``(A x)[i] = a_{k(i)}^T (8 neighbours of i)``.

    Each pixel uses the AR model of its host patch; neighbours wrap around
    the image border.
    """
    h, w = grid.shape
    host, _, _ = host_patches(grid)
    coeffs = np.asarray(model.ar_models)[np.asarray(assignment)[host.ravel()]]
    yy, xx = np.divmod(np.arange(h * w), w)
    cols = np.stack(
        [((yy + dr) % h) * w + (xx + dc) % w for dr, dc in AR_OFFSETS], axis=1
    )
    rows = np.repeat(np.arange(h * w), 8)
    return sp.csr_matrix((coeffs.ravel(), (rows, cols.ravel())), shape=(h * w, h * w))


def build_B(neighborhood, grid):
    """Sparse non-local prediction matrix.

    Pixel ``i`` sits at offset ``delta`` from the centre of its host patch; it
    is predicted from the pixels at the same offset inside each of the host
    patch's similar patches, weighted by the non-local weights.
    """
    h, w = grid.shape
    host, dr, dc = host_patches(grid)
    host = host.ravel()
    half = grid.patch_size // 2
    anchors = neighborhood.anchors[host]
    weights = neighborhood.weights[host]
    valid = neighborhood.valid[host]
    r = anchors[..., 0] + half + dr.ravel()[:, None]
    c = anchors[..., 1] + half + dc.ravel()[:, None]
    rows = np.broadcast_to(np.arange(h * w)[:, None], valid.shape)
    return sp.csr_matrix(
        (weights[valid], (rows[valid], (r * w + c)[valid])), shape=(h * w, h * w)
    )


# ---------------------------------------------------------------------------
# Reweighting

def estimate_sigma(codes):
    """Per-coefficient population standard deviation across similar patches.

    ``codes`` has one similar patch per row. Fewer than two rows gives zeros.
    """
    c = np.asarray(codes, dtype=np.float64)
    if c.ndim == 1:
        c = c[:, None]
    if len(c) < 2:
        return np.zeros(c.shape[1])
    return c.std(axis=0)


def similar_code_spread(estimate, grid, coder, neighborhood):
    """:func:`estimate_sigma` for every grid patch at once, shape ``(N, r_max)``."""
    x = np.asarray(estimate, dtype=np.float64)
    p = grid.patch_size
    win = np.lib.stride_tricks.sliding_window_view(x, (p, p))
    a = neighborhood.anchors
    stacks = win[a[..., 0], a[..., 1]].reshape(a.shape[0], a.shape[1], p * p)
    codes = coder.analyze_similar(stacks)
    m = neighborhood.valid[..., None].astype(np.float64)
    cnt = m.sum(axis=1)
    mean = (codes * m).sum(axis=1) / cnt
    var = (((codes - mean[:, None, :]) ** 2) * m).sum(axis=1) / cnt
    sigma = np.sqrt(var)
    sigma[cnt[:, 0] < 2] = 0.0
    return np.where(coder.mask, sigma, 0.0)


def compute_lambda(sigma_hat, sigma_n, eps=0.1):
    """Sparsity weights ``2*sqrt(2)*sigma_n**2 / (sigma_hat + eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    s = np.asarray(sigma_hat, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("sigma_hat must be non-negative")
    return 2.0 * math.sqrt(2.0) * sigma_n * sigma_n / (s + eps)
