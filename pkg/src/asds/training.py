"""Offline learning: patch harvesting, clustering, PCA sub-dictionaries, AR models.

Matrices of patches are stored one patch per row, shape ``(count, n)`` with
``n = patch_size**2`` in row-major pixel order.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MODEL_MAGIC = b"ASDS"
MODEL_VERSION = 1

# 3x3 neighbourhood minus the centre, row-major
AR_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))

HIGHPASS_SIGMA = 1.0
HIGHPASS_SIZE = 5


class ModelFormatError(ValueError):
    """Raised when a model file is corrupt or has an unsupported version."""


@dataclass
class PatchDataset:
    patches: np.ndarray
    features: np.ndarray
    delta: float

    def __len__(self):
        return self.patches.shape[0]


@dataclass
class LearnedModel:
    """Per-cluster centroids, PCA sub-dictionaries and AR predictors.

    ``dictionaries[k]`` is an ``(n, r_k)`` matrix with orthonormal columns,
    ``ar_models[k]`` holds 8 weights in :data:`AR_OFFSETS` order and the rows
    of ``projector`` span the dominant subspace of the centroids.
    """

    patch_size: int
    centroids: np.ndarray
    dictionaries: list
    ar_models: np.ndarray
    projector: np.ndarray
    train_patches: int = field(default=0, compare=False)
    _projected: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        k = len(self.centroids)
        if not (len(self.dictionaries) == len(self.ar_models) == k):
            raise ValueError("centroids, dictionaries and ar_models differ in length")
        n = self.patch_size ** 2
        if self.centroids.shape != (k, n) or self.projector.shape[1] != n:
            raise ValueError("inconsistent model dimensions")

    @property
    def K(self):
        return len(self.centroids)

    @property
    def n(self):
        return self.patch_size ** 2

    @property
    def ranks(self):
        return [d.shape[1] for d in self.dictionaries]

    @property
    def projected_centroids(self):
        if self._projected is None:
            self._projected = self.centroids @ self.projector.T
        return self._projected


# ---------------------------------------------------------------------------
# Features

def _gauss_taps(sigma, size):
    d = np.arange(size) - size // 2
    g = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return g / g.sum()


def smooth_patches(patches, patch_size, sigma=HIGHPASS_SIGMA, size=HIGHPASS_SIZE):
    """Separable Gaussian smoothing of each patch with mirrored borders."""
    p = patch_size
    stack = np.asarray(patches, dtype=np.float64).reshape(-1, p, p)
    g = _gauss_taps(sigma, size)
    r = size // 2
    padded = np.pad(stack, ((0, 0), (r, r), (r, r)), mode="symmetric")
    view = np.lib.stride_tricks.sliding_window_view
    tmp = view(padded, size, axis=1) @ g
    out = view(tmp, size, axis=2) @ g
    return out.reshape(-1, p * p)


def highpass(patches, patch_size=None):
    """Patch minus its Gaussian-smoothed version (sigma 1, 5x5 support).

    Accepts a single patch vector or an ``(count, n)`` stack and returns the
    same shape.
    """
    arr = np.asarray(patches, dtype=np.float64)
    if patch_size is None:
        patch_size = int(round(np.sqrt(arr.shape[-1])))
    if patch_size * patch_size != arr.shape[-1]:
        raise ValueError(f"patch length {arr.shape[-1]} is not a square")
    out = arr.reshape(-1, arr.shape[-1]) - smooth_patches(arr, patch_size)
    return out.reshape(arr.shape)


# ---------------------------------------------------------------------------
# Patch harvesting

def harvest_patches(images, patch_size, delta=16.0, max_patches=None, seed=0):
    """Randomly crop patches whose population variance exceeds ``delta``.

    All patch positions of all images are visited in a seeded random order;
    the first ``max_patches`` qualifying ones are kept.
    """
    if not images:
        raise ValueError("no training images given")
    if patch_size < 3:
        raise ValueError("patch_size must be >= 3")
    p = patch_size
    view = np.lib.stride_tricks.sliding_window_view
    windows = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        if min(img.shape) < p:
            continue
        windows.append(view(img, (p, p)))
    sizes = np.array([w.shape[0] * w.shape[1] for w in windows], dtype=np.int64)
    total = int(sizes.sum())
    if total == 0:
        raise ValueError("no qualifying patches")

    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    which = np.searchsorted(offsets, order, side="right") - 1
    local = order - offsets[which]

    chunk = 65536
    kept = []
    n_kept = 0
    limit = max_patches if max_patches is not None else total
    for start in range(0, total, chunk):
        w_idx = which[start:start + chunk]
        l_idx = local[start:start + chunk]
        block = np.empty((len(w_idx), p * p))
        for j, win in enumerate(windows):
            sel = w_idx == j
            if np.any(sel):
                r, c = np.divmod(l_idx[sel], win.shape[1])
                block[sel] = win[r, c].reshape(-1, p * p)
        block = block[block.var(axis=1) > delta]
        kept.append(block[: limit - n_kept])
        n_kept += len(kept[-1])
        if n_kept >= limit:
            break
    patches = np.concatenate(kept) if kept else np.empty((0, p * p))
    if len(patches) == 0:
        raise ValueError("no qualifying patches")
    return PatchDataset(patches, highpass(patches, p), float(delta))


# ---------------------------------------------------------------------------
# Clustering

def _sq_dists(x, centroids, x_sq=None):
    if x_sq is None:
        x_sq = np.einsum("ij,ij->i", x, x)
    c_sq = np.einsum("ij,ij->i", centroids, centroids)
    d = x_sq[:, None] - 2.0 * (x @ centroids.T) + c_sq[None, :]
    return np.maximum(d, 0.0)


def _assign(x, centroids, x_sq, chunk=8192):
    labels = np.empty(len(x), dtype=np.intp)
    dist = np.empty(len(x))
    for s in range(0, len(x), chunk):
        d = _sq_dists(x[s:s + chunk], centroids, x_sq[s:s + chunk])
        labels[s:s + chunk] = np.argmin(d, axis=1)
        dist[s:s + chunk] = d[np.arange(len(d)), labels[s:s + chunk]]
    return labels, dist


def _kmeans_pp(x, k, rng, x_sq):
    m = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(m)]
    closest = _sq_dists(x, centers[:1], x_sq)[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(m, p=closest / total)
        else:
            idx = rng.integers(m)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j:j + 1], x_sq)[:, 0])
    return centers


def _means(x, labels, k):
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / counts[:, None], counts


def _lloyd(x, k, rng, max_iters, x_sq, history, refine):
    centroids = _kmeans_pp(x, k, rng, x_sq)
    labels, dist = _assign(x, centroids, x_sq)
    for _ in range(max_iters):
        centroids, counts = _means(x, labels, k)
        for j in np.flatnonzero(counts == 0):
            # re-seed an empty cluster with the point farthest from its centroid
            far = int(np.argmax(dist))
            centroids[j] = x[far]
            labels[far] = j
            dist[far] = 0.0
            centroids, counts = _means(x, labels, k)
        if history is not None:
            history.append(float(np.sum((x - centroids[labels]) ** 2)))
        new_labels, dist = _assign(x, centroids, x_sq)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    if refine:
        labels = _hartigan(x, labels, k, max_iters, history)
    centroids, _ = _means(x, labels, k)
    sse = float(np.sum((x - centroids[labels]) ** 2))
    return labels, centroids, sse


def _hartigan(x, labels, k, max_sweeps, history):
    # single-point moves that lower the SSE once the two means are updated;
    # escapes Lloyd fixpoints where a boundary point sits in the wrong cluster
    labels = labels.copy()
    centroids, counts = _means(x, labels, k)
    for _ in range(max_sweeps):
        moved = False
        for i in range(len(x)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            diff = centroids - x[i]
            d = np.einsum("ij,ij->i", diff, diff)
            gain = counts / (counts + 1.0) * d
            gain[a] = np.inf
            j = int(np.argmin(gain))
            if gain[j] < counts[a] / (counts[a] - 1.0) * d[a] * (1.0 - 1e-12):
                centroids[a] = (counts[a] * centroids[a] - x[i]) / (counts[a] - 1.0)
                centroids[j] = (counts[j] * centroids[j] + x[i]) / (counts[j] + 1.0)
                counts[a] -= 1.0
                counts[j] += 1.0
                labels[i] = j
                moved = True
        if history is not None:
            cents, _ = _means(x, labels, k)
            history.append(float(np.sum((x - cents[labels]) ** 2)))
        if not moved:
            break
        centroids, counts = _means(x, labels, k)
    return labels


def kmeans(features, K, seed=0, max_iters=100, n_init=1, history=None, refine=False):
    """Lloyd's algorithm with k-means++ seeding.

    Parameters
    ----------
    features : ndarray, shape (m, d)
        One sample per row.
    K : int
        Number of clusters.
    seed : int
        Seed for the k-means++ draws.
    max_iters : int
        Cap on Lloyd iterations; the loop stops earlier at an assignment
        fixpoint.
    n_init : int
        Independent seedings; the run with the lowest within-cluster SSE is
        returned.
    history : list, optional
        If given, the within-cluster SSE after every centroid update of the
        returned run is appended to it.
    refine : bool
        Follow Lloyd's iterations with Hartigan single-point moves, which
        only ever lower the SSE. Slow on large inputs (one Python-level pass
        per point per sweep).

    Returns
    -------
    labels : ndarray of int, shape (m,)
    centroids : ndarray, shape (K, d)
        Mean of the members of each cluster under ``labels``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > len(x):
        raise ValueError(f"K={K} exceeds number of samples {len(x)}")
    rng = np.random.default_rng(seed)
    x_sq = np.einsum("ij,ij->i", x, x)
    best = None
    for _ in range(max(1, n_init)):
        hist = [] if history is not None else None
        labels, centroids, sse = _lloyd(x, K, rng, max_iters, x_sq, hist, refine)
        if best is None or sse < best[2]:
            best = (labels, centroids, sse, hist)
    if history is not None:
        history.extend(best[3])
    return best[0], best[1]


def merge_small_clusters(features, labels, min_size):
    """Fold under-populated clusters into their nearest neighbours.

    Repeatedly takes the smallest cluster with fewer than ``min_size``
    members (lowest index on ties) and moves its members to the cluster whose
    centroid is closest to its own; the absorbing centroid becomes the mean of
    the merged membership. Stops when every cluster is large enough or only
    one remains. Surviving clusters keep their relative order and are
    relabelled ``0..K'-1``.

    Returns
    -------
    labels : ndarray of int
    centroids : ndarray, shape (K', d)
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels, dtype=np.intp).copy()
    ids = list(np.unique(labels))
    if not ids:
        raise ValueError("no clusters to merge")
    members = {k: np.flatnonzero(labels == k) for k in ids}
    cents = {k: x[members[k]].mean(axis=0) for k in ids}
    while len(ids) > 1:
        small = [k for k in ids if len(members[k]) < min_size]
        if not small:
            break
        src = min(small, key=lambda k: (len(members[k]), k))
        others = [k for k in ids if k != src]
        d = [np.sum((cents[src] - cents[k]) ** 2) for k in others]
        dst = others[int(np.argmin(d))]
        members[dst] = np.sort(np.concatenate([members[dst], members[src]]))
        cents[dst] = x[members[dst]].mean(axis=0)
        ids.remove(src)
        del members[src], cents[src]
    out = np.empty_like(labels)
    for new, k in enumerate(ids):
        out[members[k]] = new
    return out, np.stack([cents[k] for k in ids])


# ---------------------------------------------------------------------------
# Per-cluster models

def _oriented(vecs):
    # deterministic sign: largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def principal_axes(patches):
    """Eigenvectors of ``S^T S / m`` (no centring), by decreasing eigenvalue."""
    s = np.asarray(patches, dtype=np.float64)
    cov = s.T @ s / len(s)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    return vals[order], _oriented(vecs[:, order])


def rank_objective(patches, axes, lambda_rank):
    """Representation cost of keeping the first ``r`` axes, for ``r = 1..n``.

    ``F(r) = ||S - P_r P_r^T S||_F^2 + lambda_rank * ||P_r^T S||_1``. Because
    ``axes`` is a complete orthonormal basis the residual equals the energy
    of the discarded coefficients, which avoids forming ``P_r P_r^T S``.
    """
    z = np.asarray(patches, dtype=np.float64) @ axes
    energy = np.sum(z * z, axis=0)
    l1 = np.sum(np.abs(z), axis=0)
    tail = np.concatenate([np.cumsum(energy[::-1])[::-1][1:], [0.0]])
    return tail + lambda_rank * np.cumsum(l1)


def learn_subdictionary(patches, lambda_rank=0.5):
    """Leading principal axes of a cluster, truncated at the cost-minimizing rank.

    Returns the ``(n, r_o)`` atom matrix; ties in the cost pick the smaller rank.
    """
    s = np.asarray(patches, dtype=np.float64)
    if s.ndim != 2 or len(s) == 0:
        raise ValueError("need at least one patch")
    _, axes = principal_axes(s)
    cost = rank_objective(s, axes, lambda_rank)
    r_o = int(np.argmin(cost)) + 1
    return np.ascontiguousarray(axes[:, :r_o])


def ar_training_pairs(patches, patch_size):
    """(targets, neighbours) for every interior pixel of every patch."""
    p = patch_size
    stack = np.asarray(patches, dtype=np.float64).reshape(-1, p, p)
    targets = stack[:, 1:-1, 1:-1].reshape(-1)
    q = np.stack(
        [stack[:, 1 + dr:p - 1 + dr, 1 + dc:p - 1 + dc].reshape(-1) for dr, dc in AR_OFFSETS],
        axis=1,
    )
    return targets, q


def learn_ar_model(patches, patch_size):
    """Least-squares 8-neighbour predictor pooled over all interior pixels.

    The normal equations are damped by ``1e-6 * trace / 8`` on the diagonal so
    rank-deficient clusters (e.g. flat patches) stay solvable.
    """
    if patch_size < 3:
        raise ValueError("patch_size must be >= 3")
    t, q = ar_training_pairs(patches, patch_size)
    gram = q.T @ q
    rhs = q.T @ t
    damp = 1e-6 * np.trace(gram) / 8.0
    if damp == 0.0:
        return np.zeros(8)
    return np.linalg.solve(gram + damp * np.eye(8), rhs)


def build_projector(centroids, energy_fraction=0.95, max_dim=16, min_dim=3):
    """Rows spanning the dominant subspace of the (centred) centroid set.

    Keeps the fewest leading eigenvectors whose eigenvalues reach
    ``energy_fraction`` of the total, clamped to
    ``[min_dim, min(max_dim, K - 1, n)]``.
    """
    u = np.asarray(centroids, dtype=np.float64)
    k, n = u.shape
    if k < 2:
        raise ValueError("need at least two centroids")
    centred = u - u.mean(axis=0)
    vals, vecs = np.linalg.eigh(centred.T @ centred / k)
    vals = np.clip(vals[::-1], 0.0, None)
    vecs = _oriented(vecs[:, ::-1])
    total = vals.sum()
    if total > 0:
        frac = np.cumsum(vals) / total
        c = int(np.searchsorted(frac, energy_fraction - 1e-12)) + 1
    else:
        c = 1
    upper = min(max_dim, k - 1, n)
    c = min(max(c, min_dim), upper)
    return np.ascontiguousarray(vecs[:, :c].T)


# ---------------------------------------------------------------------------
# Full pipeline

@dataclass
class TrainConfig:
    patch_size: int = 7
    delta: float = 16.0
    clusters: int = 200
    min_cluster: int = 300
    lambda_rank: float = 0.5
    max_patches: int = 100_000
    kmeans_iters: int = 100
    kmeans_refine: bool = False
    energy_fraction: float = 0.95
    seed: int = 0


def train(images, config=None):
    """Learn a :class:`LearnedModel` from a list of training images."""
    cfg = config or TrainConfig()
    data = harvest_patches(images, cfg.patch_size, cfg.delta, cfg.max_patches, cfg.seed)
    log.info("harvested %d patches (variance > %g)", len(data), cfg.delta)
    k = min(cfg.clusters, len(data))
    labels, _ = kmeans(data.features, k, seed=cfg.seed, max_iters=cfg.kmeans_iters,
                       refine=cfg.kmeans_refine)
    labels, centroids = merge_small_clusters(data.features, labels, cfg.min_cluster)
    log.info("%d clusters after merging (min size %d)", len(centroids), cfg.min_cluster)

    dictionaries, ar = [], []
    for j in range(len(centroids)):
        members = data.patches[labels == j]
        dictionaries.append(learn_subdictionary(members, cfg.lambda_rank))
        ar.append(learn_ar_model(members, cfg.patch_size))
    if len(centroids) >= 2:
        projector = build_projector(centroids, cfg.energy_fraction)
    else:
        # a single cluster makes selection trivial; any unit row will do
        projector = np.eye(1, cfg.patch_size ** 2)
    return LearnedModel(cfg.patch_size, centroids, dictionaries, np.array(ar), projector,
                        train_patches=len(data))


# ---------------------------------------------------------------------------
# Serialization

def model_to_bytes(model):
    n = model.n
    c = model.projector.shape[0]
    parts = [
        MODEL_MAGIC,
        struct.pack("<HHIII", MODEL_VERSION, model.patch_size, model.K, c, n),
        np.ascontiguousarray(model.projector, dtype="<f8").tobytes(),
    ]
    for k in range(model.K):
        atoms = model.dictionaries[k]
        parts.append(np.ascontiguousarray(model.centroids[k], dtype="<f8").tobytes())
        parts.append(struct.pack("<I", atoms.shape[1]))
        # atom by atom
        parts.append(np.ascontiguousarray(atoms.T, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(model.ar_models[k], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(buf):
    if len(buf) < 24 or buf[:4] != MODEL_MAGIC:
        raise ModelFormatError("not an ASDS model file")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ModelFormatError("checksum mismatch")
    version, p, k, c, n = struct.unpack_from("<HHIII", body, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    if n != p * p:
        raise ModelFormatError("projector width does not match patch size")
    pos = 20

    def take(count):
        nonlocal pos
        end = pos + 8 * count
        if end > len(body):
            raise ModelFormatError("truncated model file")
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos = end
        return arr

    projector = take(c * n).reshape(c, n)
    centroids, dictionaries, ar = [], [], []
    for _ in range(k):
        centroids.append(take(n))
        if pos + 4 > len(body):
            raise ModelFormatError("truncated model file")
        (r,) = struct.unpack_from("<I", body, pos)
        pos += 4
        dictionaries.append(np.ascontiguousarray(take(n * r).reshape(r, n).T))
        ar.append(take(8))
    if pos != len(body):
        raise ModelFormatError("trailing bytes in model file")
    return LearnedModel(p, np.array(centroids).reshape(k, n), dictionaries,
                        np.array(ar).reshape(k, 8), projector)


def save_model(model, path):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
