"""Slow, obviously-correct reference implementations used to check the
vectorized code."""

import itertools

import numpy as np


def brute_convolve(img, k):
    """Direct wraparound convolution, out[p] = sum_q k[q] img[p - q]."""
    h, w = img.shape
    c = k.shape[0] // 2
    out = np.zeros_like(img)
    for r in range(h):
        for s in range(w):
            acc = 0.0
            for u in range(-c, c + 1):
                for v in range(-c, c + 1):
                    acc += k[u + c, v + c] * img[(r - u) % h, (s - v) % w]
            out[r, s] = acc
    return out


def dense_blur_decimate(kernel, shape, scale):
    """Explicit matrix of periodic convolution followed by decimation."""
    h, w = shape
    c = kernel.shape[0] // 2
    H = np.zeros((h * w, h * w))
    for i in range(h):
        for j in range(w):
            for u in range(kernel.shape[0]):
                for v in range(kernel.shape[1]):
                    src = ((i - (u - c)) % h) * w + (j - (v - c)) % w
                    H[i * w + j, src] += kernel[u, v]
    keep = [i * w + j for i in range(0, h, scale) for j in range(0, w, scale)]
    return H[keep]


def brute_kmeans_sse(x, k):
    """Lowest within-cluster SSE over every labelling of 1-D points."""
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(np.unique(labels)) < k:
            continue
        sse = sum(np.sum((x[labels == j] - x[labels == j].mean()) ** 2) for j in range(k))
        best = min(best, sse)
    return best


def brute_window_scan(img, grid, idx, count, radius):
    """Visit the search window row by row and sort candidates stably."""
    p = grid.patch_size
    r0, c0 = grid.anchor(idx)
    ref = img[r0:r0 + p, c0:c0 + p]
    cands = []
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            r, c = r0 + dr, c0 + dc
            if (dr, dc) == (0, 0) or r < 0 or c < 0 or r > grid.height - p or c > grid.width - p:
                continue
            cands.append(((r, c), float(np.sum((img[r:r + p, c:c + p] - ref) ** 2))))
    cands.sort(key=lambda t: t[1])
    cands = cands[:count]
    return np.array([a for a, _ in cands]), np.array([d for _, d in cands])


def rank_sweep(patches, axes, lambda_rank):
    """Cost of every truncation rank computed from the explicit projection."""
    out = []
    for r in range(1, axes.shape[1] + 1):
        p = axes[:, :r]
        out.append(np.sum((patches - patches @ p @ p.T) ** 2)
                   + lambda_rank * np.sum(np.abs(patches @ p)))
    return np.array(out)
