import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asds import adaptive as ad
from asds import training as tr
from asds.imaging import PatchGrid, extract_patches
from conftest import uniform_model
from oracles import brute_window_scan


# ---------------------------------------------------------------------------
# Selection

def test_select_cluster_exact_match():
    # each patch's own high-pass is one of the centroids
    rng = np.random.default_rng(0)
    n = 49
    raw = rng.normal(0, 30, (5, n))
    model = tr.LearnedModel(7, tr.highpass(raw), [np.eye(n)] * 5, np.zeros((5, 8)),
                            np.eye(n))
    for k in range(5):
        assert ad.select_cluster(raw[k], model) == k


def test_select_cluster_tie_goes_to_lowest_index():
    n = 49
    v = np.linspace(-1, 1, n)
    model = tr.LearnedModel(7, np.stack([v, -v]), [np.eye(n)] * 2, np.zeros((2, 8)),
                            np.eye(n))
    assert ad.select_cluster(np.zeros(n), model) == 0


def test_select_clusters_matches_unprojected_brute_force():
    rng = np.random.default_rng(1)
    n = 49
    cents = rng.normal(0, 20, (8, n))
    model = tr.LearnedModel(7, cents, [np.eye(n)] * 8, np.zeros((8, 8)), np.eye(n))
    patches = rng.normal(0, 40, (200, n))
    hp = tr.highpass(patches)
    expect = [int(np.argmin([np.sum((h - c) ** 2) for c in cents])) for h in hp]
    np.testing.assert_array_equal(ad.select_clusters(patches, model, chunk=17), expect)


def test_select_clusters_uses_projection():
    rng = np.random.default_rng(2)
    n = 49
    cents = rng.normal(0, 20, (6, n))
    proj = tr.build_projector(cents)
    model = tr.LearnedModel(7, cents, [np.eye(n)] * 6, np.zeros((6, 8)), proj)
    patches = rng.normal(0, 40, (50, n))
    f = tr.highpass(patches) @ proj.T
    u = cents @ proj.T
    expect = np.argmin(((f[:, None] - u[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(ad.select_clusters(patches, model), expect)


def test_patch_coder_round_trip_and_mask():
    rng = np.random.default_rng(3)
    n = 9
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    model = tr.LearnedModel(3, np.zeros((2, n)), [q, q[:, :4]], np.zeros((2, 8)),
                            np.eye(1, n))
    assign = np.array([0, 1, 0, 1, 1])
    coder = ad.PatchCoder(assign, model)
    patches = rng.normal(size=(5, n))
    codes = coder.analyze(patches)
    assert codes.shape == (5, 9)
    assert np.all(codes[~coder.mask] == 0)
    back = coder.synthesize(codes)
    np.testing.assert_allclose(back[assign == 0], patches[assign == 0], atol=1e-12)
    proj = patches[assign == 1] @ q[:, :4] @ q[:, :4].T
    np.testing.assert_allclose(back[assign == 1], proj, atol=1e-12)


# ---------------------------------------------------------------------------
# Non-local search

def test_find_similar_matches_brute_force():
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, (30, 34)).astype(float)
    grid = PatchGrid.for_image(img, 5, 2)
    cfg = ad.NLConfig(count=7, search_radius=6)
    for idx in [0, 13, grid.patch_count // 2, grid.patch_count - 1]:
        anchors, dist = ad.find_similar(img, grid, idx, cfg)
        ea, ed = brute_window_scan(img, grid, idx, 7, 6)
        np.testing.assert_array_equal(anchors, ea)
        np.testing.assert_allclose(dist, ed, rtol=1e-12)


def test_find_similar_on_constant_image_uses_scan_order():
    img = np.full((20, 20), 42.0)
    grid = PatchGrid.for_image(img, 5, 2)
    idx = grid.patch_count // 2
    anchors, dist = ad.find_similar(img, grid, idx, ad.NLConfig(count=4, search_radius=5))
    r0, c0 = grid.anchor(idx)
    np.testing.assert_array_equal(dist, 0.0)
    np.testing.assert_array_equal(anchors, [[r0 - 5, c0 - 5], [r0 - 5, c0 - 4],
                                            [r0 - 5, c0 - 3], [r0 - 5, c0 - 2]])


def test_find_similar_on_stripes_picks_same_phase():
    img = np.tile([0.0, 255.0], (24, 12))
    grid = PatchGrid.for_image(img, 5, 2)
    idx = grid.patch_count // 2
    anchors, dist = ad.find_similar(img, grid, idx, ad.NLConfig(count=10, search_radius=6))
    np.testing.assert_array_equal(dist, 0.0)
    assert np.all((anchors[:, 1] - grid.anchor(idx)[1]) % 2 == 0)


def test_search_similar_batch_matches_single():
    rng = np.random.default_rng(5)
    img = rng.random((26, 26)) * 255
    grid = PatchGrid.for_image(img, 7, 2)
    cfg = ad.NLConfig(count=5, search_radius=7)
    nb = ad.search_similar(img, grid, cfg)
    for idx in [0, 40, grid.patch_count - 1]:
        a, d = ad.find_similar(img, grid, idx, cfg)
        np.testing.assert_array_equal(nb.anchors[idx], a)
        np.testing.assert_array_equal(nb.distances[idx], d)
    np.testing.assert_allclose(nb.weights.sum(axis=1), 1.0, atol=1e-12)


def test_cutoff_keeps_at_least_the_nearest():
    rng = np.random.default_rng(6)
    img = rng.random((20, 20)) * 255
    grid = PatchGrid.for_image(img, 5, 2)
    a, d = ad.find_similar(img, grid, 10, ad.NLConfig(count=6, search_radius=5, cutoff=0.0))
    assert len(a) == 1
    full_a, full_d = ad.find_similar(img, grid, 10, ad.NLConfig(count=6, search_radius=5))
    np.testing.assert_array_equal(a[0], full_a[0])


def test_find_similar_rejects_bad_index():
    grid = PatchGrid(5, 2, 10, 10)
    with pytest.raises(IndexError):
        ad.find_similar(np.zeros((10, 10)), grid, grid.patch_count, ad.NLConfig())


def test_nl_weights_example():
    np.testing.assert_allclose(ad.nl_weights([0.0, 2.0], h=2.0), [0.7311, 0.2689], atol=1e-4)


def test_nl_weights_adaptive_bandwidth():
    d = np.array([1.0, 3.0, 5.0])
    w = np.exp(-d / 3.0)
    np.testing.assert_allclose(ad.nl_weights(d), w / w.sum(), rtol=1e-12)
    np.testing.assert_allclose(ad.nl_weights(np.zeros(4)), 0.25)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=12))
def test_nl_weights_normalized_and_monotone(dists):
    d = np.array(dists)
    w = ad.nl_weights(d)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(w >= 0)
    order = np.argsort(d, kind="stable")
    assert np.all(np.diff(w[order]) <= 1e-15)


# ---------------------------------------------------------------------------
# A and B

def test_host_patches_matches_brute_force():
    grid = PatchGrid(7, 2, 17, 20)
    host, dr, dc = ad.host_patches(grid)
    half = 3
    rc = grid.rows + half
    cc = grid.cols + half
    for i in range(17):
        for j in range(20):
            ir = min(range(len(rc)), key=lambda a: (abs(i - rc[a]), a))
            ic = min(range(len(cc)), key=lambda a: (abs(j - cc[a]), a))
            assert host[i, j] == ir * len(cc) + ic
            assert (dr[i, j], dc[i, j]) == (i - rc[ir], j - cc[ic])
            assert abs(dr[i, j]) <= half and abs(dc[i, j]) <= half


def test_A_with_uniform_ar_model():
    grid = PatchGrid(7, 2, 20, 24)
    model = uniform_model()
    A = ad.build_A(np.zeros(grid.patch_count, int), model, grid)
    np.testing.assert_allclose(np.asarray(A.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    assert np.all(np.diff(A.indptr) == 8)
    const = np.full(20 * 24, 77.0)
    np.testing.assert_allclose(const - A @ const, 0.0, atol=1e-10)


def test_A_predicts_periodic_neighbours():
    grid = PatchGrid(3, 1, 5, 6)
    coef = np.arange(1.0, 9.0)
    model = tr.LearnedModel(3, np.zeros((1, 9)), [np.eye(9)], coef[None, :], np.eye(1, 9))
    A = ad.build_A(np.zeros(grid.patch_count, int), model, grid)
    rng = np.random.default_rng(7)
    x = rng.random((5, 6))
    dense = np.zeros((5, 6))
    for i in range(5):
        for j in range(6):
            dense[i, j] = sum(a * x[(i + u) % 5, (j + v) % 6]
                              for a, (u, v) in zip(coef, tr.AR_OFFSETS))
    np.testing.assert_allclose((A @ x.ravel()).reshape(5, 6), dense, rtol=1e-12)


def test_A_with_zero_model_is_zero():
    grid = PatchGrid(7, 2, 12, 12)
    A = ad.build_A(np.zeros(grid.patch_count, int), uniform_model(ar_value=0.0), grid)
    assert np.all(A @ np.ones(144) == 0)


def test_B_rows_sum_to_one_and_annihilate_constants():
    rng = np.random.default_rng(8)
    img = rng.random((32, 30)) * 255
    grid = PatchGrid.for_image(img, 7, 2)
    nb = ad.search_similar(img, grid, ad.NLConfig(count=10, search_radius=8))
    B = ad.build_B(nb, grid)
    np.testing.assert_allclose(np.asarray(B.sum(axis=1)).ravel(), 1.0, atol=1e-10)
    const = np.full(img.size, 13.0)
    np.testing.assert_allclose(const - B @ const, 0.0, atol=1e-10)


def test_B_with_one_neighbour_is_a_selection():
    rng = np.random.default_rng(9)
    img = rng.random((16, 16))
    grid = PatchGrid.for_image(img, 5, 2)
    nb = ad.search_similar(img, grid, ad.NLConfig(count=1, search_radius=5))
    B = ad.build_B(nb, grid).toarray()
    assert np.all(np.count_nonzero(B, axis=1) == 1)
    np.testing.assert_allclose(B.max(axis=1), 1.0)


def test_B_matches_dense_oracle():
    rng = np.random.default_rng(10)
    img = rng.random((8, 8)) * 255
    grid = PatchGrid.for_image(img, 3, 2)
    nb = ad.search_similar(img, grid, ad.NLConfig(count=3, search_radius=3))
    B = ad.build_B(nb, grid).toarray()
    host, dr, dc = ad.host_patches(grid)
    dense = np.zeros((64, 64))
    for i in range(8):
        for j in range(8):
            k = host[i, j]
            for (r, c), w, ok in zip(nb.anchors[k], nb.weights[k], nb.valid[k]):
                if ok:
                    dense[i * 8 + j, (r + 1 + dr[i, j]) * 8 + (c + 1 + dc[i, j])] += w
    np.testing.assert_allclose(B, dense, atol=1e-15)


# ---------------------------------------------------------------------------
# Sparsity weights

def test_estimate_sigma():
    np.testing.assert_allclose(ad.estimate_sigma([[1.0, 5.0], [3.0, 5.0]]), [1.0, 0.0])
    np.testing.assert_array_equal(ad.estimate_sigma([[4.0, 2.0]]), [0.0, 0.0])


def test_compute_lambda_example():
    lam = ad.compute_lambda(1.0, math.sqrt(2.0), 0.1)
    assert lam == pytest.approx(2 * math.sqrt(2) * 2 / 1.1, abs=1e-12)
    assert lam == pytest.approx(5.1426, abs=1e-4)


def test_compute_lambda_validation():
    with pytest.raises(ValueError):
        ad.compute_lambda(1.0, 1.0, eps=0.0)
    with pytest.raises(ValueError):
        ad.compute_lambda(-1.0, 1.0)
    np.testing.assert_array_equal(ad.compute_lambda(np.ones(3), 0.0), 0.0)


def test_similar_code_spread_matches_per_patch():
    rng = np.random.default_rng(11)
    img = rng.random((20, 20)) * 255
    grid = PatchGrid.for_image(img, 5, 2)
    q, _ = np.linalg.qr(rng.normal(size=(25, 25)))
    model = tr.LearnedModel(5, np.zeros((2, 25)), [q, q[:, :6]], np.zeros((2, 8)),
                            np.eye(1, 25))
    assign = rng.integers(0, 2, grid.patch_count)
    coder = ad.PatchCoder(assign, model)
    nb = ad.search_similar(img, grid, ad.NLConfig(count=6, search_radius=5))
    spread = ad.similar_code_spread(img, grid, coder, nb)
    for idx in [0, 17, grid.patch_count - 1]:
        phi = model.dictionaries[assign[idx]]
        stack = np.array([img[r:r + 5, c:c + 5].ravel() for r, c in nb.anchors[idx]])
        expect = ad.estimate_sigma(stack @ phi)
        np.testing.assert_allclose(spread[idx, : phi.shape[1]], expect, rtol=1e-10, atol=1e-10)
        assert np.all(spread[idx, phi.shape[1]:] == 0)
    assert extract_patches(img, grid).shape[0] == spread.shape[0]
