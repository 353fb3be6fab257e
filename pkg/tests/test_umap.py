import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import curve_fit
from sklearn.manifold import trustworthiness as sk_trust

from ecogscreen.umap import (FuzzyGraph, NeighborGraph, UmapConfig, calibrate_rows, embed_train_test, fit_ab,
                             fit_umap, fuzzy_simplicial_set, knn_graph, optimize_embedding,
                             smooth_knn_calibrate, transform, trustworthiness)
from scipy import sparse


def blobs(n_per, centers, scale=1.0, seed=0, dim=5):
    rng = np.random.default_rng(seed)
    C = np.asarray(centers, dtype=float)
    if C.shape[1] < dim:
        C = np.hstack([C, np.zeros((len(C), dim - C.shape[1]))])
    X = np.vstack([c + scale * rng.normal(size=(n_per, dim)) for c in C])
    y = np.repeat(np.arange(len(C)), n_per)
    return X, y


def brute_knn(X, k):
    n = len(X)
    idx = np.zeros((n, k), dtype=int)
    dist = np.zeros((n, k))
    for i in range(n):
        cand = sorted((float(np.sqrt(np.sum((X[i] - X[j]) ** 2))), j) for j in range(n) if j != i)
        idx[i] = [j for _, j in cand[:k]]
        dist[i] = [d for d, _ in cand[:k]]
    return idx, dist


FAST = UmapConfig(k=10, n_epochs=200)


# -- neighbour graph -------------------------------------------------------------

def test_knn_graph_collinear():
    g = knn_graph(np.array([[0.0], [1.0], [2.0]]), 2)
    assert sorted(g.indices[1]) == [0, 2]


def test_knn_graph_matches_brute_force():
    X = np.random.default_rng(0).normal(size=(50, 5))
    g = knn_graph(X, 10)
    idx, dist = brute_knn(X, 10)
    np.testing.assert_array_equal(g.indices, idx)
    np.testing.assert_allclose(g.distances, dist, atol=1e-12)
    assert np.all(np.diff(g.distances, axis=1) >= 0)
    assert not np.any(g.indices == np.arange(50)[:, None])


def test_knn_graph_duplicates_first():
    X = np.array([[0.0, 0], [5, 5], [0, 0], [1, 0], [0, 0]])
    g = knn_graph(X, 3)
    assert list(g.indices[0][:2]) == [2, 4]
    assert np.all(g.distances[0][:2] == 0)


def test_knn_graph_k_too_large():
    with pytest.raises(ValueError):
        knn_graph(np.zeros((5, 2)), 5)


# -- calibration -----------------------------------------------------------------

def test_calibrate_degenerate_row():
    rho, sigma = smooth_knn_calibrate(np.full(6, 2.0))
    assert rho == 2.0
    assert sigma == pytest.approx(1e-3 * 2.0)


@given(st.integers(0, 10_000))
def test_calibrate_solves_target(seed):
    d = np.sort(np.random.default_rng(seed).uniform(0.1, 5, size=4))
    rho, sigma = smooth_knn_calibrate(d)
    assert rho == d[0]
    total = np.exp(-np.maximum(0, d - rho) / sigma).sum()
    assert total == pytest.approx(np.log2(4), abs=1e-4)


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_calibrate_scale_equivariant(seed, c):
    d = np.sort(np.random.default_rng(seed).uniform(0.1, 5, size=15))
    _, s1 = smooth_knn_calibrate(d)
    _, s2 = smooth_knn_calibrate(d * c)
    assert s2 == pytest.approx(c * s1, rel=1e-6)


def test_calibrate_rows_vectorized_agrees():
    D = np.sort(np.random.default_rng(3).uniform(0, 3, size=(20, 8)), axis=1)
    rho, sigma = calibrate_rows(D)
    for i in range(20):
        r, s = smooth_knn_calibrate(D[i])
        assert (rho[i], sigma[i]) == pytest.approx((r, s))


# -- fuzzy set -------------------------------------------------------------------

def test_nearest_neighbor_weight_one():
    X = np.random.default_rng(1).normal(size=(30, 3))
    g = knn_graph(X, 5)
    fg = fuzzy_simplicial_set(g)
    W = fg.weights.toarray()
    for i in range(30):
        assert W[i, g.indices[i, 0]] == pytest.approx(1.0)


def test_union_arithmetic():
    g = NeighborGraph(np.array([[1], [0]]), np.array([[0.0], [0.0]]), 1)
    # build the union by hand for a (0.8, 0.5) directed pair
    A = sparse.csr_matrix(np.array([[0, 0.8], [0.5, 0]]))
    U = (A + A.T - A.multiply(A.T)).toarray()
    assert U[0, 1] == pytest.approx(0.9)
    assert isinstance(fuzzy_simplicial_set(g), FuzzyGraph)


@settings(max_examples=100)
@given(st.integers(0, 10_000), st.integers(12, 60), st.integers(2, 10))
def test_fuzzy_graph_properties(seed, n, k):
    X = np.random.default_rng(seed).normal(size=(n, 3))
    W = fuzzy_simplicial_set(knn_graph(X, k)).weights
    assert abs(W - W.T).max() <= 1e-12 if W.nnz else True
    assert np.all(W.data > 0) and np.all(W.data <= 1)
    assert np.all(W.diagonal() == 0)


# -- curve fit -------------------------------------------------------------------

def test_fit_ab_reference_values():
    a, b = fit_ab(0.1, 1.0)
    x = np.linspace(0, 3, 300)
    target = np.where(x <= 0.1, 1.0, np.exp(-(x - 0.1)))
    (ra, rb), _ = curve_fit(lambda x, a, b: 1 / (1 + a * x ** (2 * b)), x, target, p0=(1.5, 0.9))
    assert (a, b) == pytest.approx((ra, rb), rel=1e-3)
    assert a == pytest.approx(1.58, abs=0.05) and b == pytest.approx(0.90, abs=0.05)
    assert 1 / (1 + a * 0.0 ** (2 * b)) == 1.0


def test_fit_ab_residual_rms():
    a, b = fit_ab(0.1, 1.0)
    x = np.linspace(0, 3, 300)
    target = np.where(x <= 0.1, 1.0, np.exp(-(x - 0.1)))
    assert np.sqrt(np.mean((1 / (1 + a * x ** (2 * b)) - target) ** 2)) <= 0.01


def test_fit_ab_min_dist_monotone():
    assert fit_ab(0.5)[0] < fit_ab(0.1)[0]
    with pytest.raises(ValueError):
        fit_ab(0.1, 0.0)


# -- layout ----------------------------------------------------------------------

def test_two_blobs_separate():
    X, y = blobs(50, [[0] * 5, [10] * 5], seed=2)
    E = fit_umap(X, FAST, seed=0).embedding
    c0, c1 = E[y == 0].mean(0), E[y == 1].mean(0)
    radius = np.mean([np.linalg.norm(E[y == c] - E[y == c].mean(0), axis=1).mean() for c in (0, 1)])
    assert np.linalg.norm(c0 - c1) > 5 * radius


def test_identical_points_bounded():
    E = fit_umap(np.ones((30, 4)), FAST, seed=0).embedding
    assert np.all(np.isfinite(E))
    assert np.ptp(E, axis=0).max() < 100


def test_constant_feature_finite():
    X = np.random.default_rng(4).normal(size=(40, 3))
    X[:, 1] = 7.0
    assert np.all(np.isfinite(fit_umap(X, FAST).embedding))


def test_four_blob_trustworthiness():
    X, _ = blobs(50, np.eye(4) * 12, seed=3, dim=6)
    E = fit_umap(X, UmapConfig(), seed=0).embedding
    assert trustworthiness(X, E, 10) >= 0.95


def test_seed_determinism():
    X, _ = blobs(30, [[0] * 5, [6] * 5], seed=5)
    e1 = fit_umap(X, FAST, seed=9).embedding
    e2 = fit_umap(X, FAST, seed=9).embedding
    np.testing.assert_array_equal(e1, e2)


@settings(max_examples=5)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    X, _ = blobs(25, [[0] * 5, [6] * 5], seed=6)
    perm = np.random.default_rng(seed).permutation(len(X))
    e = fit_umap(X, FAST, seed=1).embedding
    ep = fit_umap(X[perm], FAST, seed=1).embedding
    np.testing.assert_allclose(ep, e[perm], atol=1e-12)


def test_random_init_and_errors():
    X, _ = blobs(20, [[0] * 5, [6] * 5], seed=7)
    m = fit_umap(X, UmapConfig(k=8, n_epochs=50, init="random"))
    assert m.init_used == "random" and m.a > 0 and m.b > 0
    with pytest.raises(ValueError):
        fit_umap(X, UmapConfig(init="pca"))
    with pytest.raises(ValueError):
        optimize_embedding(fuzzy_simplicial_set(knn_graph(X[:8], 3)))


def test_disconnected_graph_falls_back_to_random():
    X, _ = blobs(20, [[0] * 5, [1000] * 5], scale=0.1, seed=8)
    m = fit_umap(X, UmapConfig(k=5, n_epochs=50))
    assert m.init_used == "random"
    assert np.all(np.isfinite(m.embedding))


# -- transform -------------------------------------------------------------------

@pytest.fixture(scope="module")
def blob_model():
    X, y = blobs(60, [[0] * 5, [8] * 5, [0, 8, 0, 8, 0]], seed=10)
    return X, y, fit_umap(X, FAST, seed=2)


def test_transform_training_point(blob_model):
    X, _, m = blob_model
    E = transform(m, X[:20]).points
    assert np.all(np.linalg.norm(E - m.embedding[:20], axis=1) <= 0.5)


def test_transform_deterministic_and_frozen(blob_model):
    X, _, m = blob_model
    before = np.array(m.embedding)
    Xn = X[:15] + 0.3
    np.testing.assert_array_equal(transform(m, Xn).points, transform(m, Xn).points)
    np.testing.assert_array_equal(m.embedding, before)
    with pytest.raises(ValueError):
        m.embedding[0, 0] = 1.0


def test_transform_blob_membership(blob_model):
    X, y, m = blob_model
    Xt, yt = blobs(40, [[0] * 5, [8] * 5, [0, 8, 0, 8, 0]], seed=11)
    E = transform(m, Xt).points
    cents = np.stack([m.embedding[y == c].mean(0) for c in range(3)])
    nearest = np.argmin(np.linalg.norm(E[:, None] - cents[None], axis=2), axis=1)
    assert np.mean(nearest == yt) >= 0.95


def test_transform_dimension_mismatch(blob_model):
    with pytest.raises(ValueError):
        transform(blob_model[2], np.zeros((3, 4)))


def test_embed_train_test_modes():
    X, _ = blobs(20, [[0] * 5, [6] * 5], seed=12)
    for mode in ("transform", "refit"):
        tr, te, used = embed_train_test(X[:30], X[30:], FAST, 0, mode)
        assert tr.shape == (30, 2) and te.shape == (10, 2) and used == mode
    with pytest.raises(ValueError):
        embed_train_test(X[:30], X[30:], FAST, 0, "joint")


# -- trustworthiness -------------------------------------------------------------

def test_trust_identity_and_rotation():
    X = np.random.default_rng(13).normal(size=(60, 2))
    assert trustworthiness(X, X, 5) == pytest.approx(1.0)
    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    E = np.random.default_rng(14).normal(size=(60, 2))
    assert trustworthiness(X, E @ R.T + 3, 5) == pytest.approx(trustworthiness(X, E, 5), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_trust_matches_sklearn(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, 6))
    E = X[:, :2] + 0.5 * rng.normal(size=(80, 2))
    assert trustworthiness(X, E, 7) == pytest.approx(sk_trust(X, E, n_neighbors=7), abs=1e-12)


def test_trust_random_embedding_low():
    X, _ = blobs(50, np.eye(4) * 12, seed=15, dim=6)
    E = np.random.default_rng(16).normal(size=(200, 2))
    assert trustworthiness(X, E, 10) < 0.8


def test_trust_k_bound():
    with pytest.raises(ValueError):
        trustworthiness(np.zeros((10, 2)), np.zeros((10, 2)), 5)
