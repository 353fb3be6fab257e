"""UMAP: exact k-NN graph, fuzzy simplicial set, SGD layout and out-of-sample transform.

Everything runs on a canonical (lexicographically sorted) copy of the input
and is mapped back afterwards, so permuting the rows of the input permutes
the rows of the embedding and nothing else. Random streams are per point,
keyed by the seed and the point's canonical position.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy import sparse
from scipy.optimize import curve_fit
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

SMOOTH_K_TOLERANCE = 1e-5
MIN_K_DIST_SCALE = 1e-3


@dataclass(frozen=True)
class NeighborGraph:
    indices: np.ndarray
    distances: np.ndarray
    k: int
    metric: str = "euclidean"


@dataclass(frozen=True)
class FuzzyGraph:
    weights: sparse.csr_matrix
    rho: np.ndarray
    sigma: np.ndarray

    @property
    def n(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class UmapConfig:
    k: int = 15
    min_dist: float = 0.1
    spread: float = 1.0
    n_components: int = 2
    n_epochs: int = 300
    lr: float = 1.0
    neg_rate: int = 5
    init: str = "spectral"
    transform_epochs: int = 30


@dataclass(frozen=True)
class UmapModel:
    embedding: np.ndarray
    a: float
    b: float
    config: UmapConfig
    seed: int
    init_used: str
    data: np.ndarray | None = None
    graph: FuzzyGraph | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("embedding", "data"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype=np.float64)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class Embedding:
    points: np.ndarray
    labels: np.ndarray | None = None


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def point_streams(seed: int, n: int, salt: int = 0) -> np.ndarray:
    """Independent splitmix64 states for points 0..n-1."""
    base = _mix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) ^ np.uint64(salt * 0x632BE59BD9B4E019 & 0xFFFFFFFFFFFFFFFF))[0]
    with np.errstate(over="ignore"):
        return _mix64(base + (np.arange(n, dtype=np.uint64) + np.uint64(1)) * _GOLDEN)


def _uniform(states: np.ndarray, d: int) -> np.ndarray:
    """d uniforms in [0, 1) per stream, without advancing ``states``."""
    with np.errstate(over="ignore"):
        z = _mix64(states[:, None] + np.arange(1, d + 1, dtype=np.uint64)[None, :] * _M2)
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@numba.njit(cache=True)
def _next(states, i):
    states[i] += np.uint64(0x9E3779B97F4A7C15)
    z = states[i]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


# ---------------------------------------------------------------------------
# k-NN graph
# ---------------------------------------------------------------------------

def _sq_dists(A: np.ndarray, B: np.ndarray, block: int = 1 << 22) -> np.ndarray:
    """Exact squared Euclidean distances, computed from differences in row chunks."""
    out = np.empty((A.shape[0], B.shape[0]))
    rows = max(1, block // max(1, B.shape[0] * A.shape[1]))
    for s in range(0, A.shape[0], rows):
        diff = A[s:s + rows, None, :] - B[None, :, :]
        out[s:s + rows] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _knn(A: np.ndarray, B: np.ndarray, k: int, exclude_self: bool):
    d2 = _sq_dists(A, B)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order, np.sqrt(np.take_along_axis(d2, order, axis=1))


def knn_graph(X, k: int) -> NeighborGraph:
    """Exact brute-force k nearest neighbours (self excluded, ties -> smaller index)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of points {n}")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    idx, dist = _knn(X, X, k, exclude_self=True)
    return NeighborGraph(idx, dist, k)


# ---------------------------------------------------------------------------
# fuzzy simplicial set
# ---------------------------------------------------------------------------

def calibrate_rows(distances, n_iter: int = 64, tol: float = SMOOTH_K_TOLERANCE,
                   fallback_mean: float | None = None):
    """Vectorized :func:`smooth_knn_calibrate` over rows of ascending distances.

    The bisection runs on distances divided by each row's mean, which makes
    the returned sigma exactly proportional to the distance scale.
    """
    D = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    n, k = D.shape
    target = np.log2(k)
    pos = np.where(D > 0, D, np.inf)
    rho = pos.min(axis=1)
    rho[~np.isfinite(rho)] = 0.0
    scale = D.mean(axis=1)
    zero = scale == 0
    s = np.where(zero, 1.0, scale)
    excess = np.maximum(0.0, (D - rho[:, None]) / s[:, None])

    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    mid = np.ones(n)
    active = np.ones(n, dtype=bool)
    for _ in range(n_iter):
        psum = np.exp(-excess / mid[:, None]).sum(axis=1)
        active &= np.abs(psum - target) >= tol
        if not active.any():
            break
        over = active & (psum > target)
        under = active & ~(psum > target)
        hi = np.where(over, mid, hi)
        lo = np.where(under, mid, lo)
        mid = np.where(over, (lo + hi) / 2,
                       np.where(under, np.where(np.isinf(hi), mid * 2, (lo + hi) / 2), mid))

    sigma = np.maximum(mid, MIN_K_DIST_SCALE) * s
    if zero.any():
        floor = MIN_K_DIST_SCALE * (fallback_mean if fallback_mean else 1.0)
        sigma[zero] = floor
    return rho, sigma


def smooth_knn_calibrate(row_distances, k: int | None = None):
    """Nearest-neighbour distance ``rho`` and bandwidth ``sigma`` for one point.

    sigma solves sum_j exp(-max(0, d_j - rho) / sigma) = log2(k) by bisection
    (64 steps max, tolerance 1e-5), floored at 1e-3 x the mean distance.
    """
    row = np.asarray(row_distances, dtype=np.float64)
    if k is not None and k != row.shape[0]:
        row = row[:k]
    rho, sigma = calibrate_rows(row[None, :])
    return float(rho[0]), float(sigma[0])


def membership_strengths(distances: np.ndarray, rho: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return np.exp(-np.maximum(0.0, distances - rho[:, None]) / sigma[:, None])


def fuzzy_simplicial_set(g: NeighborGraph) -> FuzzyGraph:
    """Directed memberships symmetrized by probabilistic union A + A^T - A*A^T."""
    n, k = g.indices.shape
    rho, sigma = calibrate_rows(g.distances, fallback_mean=float(g.distances.mean()))
    vals = membership_strengths(g.distances, rho, sigma)
    rows = np.repeat(np.arange(n), k)
    A = sparse.csr_matrix((vals.ravel(), (rows, g.indices.ravel())), shape=(n, n))
    At = A.T.tocsr()
    W = (A + At - A.multiply(At)).tocsr()
    W.setdiag(0.0)
    W.data = np.clip(W.data, 0.0, 1.0)
    W.eliminate_zeros()
    W.sort_indices()
    return FuzzyGraph(W, rho, sigma)


# ---------------------------------------------------------------------------
# low-dimensional curve
# ---------------------------------------------------------------------------

def _curve(x, a, b):
    return 1.0 / (1.0 + a * x ** (2 * b))


def fit_ab(min_dist: float = 0.1, spread: float = 1.0) -> tuple[float, float]:
    """Least-squares fit of 1 / (1 + a x^(2b)) to the min_dist / spread target curve."""
    if spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    xv = np.linspace(0, spread * 3, 300)
    yv = np.where(xv <= min_dist, 1.0, np.exp(-(xv - min_dist) / spread))
    (a, b), _ = curve_fit(_curve, xv, yv)
    return float(a), float(b)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def spectral_layout(W: sparse.csr_matrix, dim: int, seed: int, tol: float = 1e-6,
                    max_iter: int = 2000) -> np.ndarray | None:
    """Bottom non-trivial eigenvectors of the normalized Laplacian.

    Block power iteration on I + D^-1/2 W D^-1/2 with the trivial
    eigenvector deflated, Rayleigh-Ritz each step. Returns None for
    disconnected graphs.
    """
    n = W.shape[0]
    n_comp, _ = connected_components(W, directed=False)
    if n_comp > 1 or n <= dim + 1:
        return None
    deg = np.asarray(W.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(deg)
    N = sparse.diags(dinv) @ W @ sparse.diags(dinv)
    v0 = np.sqrt(deg)
    v0 /= np.linalg.norm(v0)

    def op(V):
        return V + N @ V

    V = _uniform(point_streams(seed, n, salt=7), dim) - 0.5
    V -= np.outer(v0, v0 @ V)
    V, _ = np.linalg.qr(V)
    for it in range(max_iter):
        Z = op(V)
        Z -= np.outer(v0, v0 @ Z)
        T = V.T @ Z
        evals, evecs = np.linalg.eigh((T + T.T) / 2)
        order = np.argsort(evals)[::-1]
        V = V @ evecs[:, order]
        Z = Z @ evecs[:, order]
        resid = np.linalg.norm(Z - V * evals[order], axis=0).max()
        if resid < tol:
            break
        V, _ = np.linalg.qr(Z)
    else:
        log.debug("spectral layout: residual %.2e after %d iterations", resid, max_iter)
    # deterministic sign: largest-magnitude entry positive
    signs = np.sign(V[np.abs(V).argmax(axis=0), np.arange(dim)])
    return V * np.where(signs == 0, 1.0, signs)


def _initial_layout(fg: FuzzyGraph, dim: int, init: str, seed: int):
    n = fg.n
    coords, used = None, "random"
    if init == "spectral":
        coords = spectral_layout(fg.weights, dim, seed)
        if coords is not None:
            used = "spectral"
            coords = coords * (10.0 / np.abs(coords).max())
            coords += 1e-4 * (_uniform(point_streams(seed, n, salt=11), dim) - 0.5)
    elif init != "random":
        raise ValueError(f"unknown init {init!r}")
    if coords is None:
        coords = 20.0 * _uniform(point_streams(seed, n, salt=13), dim) - 10.0
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return 10.0 * (coords - lo) / span, used


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _clip(v):
    if v > 4.0:
        return 4.0
    if v < -4.0:
        return -4.0
    return v


@numba.njit(cache=True)
def _sgd_layout(head_emb, tail_emb, head, tail, epochs_per_sample, a, b, states,
                n_epochs, lr, neg_rate, move_other):
    n_edges = head.shape[0]
    dim = head_emb.shape[1]
    n_tail = tail_emb.shape[0]
    eps_neg = epochs_per_sample / neg_rate
    next_sample = epochs_per_sample.copy()
    next_neg = eps_neg.copy()
    for epoch in range(n_epochs):
        alpha = lr * (1.0 - epoch / n_epochs)
        for e in range(n_edges):
            if next_sample[e] > epoch:
                continue
            j = head[e]
            k = tail[e]
            d2 = 0.0
            for d in range(dim):
                diff = head_emb[j, d] - tail_emb[k, d]
                d2 += diff * diff
            if d2 > 0.0:
                coeff = -2.0 * a * b * d2 ** (b - 1.0) / (a * d2 ** b + 1.0)
            else:
                coeff = 0.0
            for d in range(dim):
                g = _clip(coeff * (head_emb[j, d] - tail_emb[k, d]))
                head_emb[j, d] += g * alpha
                if move_other:
                    tail_emb[k, d] -= g * alpha
            next_sample[e] += epochs_per_sample[e]

            n_neg = int((epoch - next_neg[e]) / eps_neg[e])
            for _ in range(n_neg):
                k = int(_next(states, j) % np.uint64(n_tail))
                if move_other and k == j:
                    continue
                d2 = 0.0
                for d in range(dim):
                    diff = head_emb[j, d] - tail_emb[k, d]
                    d2 += diff * diff
                if d2 > 0.0:
                    coeff = 2.0 * b / ((0.001 + d2) * (a * d2 ** b + 1.0))
                    for d in range(dim):
                        head_emb[j, d] += _clip(coeff * (head_emb[j, d] - tail_emb[k, d])) * alpha
                elif move_other:
                    for d in range(dim):
                        head_emb[j, d] += 4.0 * alpha
            next_neg[e] += n_neg * eps_neg[e]
    return head_emb


def epochs_per_sample(weights: np.ndarray, n_epochs: int) -> np.ndarray:
    out = np.full(weights.shape[0], -1.0)
    n_samples = n_epochs * (weights / weights.max())
    keep = n_samples > 0
    out[keep] = float(n_epochs) / n_samples[keep]
    return out


def _edges(W: sparse.csr_matrix, n_epochs: int):
    coo = W.tocoo()
    w = coo.data.copy()
    w[w < w.max() / float(n_epochs)] = 0.0
    keep = w > 0
    return (coo.row[keep].astype(np.int64), coo.col[keep].astype(np.int64),
            epochs_per_sample(w[keep], n_epochs))


def optimize_embedding(fg: FuzzyGraph, init: str = "spectral", n_epochs: int = 300, lr: float = 1.0,
                       neg_rate: int = 5, seed: int = 0, n_components: int = 2,
                       min_dist: float = 0.1, spread: float = 1.0) -> UmapModel:
    """Edge-sampled SGD on the fuzzy cross-entropy with negative sampling.

    The learning rate decays linearly to zero and per-coordinate gradients are
    clipped at +-4. Deterministic for a fixed seed.
    """
    if fg.n < 10:
        raise ValueError(f"need at least 10 points, got {fg.n}")
    if not np.all(np.isfinite(fg.weights.data)):
        raise ValueError("fuzzy graph contains non-finite weights")
    a, b = fit_ab(min_dist, spread)
    emb, used = _initial_layout(fg, n_components, init, seed)
    if fg.weights.nnz and n_epochs > 0:
        head, tail, eps = _edges(fg.weights, n_epochs)
        states = point_streams(seed, fg.n, salt=1)
        emb = _sgd_layout(emb, emb, head, tail, eps, a, b, states, n_epochs, float(lr),
                          float(neg_rate), True)
    cfg = UmapConfig(k=0, min_dist=min_dist, spread=spread, n_components=n_components,
                     n_epochs=n_epochs, lr=lr, neg_rate=neg_rate, init=init)
    return UmapModel(emb, a, b, cfg, seed, used, graph=fg)


def _canonical_order(X: np.ndarray) -> np.ndarray:
    return np.lexsort(X.T[::-1])


def fit_umap(X, config: UmapConfig = UmapConfig(), seed: int = 0) -> UmapModel:
    """Fit UMAP on feature matrix ``X`` (rows = points)."""
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    k = min(config.k, X.shape[0] - 1)
    perm = _canonical_order(X)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    Xc = X[perm]
    fg = fuzzy_simplicial_set(knn_graph(Xc, k))
    model = optimize_embedding(fg, config.init, config.n_epochs, config.lr, config.neg_rate, seed,
                               config.n_components, config.min_dist, config.spread)
    W = fg.weights[inv][:, inv].tocsr()
    graph = FuzzyGraph(W, fg.rho[inv], fg.sigma[inv])
    return replace(model, embedding=model.embedding[inv], data=X, graph=graph,
                   config=replace(config, k=k))


def transform(model: UmapModel, X_new, seed: int | None = None) -> Embedding:
    """Embed new points against the frozen training embedding.

    Each point starts at the membership-weighted mean of its k nearest
    training points' coordinates and is refined by ``transform_epochs`` SGD
    epochs in which only the new points move. A point identical to a
    training point takes that point's coordinates and is not refined.
    """
    if model.data is None:
        raise ValueError("model carries no training data")
    X_new = np.asarray(X_new, dtype=np.float64)
    if X_new.ndim != 2 or X_new.shape[1] != model.data.shape[1]:
        raise ValueError(f"expected {model.data.shape[1]} features, got shape {X_new.shape}")
    seed = model.seed if seed is None else seed
    k = model.config.k
    m = X_new.shape[0]
    idx, dist = _knn(X_new, model.data, k, exclude_self=False)
    rho, sigma = calibrate_rows(dist, fallback_mean=float(dist.mean()))
    w = membership_strengths(dist, rho, sigma)
    ref = np.array(model.embedding)
    # exact duplicates of training points sit on top of them
    exact = dist == 0
    w_init = np.where(exact.any(axis=1, keepdims=True), exact.astype(np.float64), w)
    emb = (w_init[:, :, None] * ref[idx]).sum(axis=1) / w_init.sum(axis=1, keepdims=True)

    n_epochs = model.config.transform_epochs
    if n_epochs > 0 and not exact.any(axis=1).all():
        head = np.repeat(np.arange(m), k)
        tail = idx.ravel()
        wflat = w.ravel()
        keep = wflat >= wflat.max() / n_epochs
        # exact training duplicates stay pinned to their match
        keep &= ~np.repeat(exact.any(axis=1), k)
        eps = epochs_per_sample(wflat[keep], n_epochs)
        states = point_streams(seed, m, salt=2)
        emb = _sgd_layout(emb, ref, head[keep], tail[keep], eps, model.a, model.b, states,
                          n_epochs, model.config.lr / 4.0, float(model.config.neg_rate), False)
    return Embedding(emb)


def embed_train_test(X_train, X_test, config: UmapConfig = UmapConfig(), seed: int = 0,
                     mode: str = "transform"):
    """(train embedding, test embedding, mode) via transform or a joint refit."""
    if mode == "transform":
        model = fit_umap(X_train, config, seed)
        return np.array(model.embedding), transform(model, X_test).points, mode
    if mode == "refit":
        X_train = np.asarray(X_train, dtype=np.float64)
        model = fit_umap(np.vstack([X_train, X_test]), config, seed)
        n = X_train.shape[0]
        return np.array(model.embedding[:n]), np.array(model.embedding[n:]), mode
    raise ValueError(f"unknown embedding mode {mode!r}")


# ---------------------------------------------------------------------------
# quality metric
# ---------------------------------------------------------------------------

def trustworthiness(X, E, k: int = 5) -> float:
    """Penalize embedding neighbours by how far down the original ranking they sit."""
    X = np.asarray(X, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    n = X.shape[0]
    if k >= n / 2:
        raise ValueError(f"k={k} must be below n/2={n / 2}")
    dx = _sq_dists(X, X)
    np.fill_diagonal(dx, np.inf)
    order = np.argsort(dx, axis=1, kind="stable")
    ranks = np.empty_like(order)
    ranks[np.arange(n)[:, None], order] = np.arange(1, n + 1)[None, :]
    emb_nn, _ = _knn(E, E, k, exclude_self=True)
    r = np.take_along_axis(ranks, emb_nn, axis=1)
    penalty = np.maximum(r - k, 0).sum()
    return float(1.0 - 2.0 / (n * k * (2 * n - 3 * k - 1)) * penalty)
