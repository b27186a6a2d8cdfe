"""Graph-guided clustering of selected patches.

Pipeline: cosine (morphology) and exponential-kernel (spatial) similarity are
blended, a symmetrized k-NN graph is built on the blend, features are smoothed
once over the graph, and the smoothed features are split into groups of at
most ``group_size`` by capacity-constrained K-means.  All of this is plain
numpy; only the resulting partition feeds the differentiable stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_FLOOR = 1e-12
SIGMA_EPS = 1e-8


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    omega_morph: float
    omega_spatial: float
    sigma_d: float | None = None


@dataclass(frozen=True)
class KnnGraph:
    neighbors: tuple[np.ndarray, ...]
    k: int

    @property
    def m(self) -> int:
        return len(self.neighbors)


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    n_groups: int
    group_size: int
    centroids: np.ndarray
    iterations: int

    def groups(self) -> list[np.ndarray]:
        """Member indices per group, ascending within each group."""
        return [np.flatnonzero(self.labels == g) for g in range(self.n_groups)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_groups)


def cosine_similarity(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), NORM_FLOOR)
    u = x / norms
    s = u @ u.T
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return np.clip(s, -1.0, 1.0)


def pairwise_distances(coords) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    diff = c[:, None, :] - c[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def spatial_similarity(coords, return_sigma: bool = False):
    """exp(-D / sigma_D) with sigma_D the population std of all m^2 distances plus 1e-8."""
    dist = pairwise_distances(coords)
    sigma = float(dist.std()) + SIGMA_EPS
    s = np.exp(-dist / sigma)
    return (s, sigma) if return_sigma else s


def composite_similarity(s_morph, s_spatial, omega_morph: float = 0.5, omega_spatial: float = 0.5,
                         sigma_d: float | None = None) -> SimilarityMatrix:
    if omega_morph < 0 or omega_spatial < 0:
        raise ValueError("similarity weights must be non-negative")
    if omega_morph + omega_spatial <= 0:
        raise ValueError("at least one similarity weight must be positive")
    vals = omega_morph * np.asarray(s_morph) + omega_spatial * np.asarray(s_spatial)
    return SimilarityMatrix(vals, omega_morph, omega_spatial, sigma_d)


def build_knn_graph(sim: SimilarityMatrix | np.ndarray, k: int) -> KnnGraph:
    s = sim.values if isinstance(sim, SimilarityMatrix) else np.asarray(sim)
    m = s.shape[0]
    if k < 1 or k >= m:
        raise ValueError(f"k must satisfy 1 <= k < m, got k={k}, m={m}")
    adj = np.zeros((m, m), dtype=bool)
    idx = np.arange(m)
    for i in range(m):
        row = s[i].copy()
        row[i] = -np.inf
        # lexsort: last key primary -> descending similarity, then ascending index
        order = np.lexsort((idx, -row))
        adj[i, order[:k]] = True
    adj |= adj.T
    return KnnGraph(tuple(np.flatnonzero(adj[i]) for i in range(m)), k)


def graph_smooth(features, graph: KnnGraph) -> np.ndarray:
    """One pass: each row becomes the mean of itself and its graph neighbours."""
    x = np.asarray(features, dtype=np.float64)
    if graph.m != x.shape[0]:
        raise ValueError(f"graph has {graph.m} nodes, features have {x.shape[0]} rows")
    out = np.empty_like(x)
    for i, nb in enumerate(graph.neighbors):
        out[i] = (x[i] + x[nb].sum(axis=0)) / (1 + nb.size)
    return out


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = x.shape[0]
    centers = [x[rng.integers(m)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        tot = d2.sum()
        i = rng.choice(m, p=d2 / tot) if tot > 0 else rng.integers(m)
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(1))
    return np.array(centers)


def _capacity_assign(dist2: np.ndarray, caps: np.ndarray) -> np.ndarray:
    m, g = dist2.shape
    labels = np.full(m, -1)
    room = caps.copy()
    left = m
    for flat in np.argsort(dist2, axis=None, kind="stable"):
        i, c = divmod(int(flat), g)
        if labels[i] < 0 and room[c] > 0:
            labels[i] = c
            room[c] -= 1
            left -= 1
            if left == 0:
                break
    return labels


def balanced_kmeans(x, group_size: int = 64, seed: int = 0, max_iter: int = 100) -> ClusterAssignment:
    """K-means with ceil(m / group_size) clusters capped at ``group_size`` members.

    Every cluster but the last holds exactly ``group_size`` points; the last
    holds the remainder.  Assignment is greedy over (point, centroid) pairs in
    ascending squared distance.
    """
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    if m < 1:
        raise ValueError("cannot cluster an empty set")
    g = -(-m // group_size)
    caps = np.full(g, group_size)
    caps[-1] = m - group_size * (g - 1)
    if g == 1:
        return ClusterAssignment(np.zeros(m, dtype=int), 1, group_size, x.mean(0, keepdims=True), 0)
    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(x, g, rng)
    labels = None
    it = 0
    for it in range(1, max_iter + 1):
        dist2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        new = _capacity_assign(dist2, caps)
        centroids = np.array([x[new == c].mean(0) for c in range(g)])
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    return ClusterAssignment(labels, g, group_size, centroids, it)


def cluster_patches(features, coords, *, knn_k: int = 10, group_size: int = 64,
                    omega_morph: float = 0.5, omega_spatial: float = 0.5,
                    seed: int = 0, max_iter: int = 100) -> ClusterAssignment:
    """Full graph-guided clustering of one bag's selected patches."""
    x = np.asarray(features, dtype=np.float64)
    m = x.shape[0]
    if m > 1:
        s_sp, sigma = spatial_similarity(coords, return_sigma=True)
        sim = composite_similarity(cosine_similarity(x), s_sp, omega_morph, omega_spatial, sigma)
        # small bags cannot supply knn_k distinct neighbours
        x = graph_smooth(x, build_knn_graph(sim, min(knn_k, m - 1)))
    return balanced_kmeans(x, group_size=group_size, seed=seed, max_iter=max_iter)
