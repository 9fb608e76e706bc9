"""Hierarchical secure clustering: trust/latency features, penalized elbow,
(T/L)^gamma-weighted k-means, and core-node selection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import NodeId

LATENCY_FLOOR = 1e-6
MAX_ITER = 100


@dataclass(frozen=True)
class HscParams:
    omega: float = 0.5
    gamma: float = 1.0
    lambda_penalty: float | None = None
    k_max: int = 5
    n_init: int = 4

    def __post_init__(self):
        if not 0.0 < self.omega < 1.0:
            raise ValueError("omega must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")


@dataclass(frozen=True)
class FeatureVector:
    trust_component: float
    latency_component: float

    def as_tuple(self) -> tuple[float, float]:
        return (self.trust_component, self.latency_component)


@dataclass(frozen=True)
class Clustering:
    assignment: dict[NodeId, int]
    centroids: tuple[FeatureVector, ...]
    ccns: tuple[NodeId, ...]
    k: int
    wcss: float

    def members(self, c: int) -> list[NodeId]:
        return sorted(j for j, k in self.assignment.items() if k == c)

    def ecns_of(self, ccn: NodeId) -> list[NodeId]:
        c = self.assignment[ccn]
        return [j for j in self.members(c) if j != ccn]

    def ccn_of(self, node: NodeId) -> NodeId:
        return self.ccns[self.assignment[node]]


def normalize_latency(latency: Mapping[NodeId, float]) -> dict[NodeId, float]:
    """Min-max to [0, 1]; all-equal latencies map to 0.5."""
    for j, l in latency.items():
        if not l > 0:
            raise ValueError(f"latency of node {j} must be positive")
    lo, hi = min(latency.values()), max(latency.values())
    if hi - lo <= 0:
        return {j: 0.5 for j in latency}
    return {j: (l - lo) / (hi - lo) for j, l in latency.items()}


def feature_vectors(trust: Mapping[NodeId, float], latency: Mapping[NodeId, float],
                    omega: float) -> dict[NodeId, FeatureVector]:
    lhat = normalize_latency(latency)
    return {j: FeatureVector(omega * trust[j], (1.0 - omega) * lhat[j]) for j in sorted(trust)}


def node_scores(trust: Mapping[NodeId, float], lhat: Mapping[NodeId, float],
                gamma: float) -> dict[NodeId, float]:
    """(T / max(L_hat, eps))^gamma per node."""
    return {j: (trust[j] / max(lhat[j], LATENCY_FLOOR)) ** gamma for j in trust}


# ----------------------------------------------------------------- k-means


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers, dtype=float)


def _assign(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(2)
    labels = d2.argmin(1)
    return labels, d2[np.arange(len(x)), labels]


def weighted_kmeans(x: np.ndarray, k: int, weights: np.ndarray, rng: np.random.Generator,
                    max_iter: int = MAX_ITER) -> tuple[np.ndarray, np.ndarray, float]:
    """k-means++ seeding, then Lloyd iterations with weighted-mean centroid
    updates. Returns (labels, centers, wcss)."""
    centers = _kmeanspp_init(x, k, rng)
    labels, d2 = _assign(x, centers)
    for _ in range(max_iter):
        for c in range(k):
            if not np.any(labels == c):
                # empty cluster: reseed at the point farthest from its centroid
                far = int(d2.argmax())
                centers[c] = x[far]
                labels[far] = c
                d2[far] = 0.0
        new_centers = centers.copy()
        for c in range(k):
            m = labels == c
            w = weights[m]
            if w.sum() > 0:
                new_centers[c] = (w[:, None] * x[m]).sum(0) / w.sum()
            elif np.any(m):
                new_centers[c] = x[m].mean(0)
        new_labels, d2 = _assign(x, new_centers)
        centers = new_centers
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    # a final repair pass so every cluster is non-empty on exit
    for c in range(k):
        if not np.any(labels == c):
            far = int(d2.argmax())
            labels[far] = c
            centers[c] = x[far]
            d2[far] = 0.0
    wcss = float(((x - centers[labels]) ** 2).sum())
    return labels, centers, wcss


def _best_run(x, k, weights, seed, n_init):
    best = None
    for r in range(n_init):
        rng = np.random.default_rng([seed, k, r])
        run = weighted_kmeans(x, k, weights, rng)
        if best is None or run[2] < best[2] - 1e-15:
            best = run
    return best


def _prepare(vectors, trust, latency, gamma):
    nodes = sorted(vectors)
    x = np.array([vectors[j].as_tuple() for j in nodes], dtype=float)
    if trust is None or latency is None or gamma == 0:
        w = np.ones(len(nodes))
    else:
        lhat = normalize_latency(latency)
        s = node_scores(trust, lhat, gamma)
        w = np.array([s[j] for j in nodes], dtype=float)
    return nodes, x, w


def wcss_curve(vectors: Mapping[NodeId, FeatureVector], params: HscParams, seed: int,
               trust=None, latency=None, k_hi: int | None = None) -> list[float]:
    nodes, x, w = _prepare(vectors, trust, latency, params.gamma)
    k_hi = min(k_hi or params.k_max, len(nodes))
    return [_best_run(x, k, w, seed, params.n_init)[2] for k in range(1, k_hi + 1)]


def choose_k(vectors: Mapping[NodeId, FeatureVector], params: HscParams, seed: int = 0,
             trust=None, latency=None) -> int:
    """Elbow of J(K) = WCSS(K) + lambda*K at the largest second difference."""
    n = len(vectors)
    if n < 2:
        return 1
    k_max = min(params.k_max, n)
    # one extra point so the second difference exists at K = k_max
    wcss = wcss_curve(vectors, params, seed, trust, latency, k_hi=min(k_max + 1, n))
    lam = params.lambda_penalty
    if lam is None:
        lam = 0.01 * wcss[0] / k_max
    j = [w + lam * (i + 1) for i, w in enumerate(wcss)]
    best_k, best_d2 = 1, 0.0
    for k in range(2, min(k_max, len(j) - 1) + 1):
        d2 = j[k - 2] - 2.0 * j[k - 1] + j[k]
        if d2 > best_d2 + 1e-12 * max(1.0, j[0]):
            best_k, best_d2 = k, d2
    return best_k


def select_ccns(assignment: Mapping[NodeId, int], k: int, trust: Mapping[NodeId, float],
                latency: Mapping[NodeId, float], gamma: float = 1.0) -> list[NodeId]:
    """Per cluster, the member with the largest (T/L_hat)^gamma; ties go to
    higher T, then lower L_hat, then lower NodeId."""
    lhat = normalize_latency(latency)
    score = node_scores(trust, lhat, gamma)
    ccns = []
    for c in range(k):
        members = [j for j, a in assignment.items() if a == c]
        ccns.append(min(members, key=lambda j: (-score[j], -trust[j], lhat[j], j)))
    return ccns


def cluster(vectors: Mapping[NodeId, FeatureVector], trust: Mapping[NodeId, float],
            latency: Mapping[NodeId, float], params: HscParams, k: int,
            seed: int = 0) -> Clustering:
    nodes, x, w = _prepare(vectors, trust, latency, params.gamma)
    if not 1 <= k <= len(nodes):
        raise ValueError(f"K={k} must lie in [1, {len(nodes)}]")
    labels, centers, wcss = _best_run(x, k, w, seed, params.n_init)
    assignment = {j: int(labels[i]) for i, j in enumerate(nodes)}
    ccns = select_ccns(assignment, k, trust, latency, params.gamma)
    cents = tuple(FeatureVector(float(c[0]), float(c[1])) for c in centers)
    return Clustering(assignment, cents, tuple(ccns), k, wcss)


def run_hsc(trust: Mapping[NodeId, float], latency: Mapping[NodeId, float], params: HscParams,
            seed: int = 0, k: int | None = None) -> Clustering:
    """Features, elbow (unless ``k`` is fixed), clustering and CCN choice.

    The elbow reads the geometry of the feature vectors alone; the trust and
    latency weighting enters through the centroid updates of ``cluster``."""
    vectors = feature_vectors(trust, latency, params.omega)
    if k is None:
        k = choose_k(vectors, params, seed)
    return cluster(vectors, trust, latency, params, min(k, len(vectors)), seed)
