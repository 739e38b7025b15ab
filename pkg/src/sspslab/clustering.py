"""Seeded k-means over unit-norm rows, plus the derived sampling sets.

Lloyd iterations use cosine affinity (assign to the most similar centroid,
update to the renormalized member mean), matching the geometry every queue
row already lives in. Empty clusters are repaired by re-seeding from the
point currently farthest from its own centroid. Everything is deterministic
given the generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import as_matrix, topk_desc


@dataclass
class ClusterState:
    """Assignments, centroids and the sampling sets built from them."""

    K: int
    assignments: np.ndarray
    centroids: np.ndarray = field(repr=False)
    neighbor_sets: list[np.ndarray] | None = None
    member_sets: list[np.ndarray] | None = None
    objective_history: list[float] = field(default_factory=list)


def _renormalized_mean(rows: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    mean = rows.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        return fallback.copy()
    return mean / norm


def _plus_plus_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    best_sim = points @ centroids[0]
    for c in range(1, k):
        dist = np.maximum(0.0, 1.0 - best_sim)
        weights = dist * dist
        total = weights.sum()
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=weights / total))
        centroids[c] = points[idx]
        best_sim = np.maximum(best_sim, points @ centroids[c])
    return centroids


def kmeans(points, K: int, n_iters: int, rng: np.random.Generator) -> ClusterState:
    """Cosine-affinity Lloyd clustering of unit-norm rows.

    The per-iteration objective (sum of cosines between points and their
    assigned centroids, measured after the assignment step) is recorded in
    ``objective_history`` and is non-decreasing.
    """
    pts = as_matrix(points)
    n = pts.shape[0]
    if K < 1 or K > n:
        raise ValueError(f"K={K} must lie in [1, {n}]")
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    centroids = _plus_plus_seed(pts, K, rng)
    assignments = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    for _ in range(n_iters):
        sims = pts @ centroids.T
        assignments = sims.argmax(axis=1)  # argmax takes the lowest index on ties
        history.append(float(sims[np.arange(n), assignments].sum()))
        new_centroids = centroids.copy()
        for k in range(K):
            members = assignments == k
            if members.any():
                new_centroids[k] = _renormalized_mean(pts[members], centroids[k])
        empties = [k for k in range(K) if not (assignments == k).any()]
        if empties:
            own_sim = sims[np.arange(n), assignments].copy()
            for k in empties:
                worst = int(own_sim.argmin())
                new_centroids[k] = pts[worst]
                own_sim[worst] = np.inf  # one reseed per point within a repair round
        centroids = new_centroids
    return ClusterState(K=K, assignments=assignments, centroids=centroids,
                        objective_history=history)


def compute_neighbor_sets(centroids, M: int) -> list[np.ndarray]:
    """Per cluster, the M most similar other centroids (descending, ties low)."""
    cents = as_matrix(centroids)
    k = cents.shape[0]
    if M < 1 or M >= k:
        raise ValueError(f"M={M} must lie in [1, K-1] with K={k}")
    norms = np.linalg.norm(cents, axis=1, keepdims=True)
    unit = cents / norms
    sims = unit @ unit.T
    return [topk_desc(sims[i], M, exclude=i) for i in range(k)]


def compute_member_sets(assignments, K: int) -> list[np.ndarray]:
    """Exact partition of indices by assigned cluster, ascending within each."""
    assign = np.asarray(assignments)
    if assign.size and (assign.min() < 0 or assign.max() >= K):
        raise ValueError("assignment out of range")
    return [np.flatnonzero(assign == k) for k in range(K)]


def attach_sampling_sets(state: ClusterState, M: int) -> ClusterState:
    """Fill neighbor sets (when M > 0) and member sets on a cluster state."""
    state.member_sets = compute_member_sets(state.assignments, state.K)
    state.neighbor_sets = compute_neighbor_sets(state.centroids, M) if M > 0 else None
    return state


def save_cluster_state(state: ClusterState, assignments_path, centroids_path) -> None:
    """Debug dump: rows `i c_i` plus a centroid matrix file."""
    with open(assignments_path, "w", encoding="ascii") as fh:
        for i, c in enumerate(state.assignments):
            fh.write(f"{i} {int(c)}\n")
    with open(centroids_path, "w", encoding="ascii") as fh:
        for row in state.centroids:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
