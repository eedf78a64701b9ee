"""Table-name clustering for over-generated ontologies.

Large corpora can leave the database with far more tables than the target
ontology has domains.  This module clusters table-name embeddings with
k-means, picks k by silhouette over a configurable range, and keeps one
representative table per cluster (the member nearest its centroid).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ontology import OntologyGraph
from .providers import EmbeddingProvider

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 300
CENTROID_TOLERANCE = 1e-6


def _kmeans_pp_init(vectors: np.ndarray, k: int,
                    rng: np.random.RandomState) -> np.ndarray:
    """k-means++ style seeding: subsequent centers drawn proportionally to
    squared distance from the nearest chosen center."""
    n = vectors.shape[0]
    centers = [vectors[rng.randint(n)]]
    for _ in range(1, k):
        dist_sq = np.min(
            ((vectors[:, None, :] - np.array(centers)[None, :, :]) ** 2).sum(-1),
            axis=1,
        )
        total = dist_sq.sum()
        if total <= 0:
            centers.append(vectors[rng.randint(n)])
            continue
        probs = dist_sq / total
        centers.append(vectors[rng.choice(n, p=probs)])
    return np.array(centers)


def kmeans(vectors: np.ndarray, k: int, seed: int = 0
           ) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations until the assignment reaches a fixpoint.

    Empty clusters are re-seeded from the point farthest from its centroid.
    Deterministic under the seed.  Returns (assignments, centroids).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError("vectors must be a 2-d array")
    distinct = np.unique(vectors, axis=0).shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > distinct:
        raise ValueError(f"k={k} exceeds {distinct} distinct points")

    rng = np.random.RandomState(seed)
    centroids = _kmeans_pp_init(vectors, k, rng)
    assignments = np.full(vectors.shape[0], -1, dtype=int)
    for _ in range(MAX_ITERATIONS):
        distances = np.linalg.norm(
            vectors[:, None, :] - centroids[None, :, :], axis=2
        )
        new_assignments = np.argmin(distances, axis=1)
        for cluster in range(k):
            if not np.any(new_assignments == cluster):
                own_distance = distances[np.arange(len(vectors)),
                                         new_assignments]
                farthest = int(np.argmax(own_distance))
                centroids[cluster] = vectors[farthest]
                new_assignments[farthest] = cluster
        new_centroids = np.array([
            vectors[new_assignments == cluster].mean(axis=0)
            for cluster in range(k)
        ])
        shift = float(np.linalg.norm(new_centroids - centroids))
        converged = np.array_equal(new_assignments, assignments)
        assignments = new_assignments
        centroids = new_centroids
        if converged or shift < CENTROID_TOLERANCE:
            break
    return assignments, centroids


def silhouette(vectors: np.ndarray, assignments: np.ndarray) -> float:
    """Mean over points of (b - a) / max(a, b); a point alone in its
    cluster scores 0 by convention."""
    vectors = np.asarray(vectors, dtype=np.float64)
    assignments = np.asarray(assignments)
    labels = np.unique(assignments)
    if len(labels) < 2:
        raise ValueError("silhouette needs at least two clusters")
    distances = np.linalg.norm(
        vectors[:, None, :] - vectors[None, :, :], axis=2
    )
    scores = []
    for i in range(len(vectors)):
        own = assignments[i]
        same = np.flatnonzero((assignments == own))
        if len(same) == 1:
            scores.append(0.0)
            continue
        a = distances[i, same[same != i]].mean()
        b = min(
            distances[i, assignments == other].mean()
            for other in labels
            if other != own
        )
        denom = max(a, b)
        scores.append(0.0 if denom == 0 else (b - a) / denom)
    return float(np.mean(scores))


@dataclass
class ClusteringResult:
    k: int
    assignments: dict[str, int]
    centroids: np.ndarray
    representatives: list[str]
    silhouette: float
    # silhouette per candidate k, for the cluster report
    sweep: dict[int, float] = field(default_factory=dict)

    def members(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {c: [] for c in range(self.k)}
        for name in sorted(self.assignments):
            out[self.assignments[name]].append(name)
        return out

    def to_document(self) -> dict:
        members = self.members()
        return {
            "k": self.k,
            "silhouette": self.silhouette,
            "sweep": {str(k): s for k, s in sorted(self.sweep.items())},
            "clusters": [
                {
                    "id": cluster,
                    "representative": self.representatives[cluster],
                    "members": members[cluster],
                }
                for cluster in range(self.k)
            ],
        }


def select_k_and_cluster(names: list[str], embedder: EmbeddingProvider,
                         k_min: int = 5, k_max: int = 20,
                         seed: int = 0) -> ClusteringResult:
    """Sweep k over [k_min, k_max], keep the silhouette-maximizing k
    (ties go to the smallest k), and pick centroid-nearest representatives.

    Falls back to k = number of distinct names when there are fewer names
    than k_min.
    """
    if k_min < 1 or k_min > k_max:
        raise ValueError(f"bad k range [{k_min}, {k_max}]")
    distinct = sorted(set(names))
    if not distinct:
        raise ValueError("nothing to cluster")
    vectors = np.array(embedder.embed(distinct))

    if len(distinct) < k_min:
        logger.warning(
            "only %d distinct names; falling back to k=%d",
            len(distinct), len(distinct),
        )
        candidates = [len(distinct)]
    else:
        candidates = list(range(k_min, min(k_max, len(distinct)) + 1))

    sweep: dict[int, float] = {}
    best: tuple[float, int] | None = None
    runs: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for k in candidates:
        assignments, centroids = kmeans(vectors, k, seed=seed)
        score = (
            silhouette(vectors, assignments)
            if len(np.unique(assignments)) > 1
            else 0.0
        )
        sweep[k] = score
        runs[k] = (assignments, centroids)
        if best is None or score > best[0]:
            best = (score, k)

    assert best is not None
    chosen = best[1]
    assignments, centroids = runs[chosen]
    representatives = []
    for cluster in range(chosen):
        member_idx = np.flatnonzero(assignments == cluster)
        dists = np.linalg.norm(vectors[member_idx] - centroids[cluster], axis=1)
        # argmin on (distance, name) keeps ties lexicographic
        ranked = sorted(
            (float(dists[j]), distinct[i]) for j, i in enumerate(member_idx)
        )
        representatives.append(ranked[0][1])
    return ClusteringResult(
        k=chosen,
        assignments={distinct[i]: int(assignments[i]) for i in range(len(distinct))},
        centroids=centroids,
        representatives=representatives,
        silhouette=sweep[chosen],
        sweep=sweep,
    )


def reduce_to_representatives(graph: OntologyGraph,
                              keep: list[str]) -> OntologyGraph:
    """Drop every domain that is not a cluster representative, along with
    its slots and values.  Intents and actions are untouched."""
    kept = set(keep) & graph.domains
    return OntologyGraph(
        domains=set(kept),
        slots={d: set(s) for d, s in graph.slots.items() if d in kept},
        values={
            (d, s): set(v) for (d, s), v in graph.values.items() if d in kept
        },
        user_intents=set(graph.user_intents),
        system_actions=set(graph.system_actions),
    )
