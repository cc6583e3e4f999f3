"""Centroid distillation: k-means over the knowledge set, dot-product assignment,
element labeling, and per-element attribute frequency reports."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .corpus import Category, Corpus
from .embeddings import AppearanceKnowledgeSet


@dataclass
class CentroidSet:
    centroids: np.ndarray  # (K, d) float64
    source_digest: str
    iterations: int
    objective: float
    objective_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def digest(self) -> str:
        return hashlib.blake2b(
            np.ascontiguousarray(self.centroids).tobytes(), digest_size=16
        ).hexdigest()


@dataclass
class ElementPartition:
    labels: np.ndarray  # (K,) uint8: 1 pedestrian-related, 0 background-related
    members: list[list[int]]  # per-centroid assigned sample indices

    @property
    def pedestrian_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def background_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)


def _sq_distances(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (M, K) squared Euclidean distances via the expansion trick.
    d2 = (
        np.sum(data**2, axis=1, keepdims=True)
        - 2.0 * data @ centroids.T
        + np.sum(centroids**2, axis=1)
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = data.shape[0]
    centroids = np.empty((k, data.shape[1]), dtype=np.float64)
    centroids[0] = data[int(rng.integers(m))]
    closest = _sq_distances(data, centroids[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(m))
        else:
            idx = int(rng.choice(m, p=closest / total))
        centroids[i] = data[idx]
        closest = np.minimum(closest, _sq_distances(data, centroids[i : i + 1]).ravel())
    return centroids


def kmeans(
    embedding_set: AppearanceKnowledgeSet,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    rel_tol: float = 1e-6,
) -> CentroidSet:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are reseeded to the point farthest from its current centroid;
    the objective is non-increasing across iterations.
    """
    data = np.asarray(embedding_set.data, dtype=np.float64)
    m = data.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"K must satisfy 1 <= K <= M, got K={k}, M={m}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    centroids = _kmeanspp_init(data, k, rng)

    prev_obj = np.inf
    iterations = 0
    history: list[float] = []
    for iterations in range(1, max_iters + 1):
        d2 = _sq_distances(data, centroids)
        assign = np.argmin(d2, axis=1)
        obj = float(d2[np.arange(m), assign].sum())
        history.append(obj)

        new_centroids = centroids.copy()
        for j in range(k):
            mask = assign == j
            if mask.any():
                new_centroids[j] = data[mask].mean(axis=0)
            else:
                point_d2 = d2[np.arange(m), assign]
                new_centroids[j] = data[int(np.argmax(point_d2))]
        centroids = new_centroids

        if prev_obj - obj <= rel_tol * max(abs(prev_obj), 1.0) and np.isfinite(prev_obj):
            prev_obj = obj
            break
        prev_obj = obj

    # Final objective at the returned centroids.
    d2 = _sq_distances(data, centroids)
    final_obj = float(d2[np.arange(m), np.argmin(d2, axis=1)].sum())
    history.append(final_obj)
    return CentroidSet(
        centroids=centroids,
        source_digest=embedding_set.digest(),
        iterations=iterations,
        objective=final_obj,
        objective_history=history,
    )


def assign(embedding: np.ndarray, centroid_set: CentroidSet) -> int:
    """Dot-product assignment: argmax_k s . c_k, ties toward the smallest index."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape != (centroid_set.dim,):
        raise ValueError(
            f"dim mismatch: embedding {embedding.shape} vs centroids (.., {centroid_set.dim})"
        )
    return int(np.argmax(centroid_set.centroids @ embedding))


def assign_all(data: np.ndarray, centroid_set: CentroidSet) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.shape[1] != centroid_set.dim:
        raise ValueError("dim mismatch")
    return np.argmax(data @ centroid_set.centroids.T, axis=1)


def assign_euclidean_all(data: np.ndarray, centroid_set: CentroidSet) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    return np.argmin(_sq_distances(data, centroid_set.centroids), axis=1)


def label_elements(assignments: np.ndarray, labels: np.ndarray, k: int) -> ElementPartition:
    """Centroid is pedestrian-related iff strictly more than half of its members
    are pedestrian; ties and empty clusters go to background."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if assignments.min(initial=0) < 0 or assignments.max(initial=0) >= k:
        raise ValueError("assignments out of range")
    element_labels = np.zeros(k, dtype=np.uint8)
    members: list[list[int]] = [[] for _ in range(k)]
    for idx, a in enumerate(assignments):
        members[int(a)].append(idx)
    for j in range(k):
        if members[j]:
            ped = int(labels[members[j]].sum())
            if 2 * ped > len(members[j]):
                element_labels[j] = 1
    return ElementPartition(labels=element_labels, members=members)


def attribute_report(
    partition: ElementPartition, corpus: Corpus, assignments: np.ndarray, top: int = 5
) -> dict[int, dict]:
    """Per-element top attribute values with within-cluster frequency: the
    fraction of member descriptions whose attribute map contains the value."""
    if len(corpus.descriptions) != len(assignments):
        raise ValueError("corpus/assignment length mismatch")
    report: dict[int, dict] = {}
    for j, member_ids in enumerate(partition.members):
        counts: dict[str, int] = {}
        for idx in member_ids:
            for attr_type, value in corpus.descriptions[idx].attributes.items():
                key = f"{attr_type}={value}"
                counts[key] = counts.get(key, 0) + 1
        n = len(member_ids)
        freqs = sorted(
            ((key, cnt / n) for key, cnt in counts.items()),
            key=lambda kv: (-kv[1], kv[0]),
        )
        report[j] = {
            "label": "pedestrian" if partition.labels[j] else "background",
            "members": n,
            "top_attributes": [
                {"attribute": key, "frequency": freq} for key, freq in freqs[:top]
            ],
        }
    return report
