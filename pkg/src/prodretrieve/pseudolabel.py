"""Confidence-filtered pseudo-label clustering over training embeddings.

Clusters are connected components of the thresholded cosine-similarity
graph. Only small components count as confident pseudo-classes; everything
else falls back to a pool from which singleton classes are sampled to
reach a target class count.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .embed_store import EmbeddingSet, row_norms
from .errors import NotNormalized, PoolTooSmall, TargetBelowClusterCount
from .search import NORM_TOL

CONFIDENT_MAX_SIZE = 10  # kept clusters must be strictly smaller than this


@dataclass(frozen=True)
class ClusterResult:
    """Disjoint clusters plus the unclustered singleton pool."""

    clusters: tuple[tuple[str, ...], ...]
    unclustered_pool: tuple[str, ...]
    similarity_threshold: float

    def __post_init__(self):
        object.__setattr__(
            self, "clusters", tuple(tuple(c) for c in self.clusters)
        )
        object.__setattr__(self, "unclustered_pool", tuple(self.unclustered_pool))
        seen = set()
        for cluster in self.clusters:
            if len(cluster) < 2:
                raise ValueError("kept clusters must have size >= 2")
            for item in cluster:
                if item in seen:
                    raise ValueError(f"id {item!r} appears twice")
                seen.add(item)
        for item in self.unclustered_pool:
            if item in seen:
                raise ValueError(f"id {item!r} in both a cluster and the pool")
            seen.add(item)

    @property
    def all_ids(self) -> frozenset:
        ids = set(self.unclustered_pool)
        for cluster in self.clusters:
            ids.update(cluster)
        return frozenset(ids)


@dataclass(frozen=True)
class PseudoLabelAssignment:
    class_of: dict
    n_classes: int
    n_cluster_classes: int
    n_singleton_classes: int
    n_images: int


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def cluster_features(emb: EmbeddingSet, threshold: float) -> ClusterResult:
    """Connected components of the cos(v_i, v_j) >= threshold graph.

    Components of size >= 2 become clusters (listed by smallest member id,
    members ascending); singletons go to the pool.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    n = len(emb)
    if n and np.abs(row_norms(emb.vectors) - 1.0).max() > NORM_TOL:
        raise NotNormalized("cluster_features requires unit-norm rows")

    uf = _UnionFind(n)
    # row blocks keep the similarity buffer bounded at desk scale
    block = 1024
    for start in range(0, n, block):
        stop = min(start + block, n)
        sims = emb.vectors[start:stop].astype(np.float64) @ emb.vectors.T.astype(np.float64)
        ii, jj = np.nonzero(sims >= threshold)
        for i, j in zip(ii + start, jj):
            if i < j:
                uf.union(int(i), int(j))

    members: dict[int, list[str]] = {}
    for i in range(n):
        members.setdefault(uf.find(i), []).append(emb.ids[i])
    clusters = []
    pool = []
    for group in members.values():
        if len(group) >= 2:
            clusters.append(tuple(sorted(group)))
        else:
            pool.extend(group)
    clusters.sort(key=lambda c: c[0])
    return ClusterResult(
        clusters=tuple(clusters),
        unclustered_pool=tuple(sorted(pool)),
        similarity_threshold=threshold,
    )


def filter_confident(
    result: ClusterResult, max_size: int = CONFIDENT_MAX_SIZE
) -> ClusterResult:
    """Keep clusters strictly smaller than max_size; demote the rest."""
    kept = []
    pool = list(result.unclustered_pool)
    for cluster in result.clusters:
        if len(cluster) < max_size:
            kept.append(cluster)
        else:
            pool.extend(cluster)
    return ClusterResult(
        clusters=tuple(kept),
        unclustered_pool=tuple(sorted(pool)),
        similarity_threshold=result.similarity_threshold,
    )


def assign_pseudo_labels(
    kept: ClusterResult, target_classes: int, seed: int
) -> PseudoLabelAssignment:
    """One class per kept cluster plus seeded singleton fill from the pool."""
    n_cluster = len(kept.clusters)
    if target_classes < n_cluster:
        raise TargetBelowClusterCount(
            f"target {target_classes} < {n_cluster} kept clusters"
        )
    n_single = target_classes - n_cluster
    pool = list(kept.unclustered_pool)
    if len(pool) < n_single:
        raise PoolTooSmall(
            f"pool of {len(pool)} cannot supply {n_single} singleton classes"
        )

    class_of: dict[str, int] = {}
    n_images = 0
    for ci, cluster in enumerate(kept.clusters):
        for item in cluster:
            class_of[item] = ci
        n_images += len(cluster)

    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pool), size=n_single, replace=False)
    for offset, pi in enumerate(chosen):
        class_of[pool[int(pi)]] = n_cluster + offset
    n_images += n_single

    return PseudoLabelAssignment(
        class_of=class_of,
        n_classes=target_classes,
        n_cluster_classes=n_cluster,
        n_singleton_classes=n_single,
        n_images=n_images,
    )


# --- on-disk formats ---

def save_clusters(result: ClusterResult, path) -> None:
    payload = {
        "threshold": result.similarity_threshold,
        "clusters": [list(c) for c in result.clusters],
        "pool": list(result.unclustered_pool),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_clusters(path) -> ClusterResult:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return ClusterResult(
        clusters=tuple(tuple(c) for c in obj["clusters"]),
        unclustered_pool=tuple(obj["pool"]),
        similarity_threshold=obj["threshold"],
    )


def save_assignment(assignment: PseudoLabelAssignment, path) -> None:
    """JSON Lines of {"id": ..., "class": int}, in ascending id order."""
    with open(path, "w", encoding="utf-8") as fh:
        for item in sorted(assignment.class_of):
            fh.write(json.dumps(
                {"id": item, "class": assignment.class_of[item]},
                separators=(",", ":"),
            ) + "\n")
