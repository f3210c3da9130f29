"""Exact pairwise cosine distance, top-K extraction, and crop aggregation.

All scores travel in a DistanceMatrix (lower is better). Tie-breaks are
always by ascending gallery id, so every stage is deterministic and shard
merges can be compared byte-for-byte.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .embed_store import EmbeddingSet, row_norms
from .errors import DimMismatch, NotNormalized, UnmappedCropId

NORM_TOL = 1e-4

# Fixed query-block size: parallelism fans blocks out to threads, but the
# work per block never depends on the thread count, so outputs are
# byte-identical for any --threads value.
QUERY_BLOCK = 256

CROP_SCHEMES = {"index5crop": 5, "index6crop": 6, "custom": None}


@dataclass(frozen=True)
class DistanceMatrix:
    """Dense query x gallery distances, float32, lower is better."""

    query_ids: tuple[str, ...]
    gallery_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "query_ids", tuple(self.query_ids))
        object.__setattr__(self, "gallery_ids", tuple(self.gallery_ids))
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        expect = (len(self.query_ids), len(self.gallery_ids))
        if vals.shape != expect:
            raise ValueError(f"values shape {vals.shape}, expected {expect}")
        if vals.size and not np.isfinite(vals).all():
            raise ValueError("distance matrix contains NaN or inf")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def orientation(self) -> str:
        return "distance"


@dataclass(frozen=True)
class RankingList:
    """Per-query ordered top-K gallery ids with scores, best first."""

    query_id: str
    entries: tuple[tuple[str, float], ...]
    k: int
    orientation: str = "distance"

    def __post_init__(self):
        object.__setattr__(
            self, "entries", tuple((g, float(s)) for g, s in self.entries)
        )
        if len(self.entries) > self.k:
            raise ValueError(f"{len(self.entries)} entries exceed k={self.k}")
        gids = [g for g, _ in self.entries]
        if len(set(gids)) != len(gids):
            raise ValueError("duplicate gallery id in ranking list")

    @property
    def gallery_ids(self) -> tuple[str, ...]:
        return tuple(g for g, _ in self.entries)


@dataclass(frozen=True)
class CropGroupMap:
    """Crop-variant id -> parent gallery id, with scheme arity checks."""

    crop_to_parent: dict
    scheme: str = "custom"

    def __post_init__(self):
        if self.scheme not in CROP_SCHEMES:
            raise ValueError(f"unknown crop scheme {self.scheme!r}")
        arity = CROP_SCHEMES[self.scheme]
        counts = {}
        for parent in self.crop_to_parent.values():
            counts[parent] = counts.get(parent, 0) + 1
        if not counts:
            raise ValueError("crop map is empty")
        if arity is not None:
            off = {p: c for p, c in counts.items() if c != arity}
            if off:
                raise ValueError(
                    f"scheme {self.scheme} needs {arity} crops per parent, "
                    f"violated by {sorted(off)[:5]}"
                )


def pairwise_cosine_distance(
    queries: EmbeddingSet, gallery: EmbeddingSet, threads: int = 1
) -> DistanceMatrix:
    """values[i, j] = 1 - dot(query_i, gallery_j) for unit-norm rows.

    The gallery is shared read-only; query rows are processed in fixed-size
    blocks so the result is independent of `threads`.
    """
    if queries.dim != gallery.dim:
        raise DimMismatch(f"query dim {queries.dim} != gallery dim {gallery.dim}")
    for name, emb in (("query", queries), ("gallery", gallery)):
        if len(emb) == 0:
            continue
        dev = np.abs(row_norms(emb.vectors) - 1.0)
        if dev.max() > NORM_TOL:
            raise NotNormalized(
                f"{name} rows deviate from unit norm by up to {dev.max():.2e}"
            )

    nq = len(queries)
    out = np.empty((nq, len(gallery)), dtype=np.float32)
    gt = gallery.vectors.T

    def run_block(start):
        stop = min(start + QUERY_BLOCK, nq)
        sims = queries.vectors[start:stop] @ gt
        np.subtract(np.float32(1.0), sims, out=out[start:stop])

    starts = range(0, nq, QUERY_BLOCK)
    if threads <= 1:
        for s in starts:
            run_block(s)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_block, starts))
    # float roundoff can leave tiny negatives on exact matches
    np.clip(out, 0.0, 2.0, out=out)
    return DistanceMatrix(queries.ids, gallery.ids, out)


def _id_ranks(gallery_ids) -> np.ndarray:
    """Column index -> rank in ascending lexicographic id order."""
    order = sorted(range(len(gallery_ids)), key=lambda j: gallery_ids[j])
    ranks = np.empty(len(gallery_ids), dtype=np.int64)
    for r, j in enumerate(order):
        ranks[j] = r
    return ranks


def topk(matrix: DistanceMatrix, k: int) -> list[RankingList]:
    """Per query, the k smallest distances; ties by ascending gallery id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ng = len(matrix.gallery_ids)
    idrank = _id_ranks(matrix.gallery_ids)
    take = min(k, ng)
    results = []
    for qi, qid in enumerate(matrix.query_ids):
        row = matrix.values[qi]
        if take < ng:
            part = np.argpartition(row, take - 1)[:take]
            thresh = row[part].max()
            # pull in every column tied with the boundary so the id
            # tie-break stays canonical
            cand = np.where(row <= thresh)[0]
        else:
            cand = np.arange(ng)
        order = cand[np.lexsort((idrank[cand], row[cand]))][:take]
        entries = tuple((matrix.gallery_ids[j], float(row[j])) for j in order)
        results.append(RankingList(qid, entries, k=k))
    return results


def aggregate_crops(matrix: DistanceMatrix, crop_map: CropGroupMap) -> DistanceMatrix:
    """Reduce crop-variant columns to parents by minimum distance.

    The best-matching local crop represents its parent image; parents are
    ordered by the first appearance of any of their crops.
    """
    parents = []
    cols_of = {}
    for j, gid in enumerate(matrix.gallery_ids):
        parent = crop_map.crop_to_parent.get(gid)
        if parent is None:
            raise UnmappedCropId(f"gallery id {gid!r} has no parent in crop map")
        if parent not in cols_of:
            cols_of[parent] = []
            parents.append(parent)
        cols_of[parent].append(j)
    out = np.empty((len(matrix.query_ids), len(parents)), dtype=np.float32)
    for pi, parent in enumerate(parents):
        out[:, pi] = matrix.values[:, cols_of[parent]].min(axis=1)
    return DistanceMatrix(matrix.query_ids, tuple(parents), out)


# --- on-disk formats ---

def save_matrix(matrix: DistanceMatrix, path) -> None:
    np.savez(
        path,
        query_ids=np.array(matrix.query_ids, dtype=object),
        gallery_ids=np.array(matrix.gallery_ids, dtype=object),
        values=matrix.values,
    )


def load_matrix(path) -> DistanceMatrix:
    with np.load(path, allow_pickle=True) as npz:
        return DistanceMatrix(
            tuple(npz["query_ids"].tolist()),
            tuple(npz["gallery_ids"].tolist()),
            npz["values"],
        )


def ranking_to_json(rl: RankingList) -> str:
    return json.dumps(
        {
            "query": rl.query_id,
            "ranks": [[g, s] for g, s in rl.entries],
            "orientation": rl.orientation,
        },
        separators=(",", ":"),
    )


def ranking_from_json(line: str, k: int | None = None) -> RankingList:
    obj = json.loads(line)
    ranks = obj["ranks"]
    return RankingList(
        query_id=obj["query"],
        entries=tuple((g, float(s)) for g, s in ranks),
        k=len(ranks) if k is None else k,
        orientation=obj.get("orientation", "distance"),
    )


def write_ranking_lists(lists, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rl in lists:
            fh.write(ranking_to_json(rl) + "\n")


def read_ranking_lists(path) -> list[RankingList]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(ranking_from_json(line))
    return out


def save_crop_map(crop_map: CropGroupMap, path) -> None:
    groups = {}
    for crop, parent in crop_map.crop_to_parent.items():
        groups.setdefault(parent, []).append(crop)
    payload = {
        "scheme": crop_map.scheme,
        "groups": {p: sorted(c) for p, c in sorted(groups.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_crop_map(path) -> CropGroupMap:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    crop_to_parent = {}
    for parent, crops in obj["groups"].items():
        for crop in crops:
            if crop in crop_to_parent:
                raise ValueError(f"crop id {crop!r} listed under two parents")
            crop_to_parent[crop] = parent
    return CropGroupMap(crop_to_parent=crop_to_parent, scheme=obj["scheme"])
