"""k-reciprocal re-ranking and the file-based sharding primitives around it.

The re-ranker refines an initial cosine-distance matrix using mutual
nearest-neighbor evidence over the joint query+gallery set:

 1. all-pairs original distance d over the joint set P
 2. N(p,k) = k nearest neighbors of p in P (excluding p);
    R(p,k) = mutual subset {g in N(p,k) : p in N(g,k)}
 3. expansion: R*(p,k1) adds R(c, ceil(k1/2)) for each c in R(p,k1) whose
    half-size reciprocal set overlaps R(p,k1) by at least two thirds
 4. sparse encoding V_p[g] = exp(-d(p,g)) on R*(p,k1)
 5. local query expansion: V_p <- mean of V_q over {p} union N(p,k2)
 6. weighted Jaccard distance dJ = 1 - sum(min)/sum(max)
 7. final distance (1-lambda)*dJ + lambda*d, reported for query x gallery

Large jobs are split by query index modulo the shard count; every shard
recomputes the shared neighbor structures identically, so merged results
are bit-identical regardless of shard count. Shard result files carry an
FNV-1a checksum so partial writes from killed workers are detected.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .embed_store import EmbeddingSet
from .errors import InvalidParams, TooFewItems
from .search import (
    DistanceMatrix,
    RankingList,
    pairwise_cosine_distance,
    ranking_from_json,
    ranking_to_json,
)

EXPANSION_OVERLAP = 2.0 / 3.0

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_FNV_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class RerankParams:
    """Neighborhood sizes and the original-distance mixing weight."""

    k1: int = 20
    k2: int = 6
    lam: float = 0.3

    def __post_init__(self):
        if not (1 <= self.k2 <= self.k1):
            raise InvalidParams(f"need 1 <= k2 <= k1, got k1={self.k1} k2={self.k2}")
        if not (0.0 <= self.lam <= 1.0):
            raise InvalidParams(f"lambda must be in [0,1], got {self.lam}")


def _reciprocal_sets(order: np.ndarray, rank: np.ndarray, k: int) -> list:
    """R(p,k) for every probe, as sorted index arrays."""
    n = order.shape[0]
    out = []
    for p in range(n):
        neigh = order[p, :k]
        mutual = neigh[rank[neigh, p] < k]
        out.append(np.sort(mutual))
    return out


def kreciprocal_rerank(
    query_feats: EmbeddingSet,
    gallery_feats: EmbeddingSet,
    params: RerankParams,
    query_rows=None,
    threads: int = 1,
) -> DistanceMatrix:
    """Re-rank gallery items for each query (or a subset of query rows).

    `query_rows` restricts the reported rows; the neighbor structures are
    always computed over the full joint set, so any row of a restricted
    run is bit-identical to the same row of a full run.
    """
    nq, ng = len(query_feats), len(gallery_feats)
    n = nq + ng
    if n <= params.k1:
        raise TooFewItems(f"joint set of {n} items needs > k1={params.k1}")
    if query_rows is None:
        query_rows = range(nq)
    query_rows = list(query_rows)

    joint = EmbeddingSet(
        ids=tuple(f"q#{i}" for i in range(nq)) + tuple(f"g#{j}" for j in range(ng)),
        vectors=np.vstack([query_feats.vectors, gallery_feats.vectors]),
    )
    d = pairwise_cosine_distance(joint, joint, threads=threads).values
    d = d.astype(np.float64)

    d_noself = d.copy()
    np.fill_diagonal(d_noself, np.inf)
    order = np.argsort(d_noself, axis=1, kind="stable")
    rank = np.empty_like(order)
    rows = np.arange(n)[:, None]
    rank[rows, order] = np.arange(n)[None, :]

    half = math.ceil(params.k1 / 2)
    r_full = _reciprocal_sets(order, rank, params.k1)
    r_half = _reciprocal_sets(order, rank, half)

    v = np.zeros((n, n), dtype=np.float64)
    for p in range(n):
        base = r_full[p]
        members = set(base.tolist())
        base_set = members.copy()
        for c in base:
            cand = r_half[c]
            if cand.size == 0:
                continue
            overlap = sum(1 for g in cand if g in base_set)
            if overlap >= EXPANSION_OVERLAP * cand.size:
                members.update(cand.tolist())
        if members:
            idx = np.fromiter(members, dtype=np.int64)
            v[p, idx] = np.exp(-d[p, idx])

    # local query expansion over {p} + k2 nearest neighbors
    vq = np.empty_like(v)
    for p in range(n):
        group = np.concatenate(([p], order[p, : params.k2]))
        vq[p] = v[group].mean(axis=0)
    v = vq

    v_gal = v[nq:]
    out = np.empty((len(query_rows), ng), dtype=np.float32)
    for i, qi in enumerate(query_rows):
        mins = np.minimum(v[qi][None, :], v_gal).sum(axis=1)
        maxs = np.maximum(v[qi][None, :], v_gal).sum(axis=1)
        jaccard = np.ones(ng, dtype=np.float64)
        nz = maxs > 0
        jaccard[nz] = 1.0 - mins[nz] / maxs[nz]
        out[i] = (1.0 - params.lam) * jaccard + params.lam * d[qi, nq:]

    qids = tuple(query_feats.ids[i] for i in query_rows)
    return DistanceMatrix(qids, gallery_feats.ids, out)


# --- sharding ---

@dataclass(frozen=True)
class ShardManifest:
    """Modulo assignment of query indices to shard result files."""

    n_queries: int
    n_shards: int
    result_files: tuple[str, ...]
    query_ids: tuple[str, ...] | None = None
    assignment: str = "modulo"

    def __post_init__(self):
        if self.n_shards < 1:
            raise InvalidParams("n_shards must be >= 1")
        if self.assignment != "modulo":
            raise InvalidParams(f"unknown assignment {self.assignment!r}")
        object.__setattr__(self, "result_files", tuple(self.result_files))
        if self.query_ids is not None:
            object.__setattr__(self, "query_ids", tuple(self.query_ids))
            if len(self.query_ids) != self.n_queries:
                raise InvalidParams("query_ids length disagrees with n_queries")

    def shard_rows(self, shard_index: int) -> list[int]:
        return list(range(shard_index, self.n_queries, self.n_shards))

    def to_dict(self) -> dict:
        obj = {
            "n_queries": self.n_queries,
            "n_shards": self.n_shards,
            "assignment": self.assignment,
            "result_files": list(self.result_files),
        }
        if self.query_ids is not None:
            obj["query_ids"] = list(self.query_ids)
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "ShardManifest":
        return cls(
            n_queries=obj["n_queries"],
            n_shards=obj["n_shards"],
            result_files=tuple(obj["result_files"]),
            query_ids=tuple(obj["query_ids"]) if obj.get("query_ids") else None,
            assignment=obj.get("assignment", "modulo"),
        )


@dataclass
class MissingReport:
    """Queries lost to absent or corrupt shards, with per-shard reasons."""

    missing_queries: list = field(default_factory=list)
    reasons: dict = field(default_factory=dict)  # shard index -> "absent"|"checksum"

    @property
    def ok(self) -> bool:
        return not self.missing_queries and not self.reasons

    def to_dict(self) -> dict:
        return {
            "missing_queries": list(self.missing_queries),
            "reasons": {str(i): r for i, r in self.reasons.items()},
        }


def build_shard_manifest(
    n_queries: int, n_shards: int, job_dir, query_ids=None
) -> ShardManifest:
    """Assign query index i to shard (i mod n_shards) and name result files."""
    manifest = ShardManifest(
        n_queries=n_queries,
        n_shards=n_shards,
        result_files=tuple(f"shard_{i}.jsonl" for i in range(n_shards)),
        query_ids=tuple(query_ids) if query_ids is not None else None,
    )
    os.makedirs(job_dir, exist_ok=True)
    return manifest


def fnv1a64(payload: bytes) -> int:
    h = FNV_OFFSET
    for b in payload:
        h = ((h ^ b) * FNV_PRIME) & _FNV_MASK
    return h


def shard_result_bytes(lists) -> bytes:
    """Serialize ranking lists plus the trailing checksum line."""
    payload = "".join(ranking_to_json(rl) + "\n" for rl in lists).encode("utf-8")
    trailer = json.dumps({"checksum": f"{fnv1a64(payload):016x}"}) + "\n"
    return payload + trailer.encode("utf-8")


def write_shard_result(lists, path) -> None:
    """Atomic commit: write to a temp name, then rename."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(shard_result_bytes(lists))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_shard_result(data: bytes) -> list[RankingList]:
    """Parse and checksum-verify one shard file's bytes."""
    from .errors import CorruptShard

    text = data.decode("utf-8", errors="replace")
    lines = text.splitlines(keepends=True)
    if not lines:
        raise CorruptShard("empty shard file")
    payload = "".join(lines[:-1]).encode("utf-8")
    try:
        trailer = json.loads(lines[-1])
        declared = int(trailer["checksum"], 16)
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptShard(f"bad checksum trailer: {exc}") from exc
    if fnv1a64(payload) != declared:
        raise CorruptShard("checksum mismatch")
    return [ranking_from_json(line) for line in lines[:-1] if line.strip()]


def merge_shard_results(manifest: ShardManifest, job_dir):
    """Collect whatever shard files exist; absences are reported, not fatal.

    Results for present shards are bit-identical to a single-shard run
    restricted to those queries.
    """
    from .errors import CorruptShard

    report = MissingReport()
    by_row: dict[int, RankingList] = {}
    for shard, fname in enumerate(manifest.result_files):
        path = os.path.join(job_dir, fname)
        rows = manifest.shard_rows(shard)
        try:
            with open(path, "rb") as fh:
                lists = read_shard_result(fh.read())
        except FileNotFoundError:
            report.reasons[shard] = "absent"
            report.missing_queries.extend(_row_ids(manifest, rows))
            continue
        except CorruptShard:
            report.reasons[shard] = "checksum"
            report.missing_queries.extend(_row_ids(manifest, rows))
            continue
        for row, rl in zip(rows, lists):
            by_row[row] = rl
    results = [by_row[r] for r in sorted(by_row)]
    return results, report


def _row_ids(manifest: ShardManifest, rows) -> list[str]:
    if manifest.query_ids is not None:
        return [manifest.query_ids[r] for r in rows]
    return [str(r) for r in rows]
