"""Coordinator/worker execution of sharded re-ranking over a job directory.

There is no network protocol: the coordinator spawns worker processes
that share nothing but the job directory. Workers commit their shard file
by atomic rename, so a killed worker leaves at most a temp file and its
shard is indistinguishable from one that never ran. Missing shards are
tolerated (or fatal, under the strict policy) and reported by query id.
"""
from __future__ import annotations

import datetime
import json
import os
import subprocess
import sys
from dataclasses import dataclass, field

from .embed_store import load_embeddings
from .errors import InvalidParams, ManifestInvalid, ShardsMissing
from .rerank import (
    MissingReport,
    RerankParams,
    ShardManifest,
    build_shard_manifest,
    kreciprocal_rerank,
    merge_shard_results,
    write_shard_result,
)
from .search import topk

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class JobManifest:
    """One sharded re-ranking job rooted at a shared directory."""

    job_id: str
    query_path: str
    gallery_path: str
    params: RerankParams
    shards: ShardManifest
    depth: int = 10  # top-k depth of the ranking lists workers emit
    stage: str = "rerank"
    created_at: str = ""

    def __post_init__(self):
        if self.stage != "rerank":
            raise ManifestInvalid(f"unknown stage {self.stage!r}")
        if self.depth < 1:
            raise ManifestInvalid("depth must be >= 1")

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "stage": self.stage,
            "inputs": {"queries": self.query_path, "gallery": self.gallery_path},
            "params": {
                "k1": self.params.k1,
                "k2": self.params.k2,
                "lambda": self.params.lam,
            },
            "depth": self.depth,
            "shards": self.shards.to_dict(),
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "JobManifest":
        try:
            params = obj["params"]
            return cls(
                job_id=obj["job_id"],
                query_path=obj["inputs"]["queries"],
                gallery_path=obj["inputs"]["gallery"],
                params=RerankParams(
                    k1=params["k1"], k2=params["k2"], lam=params["lambda"]
                ),
                shards=ShardManifest.from_dict(obj["shards"]),
                depth=obj.get("depth", 10),
                stage=obj.get("stage", "rerank"),
                created_at=obj.get("created_at", ""),
            )
        except (KeyError, TypeError, InvalidParams) as exc:
            raise ManifestInvalid(f"bad manifest: {exc}") from exc


def create_job(
    job_dir,
    query_path,
    gallery_path,
    params: RerankParams,
    n_shards: int,
    depth: int = 10,
    job_id: str | None = None,
) -> JobManifest:
    """Validate inputs, build the shard assignment, write manifest.json."""
    for path in (query_path, gallery_path):
        if not os.path.isfile(path):
            raise ManifestInvalid(f"input file missing: {path}")
    queries = load_embeddings(query_path)
    shards = build_shard_manifest(
        len(queries), n_shards, job_dir, query_ids=queries.ids
    )
    manifest = JobManifest(
        job_id=job_id or os.path.basename(os.path.normpath(job_dir)) or "job",
        query_path=os.path.abspath(query_path),
        gallery_path=os.path.abspath(gallery_path),
        params=params,
        shards=shards,
        depth=depth,
        created_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
    )
    save_manifest(manifest, os.path.join(job_dir, MANIFEST_NAME))
    return manifest


def save_manifest(manifest: JobManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
        fh.write("\n")


def load_manifest(path) -> JobManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError as exc:
        raise ManifestInvalid(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestInvalid(f"manifest is not valid JSON: {exc}") from exc
    manifest = JobManifest.from_dict(obj)
    for path_ in (manifest.query_path, manifest.gallery_path):
        if not os.path.isfile(path_):
            raise ManifestInvalid(f"input file missing: {path_}")
    return manifest


def worker_run(
    manifest_path, shard_index: int, inject_fail: bool = False, threads: int = 1
) -> None:
    """Compute this shard's re-ranked top-k lists and commit them atomically.

    Neighbor structures are computed over the full joint set, identically
    in every shard, so shard outputs never depend on the shard count.
    """
    manifest = load_manifest(manifest_path)
    if not (0 <= shard_index < manifest.shards.n_shards):
        raise ManifestInvalid(
            f"shard {shard_index} out of range 0..{manifest.shards.n_shards - 1}"
        )
    job_dir = os.path.dirname(os.path.abspath(manifest_path))
    queries = load_embeddings(manifest.query_path)
    gallery = load_embeddings(manifest.gallery_path)
    rows = manifest.shards.shard_rows(shard_index)
    matrix = kreciprocal_rerank(
        queries, gallery, manifest.params, query_rows=rows, threads=threads
    )
    lists = topk(matrix, manifest.depth)
    out_path = os.path.join(job_dir, manifest.shards.result_files[shard_index])
    if inject_fail:
        # simulate a worker dying mid-write: temp file only, no commit
        with open(out_path + ".tmp.injected", "wb") as fh:
            fh.write(b"partial")
        raise RuntimeError("injected failure before commit")
    write_shard_result(lists, out_path)


def coordinator_run(
    manifest_path,
    parallelism: int = 1,
    fail_policy: str = "tolerate",
):
    """Fan shards out to worker processes, then merge whatever landed."""
    if fail_policy not in ("tolerate", "strict"):
        raise InvalidParams(f"unknown fail policy {fail_policy!r}")
    if parallelism < 1:
        raise InvalidParams("parallelism must be >= 1")
    manifest = load_manifest(manifest_path)
    job_dir = os.path.dirname(os.path.abspath(manifest_path))

    pending = list(range(manifest.shards.n_shards))
    running: list[subprocess.Popen] = []
    while pending or running:
        while pending and len(running) < parallelism:
            shard = pending.pop(0)
            running.append(subprocess.Popen(
                [
                    sys.executable, "-m", "prodretrieve", "worker",
                    "--manifest", str(manifest_path),
                    "--shard", str(shard),
                ],
                stdout=subprocess.DEVNULL,
                stderr=subprocess.DEVNULL,
            ))
        running[0].wait()
        running = [p for p in running if p.poll() is None]

    results, report = merge_shard_results(manifest.shards, job_dir)
    if fail_policy == "strict" and not report.ok:
        raise ShardsMissing(
            f"shards {sorted(report.reasons)} missing or corrupt"
        )
    return results, report


def run_workers_inprocess(manifest_path) -> tuple[list, MissingReport]:
    """Run every shard in this process (test/debug convenience)."""
    manifest = load_manifest(manifest_path)
    for shard in range(manifest.shards.n_shards):
        worker_run(manifest_path, shard)
    job_dir = os.path.dirname(os.path.abspath(manifest_path))
    return merge_shard_results(manifest.shards, job_dir)
