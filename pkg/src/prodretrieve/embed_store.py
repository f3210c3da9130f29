"""Embedding containers, the EMB1 on-disk format, and multi-scale fusion.

An EmbeddingSet is the universal currency of the pipeline: an ordered list
of item ids paired with one float32 feature row each. Sets are immutable
after construction and safe to share across parallel workers.

EMB1 binary layout (all integers little-endian):

    bytes 0-3    magic ASCII "EMB1"
    bytes 4-7    uint32 count N
    bytes 8-11   uint32 dim D
    bytes 12-15  reserved, zero
    id block     N records of (uint16 length, UTF-8 bytes)
    payload      N*D float32, row-major
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateId,
    IoFailure,
    MagicMismatch,
    MisalignedScales,
    NonFiniteValue,
    TruncatedFile,
    ZeroVector,
)

MAGIC = b"EMB1"
HEADER = struct.Struct("<4sIII")

DEFAULT_DIM = 2048

# Norm below this is treated as a corrupt/degenerate vector, never clamped.
ZERO_NORM_EPS = 1e-12


@dataclass(frozen=True)
class EmbeddingSet:
    """Ordered ids plus a float32 (n, dim) matrix, validated on construction."""

    ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vecs = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vecs.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {vecs.shape}")
        object.__setattr__(self, "ids", tuple(self.ids))
        if len(self.ids) != vecs.shape[0]:
            raise ValueError(
                f"{len(self.ids)} ids but {vecs.shape[0]} vector rows"
            )
        for i in self.ids:
            if not isinstance(i, str) or not i:
                raise ValueError("ids must be non-empty strings")
        if len(set(self.ids)) != len(self.ids):
            raise DuplicateId("duplicate item ids in embedding set")
        if vecs.size and not np.isfinite(vecs).all():
            raise NonFiniteValue("embedding matrix contains NaN or inf")
        vecs.setflags(write=False)
        object.__setattr__(self, "vectors", vecs)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, item_id: str) -> np.ndarray:
        return self.vectors[self.ids.index(item_id)]


@dataclass(frozen=True)
class ScaleGroup:
    """Per-resolution embedding sets with identical id order and dim."""

    scales: tuple[tuple[str, EmbeddingSet], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(self.scales))
        if not self.scales:
            raise MisalignedScales("scale group needs at least one member")
        _, first = self.scales[0]
        for label, member in self.scales[1:]:
            if member.ids != first.ids:
                raise MisalignedScales(f"scale {label!r}: id order mismatch")
            if member.dim != first.dim:
                raise MisalignedScales(f"scale {label!r}: dim mismatch")

    @property
    def ids(self) -> tuple[str, ...]:
        return self.scales[0][1].ids

    @property
    def dim(self) -> int:
        return self.scales[0][1].dim


def save_embeddings(emb: EmbeddingSet, path) -> None:
    """Write the EMB1 format; byte output is deterministic for a given set."""
    try:
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, len(emb), emb.dim, 0))
            for item_id in emb.ids:
                raw = item_id.encode("utf-8")
                if len(raw) > 0xFFFF:
                    raise IoFailure(f"id longer than 65535 bytes: {item_id[:32]}...")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
            fh.write(emb.vectors.astype("<f4", copy=False).tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_embeddings(path) -> EmbeddingSet:
    """Read an EMB1 file; round-trips bit-exactly with save_embeddings."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < HEADER.size or data[:4] != MAGIC:
        raise MagicMismatch(f"{path}: not an EMB1 file")
    _, count, dim, reserved = HEADER.unpack_from(data, 0)
    if reserved != 0:
        raise MagicMismatch(f"{path}: reserved header field is nonzero")

    ids = []
    off = HEADER.size
    for _ in range(count):
        if off + 2 > len(data):
            raise TruncatedFile(f"{path}: id block ends early")
        (length,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + length > len(data):
            raise TruncatedFile(f"{path}: id record ends early")
        ids.append(data[off:off + length].decode("utf-8"))
        off += length

    payload = count * dim * 4
    if len(data) - off < payload:
        raise TruncatedFile(
            f"{path}: payload has {len(data) - off} bytes, expected {payload}"
        )
    if len(data) - off > payload:
        raise TruncatedFile(f"{path}: {len(data) - off - payload} trailing bytes")
    vectors = np.frombuffer(
        data, dtype="<f4", count=count * dim, offset=off
    ).reshape(count, dim).copy()
    return EmbeddingSet(ids=tuple(ids), vectors=vectors)


def make_sidecar(path, scale: str, model: str) -> dict:
    """Sidecar manifest describing one embedding file, with its sha256."""
    import hashlib
    import json

    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    sidecar = {"path": str(path), "scale": scale, "model": model, "sha256": digest}
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    return sidecar


def load_from_sidecar(sidecar_path) -> tuple[str, EmbeddingSet]:
    """Load (scale label, embeddings) via a sidecar, verifying the sha256."""
    import hashlib
    import json

    with open(sidecar_path, encoding="utf-8") as fh:
        sidecar = json.load(fh)
    emb_path = sidecar["path"]
    if not os.path.isabs(emb_path):
        emb_path = os.path.join(os.path.dirname(os.path.abspath(sidecar_path)), emb_path)
    with open(emb_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    if digest != sidecar["sha256"]:
        raise IoFailure(f"{emb_path}: sha256 mismatch against sidecar")
    return sidecar.get("scale", ""), load_embeddings(emb_path)


def row_norms(vectors: np.ndarray) -> np.ndarray:
    # float64 accumulation so the 1e-6 unit-norm contract survives large dims
    return np.linalg.norm(vectors.astype(np.float64), axis=1)


def l2_normalize(emb: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit Euclidean norm. Zero rows are a hard error."""
    norms = row_norms(emb.vectors)
    bad = np.where(norms <= ZERO_NORM_EPS)[0]
    if bad.size:
        raise ZeroVector(f"zero-norm rows at indices {bad[:8].tolist()}")
    out = (emb.vectors.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingSet(ids=emb.ids, vectors=out)


def fuse_multiscale(group: ScaleGroup) -> EmbeddingSet:
    """Fuse per-resolution features into one descriptor per item.

    Each member row is unit-normalized, the normalized rows are averaged
    across scales, and the mean is normalized again. A single-member group
    therefore reduces to plain l2_normalize.
    """
    acc = np.zeros((len(group.ids), group.dim), dtype=np.float64)
    for _, member in group.scales:
        norms = row_norms(member.vectors)
        bad = np.where(norms <= ZERO_NORM_EPS)[0]
        if bad.size:
            raise ZeroVector(f"zero-norm rows at indices {bad[:8].tolist()}")
        acc += member.vectors.astype(np.float64) / norms[:, None]
    acc /= len(group.scales)
    mean_norms = np.linalg.norm(acc, axis=1)
    bad = np.where(mean_norms <= ZERO_NORM_EPS)[0]
    if bad.size:
        raise ZeroVector(f"scale means cancel to zero at indices {bad[:8].tolist()}")
    fused = (acc / mean_norms[:, None]).astype(np.float32)
    return EmbeddingSet(ids=group.ids, vectors=fused)
