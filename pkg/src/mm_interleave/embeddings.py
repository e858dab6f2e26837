"""Embedding storage and similarity.

Embeddings are opaque unit vectors produced elsewhere (a real encoder
sidecar, or :func:`mock_embed` for fully deterministic test runs) and moved
around in MMEB shard files:

    magic "MMEB" | version u32 | dim u32 | count u64
    per entry:   id length u16 | id UTF-8 bytes | dim * f32

All integers and floats little-endian.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus_model import ConfigError

MAGIC = b"MMEB"
VERSION = 1


class ShardCorrupt(Exception):
    """Shard file failed validation; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ZeroVector(ValueError):
    """Cosine similarity is undefined for an all-zero vector."""


@dataclass
class EmbeddingShard:
    dim: int
    entries: list[tuple[str, np.ndarray]]

    def __post_init__(self) -> None:
        for eid, vec in self.entries:
            if vec.shape != (self.dim,):
                raise ConfigError(f"entry {eid!r} has dim {vec.shape}, shard dim is {self.dim}")

    def to_lookup(self) -> dict[str, np.ndarray]:
        return {eid: vec for eid, vec in self.entries}


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """dot(u, v) / (||u|| ||v||), raising ZeroVector on degenerate input."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ConfigError(f"dim mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine undefined for zero-norm vector")
    return float(np.dot(u, v) / (nu * nv))


def write_shard(shard: EmbeddingShard, path) -> None:
    seen: set[str] = set()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", VERSION, shard.dim, len(shard.entries)))
        for eid, vec in shard.entries:
            if eid in seen:
                raise ConfigError(f"duplicate embedding id {eid!r} in shard")
            seen.add(eid)
            raw = eid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ConfigError(f"embedding id too long ({len(raw)} bytes)")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def read_shard(path) -> EmbeddingShard:
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise ShardCorrupt("file shorter than header", len(data))
    if data[:4] != MAGIC:
        raise ShardCorrupt(f"bad magic {data[:4]!r}", 0)
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != VERSION:
        raise ShardCorrupt(f"unsupported version {version}", 4)
    if dim == 0:
        raise ShardCorrupt("dim must be positive", 8)
    off = 20
    entries: list[tuple[str, np.ndarray]] = []
    vec_bytes = 4 * dim
    for _ in range(count):
        if off + 2 > len(data):
            raise ShardCorrupt("truncated id length", off)
        (id_len,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + id_len + vec_bytes > len(data):
            raise ShardCorrupt("truncated entry", off)
        eid = data[off : off + id_len].decode("utf-8")
        off += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
        off += vec_bytes
        entries.append((eid, vec))
    if off != len(data):
        raise ShardCorrupt(f"{len(data) - off} trailing bytes", off)
    return EmbeddingShard(dim=dim, entries=entries)


def write_shard_set_manifest(path, shard_paths: list[str], dim: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"dim": dim, "shards": list(shard_paths)}, fh)


def load_shard_set(manifest_path) -> dict[str, np.ndarray]:
    """Load every shard listed in a shard-set manifest into one lookup.

    All shards must agree with the manifest dim; ids must be unique across
    the whole set.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    dim = int(manifest["dim"])
    lookup: dict[str, np.ndarray] = {}
    for rel in manifest["shards"]:
        p = Path(rel)
        if not p.is_absolute():
            p = manifest_path.parent / p
        shard = read_shard(p)
        if shard.dim != dim:
            raise ConfigError(f"shard {p} has dim {shard.dim}, manifest says {dim}")
        for eid, vec in shard.entries:
            if eid in lookup:
                raise ConfigError(f"duplicate embedding id {eid!r} across shards")
            lookup[eid] = vec
    return lookup


def mock_embed(id_: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-random unit vector keyed by (seed, id).

    The construction only uses SHA-256 and correctly-rounded float ops
    (divide, sqrt), so identical inputs give identical bytes on every
    platform.
    """
    if dim < 2:
        raise ConfigError(f"mock embedding dim must be >= 2, got {dim}")
    key = struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF) + id_.encode("utf-8")
    vals = np.empty(dim, dtype=np.float64)
    block = 0
    i = 0
    while i < dim:
        digest = hashlib.sha256(key + struct.pack("<I", block)).digest()
        for j in range(0, 32, 8):
            if i >= dim:
                break
            (u,) = struct.unpack_from("<Q", digest, j)
            # top 53 bits -> uniform in [0, 1), then shift to [-1, 1)
            vals[i] = (u >> 11) * (2.0 ** -53) * 2.0 - 1.0
            i += 1
        block += 1
    norm = float(np.sqrt(np.dot(vals, vals)))
    if norm < 1e-12:
        vals[0] = 1.0
        norm = 1.0
    return (vals / norm).astype(np.float32)
