"""MMEB shard writer.

This is the interchange format the downstream pipeline reads:

    magic "MMEB" | version u32 | dim u32 | count u64
    per entry:   id length u16 | id UTF-8 bytes | dim * f32

All little-endian. The format is implemented here independently so the
sidecar stays decoupled from the consumer package.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMEB"
VERSION = 1


def write_shard(path, dim: int, entries: list[tuple[str, np.ndarray]]) -> None:
    seen: set[str] = set()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", VERSION, dim, len(entries)))
        for eid, vec in entries:
            if eid in seen:
                raise ValueError(f"duplicate id {eid!r}")
            seen.add(eid)
            if vec.shape != (dim,):
                raise ValueError(f"entry {eid!r} has shape {vec.shape}, want ({dim},)")
            raw = eid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"id too long: {len(raw)} bytes")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def write_shard_set(out_dir, dim: int, entries: list[tuple[str, np.ndarray]], shard_size: int) -> list[str]:
    """Chunk entries into shard files plus a shard-set manifest; returns the
    shard file names."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(0, max(len(entries), 1), shard_size):
        chunk = entries[i : i + shard_size]
        name = f"embeddings_{i // shard_size:04d}.mmeb"
        write_shard(out_dir / name, dim, chunk)
        names.append(name)
    with open(out_dir / "shardset.json", "w", encoding="utf-8") as fh:
        json.dump({"dim": dim, "shards": names}, fh)
    return names
