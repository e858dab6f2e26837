"""Batch embedding: manifest in, MMEB shards out."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .mmeb import write_shard_set

log = logging.getLogger("clip_sidecar")


class ManifestEntry:
    __slots__ = ("id", "kind", "value")

    def __init__(self, id: str, kind: str, value: str):
        if kind not in ("image", "text"):
            raise ValueError(f"kind must be image or text, got {kind!r}")
        self.id = id
        self.kind = kind
        self.value = value


def read_manifest(path) -> list[ManifestEntry]:
    """JSON Lines of {id, kind: image|text, path|text}."""
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            eid = obj["id"]
            if eid in seen:
                raise ValueError(f"{path}:{n}: duplicate id {eid!r}")
            seen.add(eid)
            kind = obj["kind"]
            value = obj["path"] if kind == "image" else obj["text"]
            entries.append(ManifestEntry(eid, kind, value))
    return entries


def embed_batch(entries: list[ManifestEntry], encoder, batch_size: int = 16) -> list[tuple[str, np.ndarray]]:
    """Embed every readable entry, preserving manifest order.

    Unreadable images are skipped and logged; text entries always embed.
    """
    results: dict[int, tuple[str, np.ndarray]] = {}

    def flush(kind: str, batch: list[tuple[int, str, object]]) -> None:
        if not batch:
            return
        payload = [item for _, _, item in batch]
        vecs = encoder.encode_images(payload) if kind == "image" else encoder.encode_texts(payload)
        for (idx, eid, _), vec in zip(batch, vecs):
            results[idx] = (eid, vec)

    img_batch: list[tuple[int, str, object]] = []
    txt_batch: list[tuple[int, str, object]] = []
    for idx, entry in enumerate(entries):
        if entry.kind == "image":
            try:
                with Image.open(entry.value) as img:
                    img_batch.append((idx, entry.id, img.convert("RGB")))
            except OSError as exc:
                log.warning("skipping unreadable image %s (%s): %s", entry.id, entry.value, exc)
                continue
            if len(img_batch) >= batch_size:
                flush("image", img_batch)
                img_batch = []
        else:
            txt_batch.append((idx, entry.id, entry.value))
            if len(txt_batch) >= batch_size:
                flush("text", txt_batch)
                txt_batch = []
    flush("image", img_batch)
    flush("text", txt_batch)
    return [results[i] for i in sorted(results)]


def run(manifest_path, encoder, out_dir, batch_size: int = 16, shard_size: int = 100_000) -> int:
    """Full job: returns the number of vectors written."""
    entries = read_manifest(manifest_path)
    embedded = embed_batch(entries, encoder, batch_size=batch_size)
    if not embedded:
        return 0
    write_shard_set(out_dir, encoder.dim, embedded, shard_size=shard_size)
    return len(embedded)
