"""Perceptual hashing and duplicate detection.

The hash is the classical DCT pHash, pinned exactly so reruns are stable:
grayscale, Lanczos resize to 32x32, orthonormal 2-D DCT-II, keep the 8x8
low-frequency block, set bit (r*8+c) iff that coefficient exceeds the
median of the 64 block coefficients. Bit 63 is block position (0,0).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus_model import ImageRecord

INDEX_MAGIC = b"MMDI"
INDEX_VERSION = 1

_DCT_SIZE = 32
_BLOCK = 8


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n).reshape(-1, 1)
    x = np.arange(n).reshape(1, -1)
    mat = np.cos(np.pi * (2 * x + 1) * k / (2 * n))
    mat[0, :] *= np.sqrt(1.0 / n)
    mat[1:, :] *= np.sqrt(2.0 / n)
    return mat


_DCT32 = _dct_matrix(_DCT_SIZE)


def dct2(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of a square array."""
    return _DCT32 @ block @ _DCT32.T


def phash64(image: Image.Image) -> int:
    """64-bit perceptual hash of image content (independent of encoding)."""
    gray = image.convert("L").resize((_DCT_SIZE, _DCT_SIZE), Image.LANCZOS)
    pixels = np.asarray(gray, dtype=np.float64)
    coeffs = dct2(pixels)[:_BLOCK, :_BLOCK]
    median = float(np.median(coeffs))
    bits = 0
    for r in range(_BLOCK):
        for c in range(_BLOCK):
            bits <<= 1
            if coeffs[r, c] > median:
                bits |= 1
    return bits


def hamming(a: int, b: int) -> int:
    """Number of differing bits between two 64-bit hashes."""
    return ((a ^ b) & 0xFFFFFFFFFFFFFFFF).bit_count()


def dedup_within_document(records: list[ImageRecord], threshold: int) -> list[ImageRecord]:
    """Greedy first-occurrence-wins dedup in document order.

    A record is dropped iff its hash is within Hamming <= threshold of an
    already-kept record.
    """
    if not 0 <= threshold <= 64:
        raise ValueError(f"threshold must be in [0, 64], got {threshold}")
    kept: list[ImageRecord] = []
    for rec in records:
        if all(hamming(rec.phash, k.phash) > threshold for k in kept):
            kept.append(rec)
    return kept


@dataclass
class DuplicateIndex:
    """Cluster counts over a corpus sample of hashes.

    Clusters come from union-find with an edge wherever two sample hashes
    are within Hamming <= threshold; each persisted cluster keeps the hash
    of its first member as representative.
    """

    threshold: int
    clusters: list[tuple[int, int]]  # (representative hash, count)
    sample_size: int

    def match_count(self, phash: int) -> int:
        """Largest cluster count among clusters whose representative is
        within threshold of the query, 0 if none match."""
        best = 0
        for rep, count in self.clusters:
            if hamming(phash, rep) <= self.threshold and count > best:
                best = count
        return best


def build_duplicate_index(sample_hashes: list[int], threshold: int) -> DuplicateIndex:
    n = len(sample_hashes)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if hamming(sample_hashes[i], sample_hashes[j]) <= threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    members: dict[int, list[int]] = {}
    for i in range(n):
        members.setdefault(find(i), []).append(i)
    clusters = [(sample_hashes[root], len(idx)) for root, idx in sorted(members.items())]
    return DuplicateIndex(threshold=threshold, clusters=clusters, sample_size=n)


def drop_frequent_duplicates(
    records: list[ImageRecord], index: DuplicateIndex, max_count: int = 10
) -> list[ImageRecord]:
    """Drop records matching a sample cluster with more than max_count members."""
    return [rec for rec in records if index.match_count(rec.phash) <= max_count]


def write_duplicate_index(index: DuplicateIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<IBQ", INDEX_VERSION, index.threshold, len(index.clusters)))
        for rep, count in index.clusters:
            fh.write(struct.pack("<QI", rep, count))


def read_duplicate_index(path) -> DuplicateIndex:
    data = Path(path).read_bytes()
    if len(data) < 17 or data[:4] != INDEX_MAGIC:
        raise ValueError(f"not a duplicate-index file: {path}")
    version, threshold, count = struct.unpack_from("<IBQ", data, 4)
    if version != INDEX_VERSION:
        raise ValueError(f"unsupported duplicate-index version {version}")
    clusters = []
    off = 17
    total = 0
    for _ in range(count):
        rep, c = struct.unpack_from("<QI", data, off)
        off += 12
        clusters.append((rep, c))
        total += c
    return DuplicateIndex(threshold=threshold, clusters=clusters, sample_size=total)
