"""Shared domain types for the interleaving pipeline.

Everything downstream of ingest speaks these types. All similarity values
are stored as raw cosine in [-1, 1]; thresholds quoted in "points"
(cosine * 100) are converted once, at configuration-parse time, via
:func:`normalize_threshold`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value (bad threshold, dim mismatch, ...)."""


def stable_doc_id(url: str) -> str:
    """64-bit stable hash of a URL, hex-encoded (16 chars)."""
    return hashlib.sha256(url.encode("utf-8")).hexdigest()[:16]


def normalize_threshold(value: float, unit: str) -> float:
    """Convert a configured similarity threshold to canonical cosine units.

    ``unit`` is ``"cosine"`` (returned unchanged) or ``"points"``
    (cosine * 100, divided by 100).
    """
    if not np.isfinite(value):
        raise ConfigError(f"threshold must be finite, got {value!r}")
    if unit == "cosine":
        if not -1.0 <= value <= 1.0:
            raise ConfigError(f"cosine threshold out of [-1, 1]: {value}")
        return float(value)
    if unit == "points":
        if not -100.0 <= value <= 100.0:
            raise ConfigError(f"points threshold out of [-100, 100]: {value}")
        return float(value) / 100.0
    raise ConfigError(f"unknown similarity unit {unit!r}")


@dataclass(frozen=True)
class Sentence:
    index: int
    text: str
    token_count: int


@dataclass(frozen=True)
class ImageCandidate:
    url: str
    source_doc: str


@dataclass(frozen=True)
class RawDocument:
    """One URL's text split into sentences plus candidate image references."""

    doc_id: str
    url: str
    sentences: tuple[Sentence, ...]
    image_candidates: tuple[ImageCandidate, ...]

    def __post_init__(self) -> None:
        for i, s in enumerate(self.sentences):
            if s.index != i:
                raise ValueError(f"sentence indices must be consecutive from 0, got {s.index} at {i}")


@dataclass(frozen=True)
class ImageRecord:
    """A downloaded, resized image with its derived per-image quantities."""

    image_id: str
    raw_url: str
    width: int
    height: int
    phash: int = 0
    embedding_id: str = ""
    head_scores: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dims must be >= 1, got {self.width}x{self.height}")
        for name, p in self.head_scores.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"head score {name}={p} outside [0, 1]")


class SimilarityMatrix:
    """Sentences x images cosine-similarity grid for one document.

    Rows are sentences, columns are images. Backed by a read-only float64
    array so instances can be shared freely.
    """

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray | Iterable[Iterable[float]]):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"similarity matrix must be 2-D, got shape {arr.shape}")
        arr = arr.copy()
        arr.flags.writeable = False
        self.values = arr

    @property
    def n_sentences(self) -> int:
        return self.values.shape[0]

    @property
    def n_images(self) -> int:
        return self.values.shape[1]

    def column(self, image_index: int) -> np.ndarray:
        return self.values[:, image_index]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SimilarityMatrix):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        return f"SimilarityMatrix({self.n_sentences}x{self.n_images})"


@dataclass(frozen=True)
class Assignment:
    """Injective image -> sentence mapping with per-pair similarity.

    ``pairs`` holds ``(image_index, sentence_index, similarity)`` tuples.
    ``unassigned_images`` lists original image indices dropped for low
    relevance before the assignment was solved.
    """

    pairs: tuple[tuple[int, int, float], ...]
    unassigned_images: tuple[int, ...] = ()

    @property
    def total_similarity(self) -> float:
        return float(sum(p[2] for p in self.pairs))

    def sentence_of(self, image_index: int) -> int:
        for img, sent, _ in self.pairs:
            if img == image_index:
                return sent
        raise KeyError(image_index)


@dataclass(frozen=True)
class ImageInfo:
    image_name: str
    raw_url: str
    matched_text_index: int
    matched_sim: float


@dataclass(frozen=True)
class InterleavedDocument:
    """Output record: sentence list with images attached at sentence positions.

    ``doc_id`` is carried in memory only; the serialized form has exactly the
    fields url / text_list / image_info / similarity_matrix, and readers
    rebuild doc_id as the stable URL hash.
    """

    url: str
    text_list: tuple[str, ...]
    image_info: tuple[ImageInfo, ...]
    similarity_matrix: SimilarityMatrix
    doc_id: str = ""

    def __post_init__(self) -> None:
        n = len(self.text_list)
        for info in self.image_info:
            if not 0 <= info.matched_text_index < n:
                raise ValueError(
                    f"matched_text_index {info.matched_text_index} out of range for {n} sentences"
                )
            if not -1.0 <= info.matched_sim <= 1.0:
                raise ValueError(f"matched_sim {info.matched_sim} outside [-1, 1]")
        if not self.doc_id:
            object.__setattr__(self, "doc_id", stable_doc_id(self.url))

    def to_json_obj(self) -> dict:
        return {
            "url": self.url,
            "text_list": list(self.text_list),
            "image_info": [
                {
                    "image_name": info.image_name,
                    "raw_url": info.raw_url,
                    "matched_text_index": info.matched_text_index,
                    "matched_sim": info.matched_sim,
                }
                for info in self.image_info
            ],
            "similarity_matrix": [list(row) for row in self.similarity_matrix.values],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "InterleavedDocument":
        infos = tuple(
            ImageInfo(
                image_name=e["image_name"],
                raw_url=e["raw_url"],
                matched_text_index=int(e["matched_text_index"]),
                matched_sim=float(e["matched_sim"]),
            )
            for e in obj["image_info"]
        )
        return cls(
            url=obj["url"],
            text_list=tuple(obj["text_list"]),
            image_info=infos,
            similarity_matrix=SimilarityMatrix(obj["similarity_matrix"]),
        )


def dumps_document(doc: InterleavedDocument) -> str:
    """Serialize one document as a JSON line (no trailing newline).

    Floats use Python's shortest round-trip repr, so writing the same
    document twice is byte-identical and parsing restores exact values.
    """
    return json.dumps(doc.to_json_obj(), ensure_ascii=False, separators=(",", ":"))


def loads_document(line: str) -> InterleavedDocument:
    return InterleavedDocument.from_json_obj(json.loads(line))


def write_documents(path, docs: Iterable[InterleavedDocument]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(dumps_document(doc))
            fh.write("\n")
            n += 1
    return n


def read_documents(path) -> Iterator[InterleavedDocument]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield loads_document(line)
