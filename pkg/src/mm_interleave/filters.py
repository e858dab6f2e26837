"""Size/aspect gating and embedding classifier heads.

Heads are small frozen networks (an MLP or a logistic regression) applied
to precomputed image embeddings. Training happens elsewhere; weights load
from MMHD files:

    magic "MMHD" | version u32 | name len u16 + UTF-8 | kind u8 | layers u8
    per layer:    rows u32 | cols u32 | rows*cols f32 (row-major) | rows f32

Little-endian throughout. kind 0 = mlp (ReLU hidden), 1 = logistic.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus_model import ConfigError

HEAD_MAGIC = b"MMHD"
HEAD_VERSION = 1

_KIND_CODES = {"mlp": 0, "logistic": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

MIN_SIDE_PX = 150
MAX_ASPECT = 2.0


class CalibrationImpossible(ValueError):
    """Recall target cannot be evaluated (no positive labels)."""


def size_aspect_filter(
    width: int, height: int, min_px: int = MIN_SIDE_PX, max_aspect: float = MAX_ASPECT
) -> str | None:
    """Return a rejection reason, or None to keep.

    Rejects strictly-smaller-than min_px sides and strictly-outside
    [1/max_aspect, max_aspect] ratios; boundary values are kept.
    """
    if min(width, height) < min_px:
        return "too_small"
    ratio = width / height
    if ratio > max_aspect or ratio < 1.0 / max_aspect:
        return "aspect"
    return None


@dataclass
class ClassifierHead:
    name: str
    kind: str  # "mlp" | "logistic"
    layers: list[tuple[np.ndarray, np.ndarray]]  # (weights (out, in), biases (out,))

    def __post_init__(self) -> None:
        if self.kind not in _KIND_CODES:
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if not self.layers:
            raise ConfigError("head must have at least one layer")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ConfigError(f"layer {i} weight/bias shapes inconsistent: {w.shape}, {b.shape}")
            if i > 0 and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ConfigError(
                    f"layer {i} expects dim {w.shape[1]}, previous layer emits "
                    f"{self.layers[i - 1][0].shape[0]}"
                )
        if self.layers[-1][0].shape[0] != 1:
            raise ConfigError("head output dim must be 1")

    @property
    def input_dim(self) -> int:
        return int(self.layers[0][0].shape[1])


def score_head(embedding: np.ndarray, head: ClassifierHead) -> float:
    """Forward pass: ReLU between layers, sigmoid on the final scalar."""
    x = np.asarray(embedding, dtype=np.float32)
    if x.shape != (head.input_dim,):
        raise ConfigError(f"embedding dim {x.shape} does not match head input {head.input_dim}")
    for w, b in head.layers[:-1]:
        x = np.maximum(w @ x + b, 0.0)
    w, b = head.layers[-1]
    logit = float((w @ x + b)[0])
    return 1.0 / (1.0 + math.exp(-logit))


def nsfw_gate(prob: float, threshold: float = 0.1) -> bool:
    """True = keep. Rejects only probabilities strictly over the threshold."""
    return not prob > threshold


def face_gate(prob: float, calibrated_threshold: float) -> bool:
    """True = keep. Rejects probabilities at or above the calibrated cutoff."""
    return not prob >= calibrated_threshold


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    achieved_recall: float
    kept_fraction: float


def calibrate_threshold(
    scores: list[tuple[float, bool]], target_recall: float = 0.95
) -> CalibrationResult:
    """Largest threshold t with recall of "positive iff prob >= t" >= target.

    Thresholds are only evaluated at observed score values plus 1.0, so the
    search is finite and exact. kept_fraction reports the share of all
    scored items kept by the complementary rule "keep iff prob < t".
    """
    pos = np.sort(np.array([p for p, label in scores if label], dtype=np.float64))
    if pos.size == 0:
        raise CalibrationImpossible("no positive labels in calibration scores")
    all_scores = np.array([p for p, _ in scores], dtype=np.float64)
    candidates = sorted(set(all_scores.tolist()) | {1.0}, reverse=True)
    for t in candidates:
        # recall = fraction of positives with prob >= t
        recall = float(pos.size - np.searchsorted(pos, t, side="left")) / pos.size
        if recall >= target_recall:
            kept = float(np.count_nonzero(all_scores < t)) / all_scores.size
            return CalibrationResult(threshold=t, achieved_recall=recall, kept_fraction=kept)
    # unreachable: the smallest observed score always has recall 1.0
    raise CalibrationImpossible("no threshold reaches the recall target")


def write_head(head: ClassifierHead, path) -> None:
    name_raw = head.name.encode("utf-8")
    if len(name_raw) > 0xFFFF:
        raise ConfigError("head name too long")
    with open(path, "wb") as fh:
        fh.write(HEAD_MAGIC)
        fh.write(struct.pack("<I", HEAD_VERSION))
        fh.write(struct.pack("<H", len(name_raw)))
        fh.write(name_raw)
        fh.write(struct.pack("<BB", _KIND_CODES[head.kind], len(head.layers)))
        for w, b in head.layers:
            rows, cols = w.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.asarray(w, dtype="<f4").tobytes(order="C"))
            fh.write(np.asarray(b, dtype="<f4").tobytes())


def read_head(path) -> ClassifierHead:
    data = Path(path).read_bytes()
    if len(data) < 10 or data[:4] != HEAD_MAGIC:
        raise ConfigError(f"not a head-weights file: {path}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != HEAD_VERSION:
        raise ConfigError(f"unsupported head version {version}")
    (name_len,) = struct.unpack_from("<H", data, 8)
    off = 10
    name = data[off : off + name_len].decode("utf-8")
    off += name_len
    kind_code, n_layers = struct.unpack_from("<BB", data, off)
    off += 2
    if kind_code not in _KIND_NAMES:
        raise ConfigError(f"unknown head kind code {kind_code}")
    layers = []
    for _ in range(n_layers):
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        w = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols).copy()
        off += 4 * rows * cols
        b = np.frombuffer(data, dtype="<f4", count=rows, offset=off).copy()
        off += 4 * rows
        layers.append((w, b))
    if off != len(data):
        raise ConfigError(f"{len(data) - off} trailing bytes in head file")
    return ClassifierHead(name=name, kind=_KIND_NAMES[kind_code], layers=layers)
