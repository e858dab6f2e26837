"""Convert interleaved documents into capped training sequences.

A sequence is a token window of at most ``cap`` tokens with its images
attached at token positions. Emitted sequences always satisfy: token count
within cap, 1 to ``max_images`` images, every image similarity at or above
``min_sim``. The tokenizer is whitespace splitting by default and pluggable
via a token-count callback acting on sentence text.
"""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from typing import Callable

from .corpus_model import InterleavedDocument

TOKEN_CAP = 256
MIN_SIM = 0.20
MAX_IMAGES = 5
P_DROP_SINGLE = 0.5


@dataclass(frozen=True)
class ImageSlot:
    position: int  # insertion point into the token list, 0..len(tokens)
    image_id: str
    sim: float


@dataclass(frozen=True)
class TrainingSequence:
    doc_id: str
    tokens: tuple[str, ...]
    images: tuple[ImageSlot, ...]

    def to_json_obj(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "token_texts": list(self.tokens),
            "images": [
                {"position": s.position, "image_id": s.image_id, "sim": s.sim}
                for s in self.images
            ],
        }


def document_rng(seed: int, doc_id: str) -> random.Random:
    """Per-document PRNG stream, stable across runs and platforms."""
    digest = hashlib.sha256(f"{seed}:{doc_id}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


def _maximal_windows(counts: list[int], cap: int) -> list[tuple[int, int, bool]]:
    """All (start, end, truncated) candidate windows, end inclusive.

    A window is maximal when its token total fits the cap and extending one
    sentence on either side would exceed it (or leave the document).
    Sentences longer than the cap become truncated singleton candidates.
    """
    n = len(counts)
    windows: list[tuple[int, int, bool]] = []
    prev_end = -1
    for start in range(n):
        if counts[start] > cap:
            windows.append((start, start, True))
            prev_end = start
            continue
        total = 0
        end = start - 1
        while end + 1 < n and total + counts[end + 1] <= cap:
            end += 1
            total += counts[end]
        if end < start:
            continue
        # right-maximal by construction; left-maximal iff no earlier window
        # already reaches this end
        if end > prev_end:
            windows.append((start, end, False))
            prev_end = end
    return windows


def sample_subsequence(
    doc: InterleavedDocument,
    cap: int = TOKEN_CAP,
    rng: random.Random | None = None,
    placement: str = "after",
    tokenize: Callable[[str], list[str]] = str.split,
) -> TrainingSequence:
    """Uniformly pick one maximal sentence window and attach its images.

    Images ride with their assigned sentence: placed at the sentence's
    first token ("before"), just past its last token ("after"), or a
    per-image coin flip ("random").
    """
    rng = rng or random.Random(0)
    sent_tokens = [tokenize(t) for t in doc.text_list]
    counts = [len(t) for t in sent_tokens]
    windows = _maximal_windows(counts, cap)
    start, end, truncated = windows[rng.randrange(len(windows))]

    tokens: list[str] = []
    sent_start: dict[int, int] = {}
    sent_end: dict[int, int] = {}
    for s in range(start, end + 1):
        sent_start[s] = len(tokens)
        tokens.extend(sent_tokens[s])
        sent_end[s] = len(tokens)
    if truncated:
        tokens = tokens[:cap]
        sent_end[start] = len(tokens)

    slots = []
    for info in doc.image_info:
        s = info.matched_text_index
        if not start <= s <= end:
            continue
        if placement == "before":
            pos = sent_start[s]
        elif placement == "after":
            pos = sent_end[s]
        elif placement == "random":
            pos = sent_start[s] if rng.random() < 0.5 else sent_end[s]
        else:
            raise ValueError(f"unknown placement {placement!r}")
        slots.append(ImageSlot(position=pos, image_id=info.image_name, sim=info.matched_sim))
    return TrainingSequence(doc_id=doc.doc_id, tokens=tuple(tokens), images=tuple(slots))


def filter_sequence(
    seq: TrainingSequence, min_sim: float = MIN_SIM, max_images: int = MAX_IMAGES
) -> TrainingSequence | None:
    """Drop low-similarity images, trim to the image cap, discard if empty.

    Images with sim < min_sim go first (strict). If more than max_images
    remain, the highest-similarity ones are kept (ties -> lower image
    index), preserving positional order in the output.
    """
    indexed = [(i, s) for i, s in enumerate(seq.images) if not s.sim < min_sim]
    if len(indexed) > max_images:
        ranked = sorted(indexed, key=lambda pair: (-pair[1].sim, pair[0]))[:max_images]
        indexed = sorted(ranked, key=lambda pair: pair[0])
    if not indexed:
        return None
    return TrainingSequence(doc_id=seq.doc_id, tokens=seq.tokens, images=tuple(s for _, s in indexed))


def drop_single_image(
    seq: TrainingSequence, p_drop: float = P_DROP_SINGLE, rng: random.Random | None = None
) -> TrainingSequence | None:
    """Discard single-image sequences with probability p_drop."""
    rng = rng or random.Random(0)
    if len(seq.images) == 1 and rng.random() < p_drop:
        return None
    return seq


def flatten_document(
    doc: InterleavedDocument,
    seed: int = 0,
    cap: int = TOKEN_CAP,
    min_sim: float = MIN_SIM,
    max_images: int = MAX_IMAGES,
    p_drop: float = P_DROP_SINGLE,
    placement: str = "after",
    tokenize: Callable[[str], list[str]] = str.split,
) -> TrainingSequence | None:
    """One document -> at most one emitted training sequence."""
    rng = document_rng(seed, doc.doc_id)
    seq = sample_subsequence(doc, cap=cap, rng=rng, placement=placement, tokenize=tokenize)
    seq = filter_sequence(seq, min_sim=min_sim, max_images=max_images)
    if seq is None:
        return None
    return drop_single_image(seq, p_drop=p_drop, rng=rng)


def dumps_sequence(seq: TrainingSequence) -> str:
    return json.dumps(seq.to_json_obj(), ensure_ascii=False, separators=(",", ":"))
