"""Alignment-quality metrics (AUC, precision@1) and the brute-force oracle.

Benchmark input is JSON Lines, one labeled document per line:
{"scores": [[...], ...], "gold": [[idx, ...], ...]} where scores rows are
sentences, columns are images, and gold lists each image's correct
sentence indices. Reports render metrics x100 to one decimal.
"""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .corpus_model import Assignment, SimilarityMatrix
from .aligner import max_assignment_baseline, solve_assignment

ORACLE_MAX_SIDE = 8


class OracleTooLarge(ValueError):
    """Brute-force oracle refused: min(n_sentences, n_images) exceeds the guard."""


class EmptyBenchmark(ValueError):
    """No documents to evaluate."""


@dataclass(frozen=True)
class LabeledDocument:
    scores: SimilarityMatrix
    gold: tuple[frozenset[int], ...]  # per image, the correct sentence indices

    def __post_init__(self) -> None:
        if len(self.gold) != self.scores.n_images:
            raise ValueError(f"{len(self.gold)} gold sets for {self.scores.n_images} images")
        for g in self.gold:
            if not g:
                raise ValueError("every image needs at least one gold sentence")
            if any(not 0 <= s < self.scores.n_sentences for s in g):
                raise ValueError("gold sentence index out of range")

    @classmethod
    def from_json_obj(cls, obj: dict) -> "LabeledDocument":
        return cls(
            scores=SimilarityMatrix(obj["scores"]),
            gold=tuple(frozenset(int(i) for i in g) for g in obj["gold"]),
        )


def precision_at_1(doc: LabeledDocument) -> float:
    """Fraction of images whose argmax sentence (tie -> lowest) is gold."""
    best = doc.scores.values.argmax(axis=0)
    hits = sum(1 for img, sent in enumerate(best) if int(sent) in doc.gold[img])
    return hits / doc.scores.n_images


def auc(doc: LabeledDocument) -> float:
    """Mean over images of P(random positive sentence outscores a random
    negative one), ties counting one half."""
    values = doc.scores.values
    per_image = []
    for img in range(doc.scores.n_images):
        pos = sorted(doc.gold[img])
        neg = [s for s in range(doc.scores.n_sentences) if s not in doc.gold[img]]
        if not neg:
            warnings.warn(f"image {img} has no negative sentences; skipped", stacklevel=2)
            continue
        col = values[:, img]
        ordered = 0.0
        for p in pos:
            for n in neg:
                if col[p] > col[n]:
                    ordered += 1.0
                elif col[p] == col[n]:
                    ordered += 0.5
        per_image.append(ordered / (len(pos) * len(neg)))
    if not per_image:
        raise EmptyBenchmark("no image in this document has both positives and negatives")
    return float(np.mean(per_image))


def brute_force_assignment(matrix: SimilarityMatrix) -> Assignment:
    """Exhaustive maximum-total injective map of the smaller side into the larger.

    Oracle only: guarded at min side <= 8. Pairs are (image, sentence, sim)
    sorted by image index; when images outnumber sentences only the
    sentence-covering pairs are returned.
    """
    values = matrix.values
    n_s, n_i = values.shape
    if min(n_s, n_i) > ORACLE_MAX_SIDE:
        raise OracleTooLarge(f"min side {min(n_s, n_i)} exceeds oracle guard {ORACLE_MAX_SIDE}")

    best_total = -np.inf
    best_pairs: tuple[tuple[int, int, float], ...] = ()
    if n_i <= n_s:
        for sents in itertools.permutations(range(n_s), n_i):
            total = sum(values[s, i] for i, s in enumerate(sents))
            if total > best_total:
                best_total = total
                best_pairs = tuple(
                    (i, s, float(values[s, i])) for i, s in enumerate(sents)
                )
    else:
        for imgs in itertools.permutations(range(n_i), n_s):
            total = sum(values[s, i] for s, i in enumerate(imgs))
            if total > best_total:
                best_total = total
                best_pairs = tuple(
                    sorted((i, s, float(values[s, i])) for s, i in enumerate(imgs))
                )
    return Assignment(pairs=best_pairs)


def _lap_predictions(doc: LabeledDocument) -> dict[int, int]:
    assignment = solve_assignment(doc.scores)
    return {img: sent for img, sent, _ in assignment.pairs}


def run_benchmark(docs: list[LabeledDocument], scorer: str = "max") -> dict:
    """Macro-averaged AUC and p@1 over documents, rendered x100, one decimal.

    scorer "max" predicts each image's argmax sentence; "lap" predicts the
    assignment solver's sentence. AUC ranks raw scores either way.
    """
    if not docs:
        raise EmptyBenchmark("no documents")
    if scorer not in ("lap", "max"):
        raise ValueError(f"scorer must be 'lap' or 'max', got {scorer!r}")

    p_vals = []
    auc_vals = []
    for doc in docs:
        if scorer == "max":
            p_vals.append(precision_at_1(doc))
        else:
            pred = _lap_predictions(doc)
            hits = sum(1 for img, g in enumerate(doc.gold) if pred[img] in g)
            p_vals.append(hits / doc.scores.n_images)
        auc_vals.append(auc(doc))
    return {
        "scorer": scorer,
        "auc": round(float(np.mean(auc_vals)) * 100, 1),
        "p_at_1": round(float(np.mean(p_vals)) * 100, 1),
        "n_docs": len(docs),
    }


def read_benchmark(path) -> list[LabeledDocument]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                docs.append(LabeledDocument.from_json_obj(json.loads(line)))
    return docs
