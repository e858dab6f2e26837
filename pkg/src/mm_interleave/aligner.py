"""Image-to-sentence alignment via maximum-weight bipartite assignment.

Pipeline per document: build the sentences x images cosine matrix, drop
images whose best sentence falls below the relevance threshold, then solve
an exact linear assignment. Documents with more images than sentences get
one image per sentence from the exact solve, and every remaining image is
attached to its maximum-similarity sentence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus_model import (
    Assignment,
    ConfigError,
    ImageInfo,
    ImageRecord,
    InterleavedDocument,
    RawDocument,
    SimilarityMatrix,
)
from .embeddings import ZeroVector

PLACEMENTS = ("before", "after", "random")


class InvalidMatrix(ValueError):
    """Similarity matrix contains non-finite entries."""


@dataclass(frozen=True)
class AlignmentParams:
    relevance_tau: float = 0.15
    placement: str = "after"
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not -1.0 <= self.relevance_tau <= 1.0:
            raise ConfigError(f"relevance tau out of [-1, 1]: {self.relevance_tau}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")


def build_similarity_matrix(
    sentence_embeddings: list[np.ndarray], image_embeddings: list[np.ndarray]
) -> SimilarityMatrix:
    """Pairwise cosine grid: values[s][i] = cosine(sentence s, image i)."""
    if not sentence_embeddings or not image_embeddings:
        raise ConfigError("need at least one sentence and one image embedding")
    s = np.asarray(sentence_embeddings, dtype=np.float64)
    im = np.asarray(image_embeddings, dtype=np.float64)
    if s.shape[1] != im.shape[1]:
        raise ConfigError(f"embedding dims differ: {s.shape[1]} vs {im.shape[1]}")
    s_norm = np.linalg.norm(s, axis=1)
    i_norm = np.linalg.norm(im, axis=1)
    for r in np.flatnonzero(s_norm == 0.0):
        raise ZeroVector(f"zero-norm sentence embedding at matrix cell ({r}, 0)")
    for c in np.flatnonzero(i_norm == 0.0):
        raise ZeroVector(f"zero-norm image embedding at matrix cell (0, {c})")
    values = (s / s_norm[:, None]) @ (im / i_norm[:, None]).T
    np.clip(values, -1.0, 1.0, out=values)
    return SimilarityMatrix(values)


def drop_low_relevance(
    matrix: SimilarityMatrix, tau: float
) -> tuple[SimilarityMatrix, list[int]]:
    """Remove image columns whose best sentence similarity is below tau.

    Returns the reduced matrix and the kept columns' original indices. An
    empty keep list is legal; the caller excludes the document.
    """
    col_max = matrix.values.max(axis=0)
    kept = [int(i) for i in np.flatnonzero(col_max >= tau)]
    return SimilarityMatrix(matrix.values[:, kept]), kept


def _solve_min_cost(cost: np.ndarray) -> np.ndarray:
    """Exact rectangular min-cost assignment, rows <= cols.

    Shortest-augmenting-path method with dual potentials (Jonker-Volgenant
    family): rows are inserted one at a time; each insertion runs a
    Dijkstra-style search over reduced costs for the cheapest augmenting
    path, then updates the potentials so all matched edges stay tight.
    O(n_rows^2 * n_cols). Returns col index assigned to each row.
    """
    n_rows, n_cols = cost.shape
    u = np.zeros(n_rows)  # row potentials
    v = np.zeros(n_cols)  # col potentials
    row_at = np.full(n_cols, -1, dtype=np.int64)  # col -> matched row
    col_at = np.full(n_rows, -1, dtype=np.int64)  # row -> matched col

    for cur_row in range(n_rows):
        shortest = np.full(n_cols, np.inf)
        came_from = np.full(n_cols, -1, dtype=np.int64)
        scanned_rows: list[int] = []
        scanned_col = np.zeros(n_cols, dtype=bool)
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            scanned_rows.append(i)
            reduced = min_val + cost[i] - u[i] - v
            improves = ~scanned_col & (reduced < shortest)
            shortest[improves] = reduced[improves]
            came_from[improves] = i

            open_costs = np.where(scanned_col, np.inf, shortest)
            j = int(np.argmin(open_costs))
            min_val = float(open_costs[j])
            scanned_col[j] = True
            if row_at[j] == -1:
                sink = j
            else:
                i = int(row_at[j])

        u[cur_row] += min_val
        for r in scanned_rows:
            if r != cur_row:
                u[r] += min_val - shortest[col_at[r]]
        v[scanned_col] -= min_val - shortest[scanned_col]

        # flip matched/unmatched edges along the augmenting path
        j = sink
        while True:
            i = int(came_from[j])
            row_at[j] = i
            col_at[i], j = j, col_at[i]
            if i == cur_row:
                break
    return col_at


def solve_assignment(matrix: SimilarityMatrix) -> Assignment:
    """Optimal interleaving assignment for one document.

    With n_images <= n_sentences the result is the exact maximum-total
    injective image -> sentence map. With more images than sentences, the
    exact solve first gives every sentence one image (injective both ways),
    then each leftover image lands on its maximum-similarity sentence.

    Pair order: the exact-solve pairs sorted by image index, then leftover
    pairs sorted by image index.
    """
    values = matrix.values
    if not np.all(np.isfinite(values)):
        raise InvalidMatrix("similarity matrix has non-finite entries")
    n_s, n_i = values.shape
    if n_s < 1 or n_i < 1:
        raise InvalidMatrix("assignment needs at least one sentence and one image")

    # maximize by min-cost on the negated matrix, shifted non-negative;
    # the shift is uniform so it cannot change which assignment is optimal
    shift = float(values.max())

    if n_i <= n_s:
        cost = shift - values.T  # rows = images
        img_to_sent = _solve_min_cost(cost)
        pairs = tuple(
            (img, int(sent), float(values[sent, img])) for img, sent in enumerate(img_to_sent)
        )
        return Assignment(pairs=pairs)

    cost = shift - values  # rows = sentences
    sent_to_img = _solve_min_cost(cost)
    base = sorted(
        (int(img), sent, float(values[sent, img])) for sent, img in enumerate(sent_to_img)
    )
    used = {img for img, _, _ in base}
    excess = []
    for img in range(n_i):
        if img not in used:
            sent = int(np.argmax(values[:, img]))  # tie -> lowest sentence index
            excess.append((img, sent, float(values[sent, img])))
    return Assignment(pairs=tuple(base + excess))


def max_assignment_baseline(matrix: SimilarityMatrix) -> Assignment:
    """Each image independently on its argmax sentence (ties -> lowest index)."""
    values = matrix.values
    best = values.argmax(axis=0)
    pairs = tuple(
        (img, int(sent), float(values[sent, img])) for img, sent in enumerate(best)
    )
    return Assignment(pairs=pairs)


def interleave(
    doc: RawDocument,
    records: list[ImageRecord],
    matrix: SimilarityMatrix,
    assignment: Assignment,
    params: AlignmentParams,
) -> InterleavedDocument | None:
    """Emit the output record, or None when no image survived.

    ``records`` and ``matrix`` columns are the surviving images, in column
    order; image_info follows the same order.
    """
    if not records:
        return None
    if len(records) != matrix.n_images:
        raise ConfigError(f"{len(records)} records vs {matrix.n_images} matrix columns")
    sentence_of = {img: (sent, sim) for img, sent, sim in assignment.pairs}
    infos = []
    for col, rec in enumerate(records):
        sent, sim = sentence_of[col]
        ext = rec.raw_url.rsplit(".", 1)[-1].lower() if "." in rec.raw_url else "jpg"
        infos.append(
            ImageInfo(
                image_name=f"{rec.image_id}.{ext}",
                raw_url=rec.raw_url,
                matched_text_index=sent,
                matched_sim=sim,
            )
        )
    return InterleavedDocument(
        url=doc.url,
        text_list=tuple(s.text for s in doc.sentences),
        image_info=tuple(infos),
        similarity_matrix=matrix,
        doc_id=doc.doc_id,
    )


def align_document(
    doc: RawDocument,
    sentence_vecs: list[np.ndarray],
    records: list[ImageRecord],
    image_vecs: list[np.ndarray],
    params: AlignmentParams,
) -> tuple[InterleavedDocument | None, int]:
    """Full per-document alignment; returns (document | None, n_low_relevance)."""
    if not records:
        return None, 0
    matrix = build_similarity_matrix(sentence_vecs, image_vecs)
    reduced, kept = drop_low_relevance(matrix, params.relevance_tau)
    dropped = [i for i in range(len(records)) if i not in set(kept)]
    if not kept:
        return None, len(dropped)
    assignment = solve_assignment(reduced)
    assignment = Assignment(pairs=assignment.pairs, unassigned_images=tuple(dropped))
    out = interleave(doc, [records[i] for i in kept], reduced, assignment, params)
    return out, len(dropped)
