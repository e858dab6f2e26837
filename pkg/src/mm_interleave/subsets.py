"""Corpus variants: fewer-faces (ff) and the stricter core subset."""
from __future__ import annotations

from dataclasses import dataclass

from .corpus_model import ImageRecord, InterleavedDocument, SimilarityMatrix
from .imagehash import dedup_within_document


class MissingScore(KeyError):
    """A required per-image score or hash is absent."""


@dataclass(frozen=True)
class CoreParams:
    min_sentences: int = 4
    max_sentences: int = 40
    min_images: int = 2
    max_images: int = 15
    dedup_threshold: int = 10
    sim_floor: float = 0.25  # cosine
    sim_floor_fraction: float = 0.75

    def __post_init__(self) -> None:
        if self.min_sentences > self.max_sentences or self.min_images > self.max_images:
            raise ValueError("min bounds must not exceed max bounds")
        if not 0.0 <= self.sim_floor_fraction <= 1.0:
            raise ValueError(f"sim_floor_fraction outside [0, 1]: {self.sim_floor_fraction}")


def _prune_images(doc: InterleavedDocument, keep_cols: list[int]) -> InterleavedDocument | None:
    if not keep_cols:
        return None
    if len(keep_cols) == len(doc.image_info):
        return doc
    return InterleavedDocument(
        url=doc.url,
        text_list=doc.text_list,
        image_info=tuple(doc.image_info[c] for c in keep_cols),
        similarity_matrix=SimilarityMatrix(doc.similarity_matrix.values[:, keep_cols]),
        doc_id=doc.doc_id,
    )


def ff_transform(
    doc: InterleavedDocument, face_scores: dict[str, float], threshold: float
) -> InterleavedDocument | None:
    """Remove images whose face probability is at or above the threshold.

    Similarity-matrix columns and image_info stay consistent. Returns the
    document object unchanged when nothing is removed, None when no image
    survives. Raises MissingScore if an image has no score.
    """
    keep = []
    for col, info in enumerate(doc.image_info):
        if info.image_name not in face_scores:
            raise MissingScore(info.image_name)
        if face_scores[info.image_name] < threshold:
            keep.append(col)
    return _prune_images(doc, keep)


def core_filter(
    doc: InterleavedDocument,
    params: CoreParams = CoreParams(),
    phashes: dict[str, int] | None = None,
) -> str | None:
    """Return a rejection reason for the core subset, or None to pass.

    Criteria: sentence count within bounds, image count within bounds, the
    image set survives re-dedup at the core threshold unchanged, and at
    least ``sim_floor_fraction`` of assignments have similarity strictly
    above ``sim_floor``. The dedup criterion needs per-image hashes; when
    ``phashes`` is None it is skipped.
    """
    n_sent = len(doc.text_list)
    if n_sent < params.min_sentences:
        return "min_sentences"
    if n_sent > params.max_sentences:
        return "max_sentences"
    n_img = len(doc.image_info)
    if n_img < params.min_images:
        return "min_images"
    if n_img > params.max_images:
        return "max_images"

    if phashes is not None:
        records = []
        for info in doc.image_info:
            if info.image_name not in phashes:
                raise MissingScore(info.image_name)
            records.append(
                ImageRecord(
                    image_id=info.image_name,
                    raw_url=info.raw_url,
                    width=1,
                    height=1,
                    phash=phashes[info.image_name],
                )
            )
        if len(dedup_within_document(records, params.dedup_threshold)) != n_img:
            return "dedup"

    above = sum(1 for info in doc.image_info if info.matched_sim > params.sim_floor)
    if above / n_img < params.sim_floor_fraction:
        return "sim_floor"
    return None
