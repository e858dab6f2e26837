import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mm_interleave.corpus_model import (
    Assignment,
    ConfigError,
    ImageInfo,
    InterleavedDocument,
    RawDocument,
    Sentence,
    SimilarityMatrix,
    dumps_document,
    loads_document,
    normalize_threshold,
    stable_doc_id,
)


class TestNormalizeThreshold:
    def test_cosine_identity(self):
        assert normalize_threshold(0.15, "cosine") == 0.15

    def test_points_core_floor(self):
        assert normalize_threshold(25, "points") == 0.25

    def test_points_flatten_floor(self):
        assert normalize_threshold(20, "points") == 0.20

    @pytest.mark.parametrize(
        "value,unit",
        [(1.5, "cosine"), (-1.01, "cosine"), (101, "points"), (-150, "points"), (float("nan"), "cosine")],
    )
    def test_out_of_range(self, value, unit):
        with pytest.raises(ConfigError):
            normalize_threshold(value, unit)

    def test_unknown_unit(self):
        with pytest.raises(ConfigError):
            normalize_threshold(0.5, "furlongs")


def test_stable_doc_id_is_16_hex_and_deterministic():
    a = stable_doc_id("http://example.com/page")
    assert a == stable_doc_id("http://example.com/page")
    assert len(a) == 16
    int(a, 16)
    assert a != stable_doc_id("http://example.com/other")


def test_sentence_indices_must_be_consecutive():
    with pytest.raises(ValueError):
        RawDocument(
            doc_id="d",
            url="u",
            sentences=(Sentence(0, "a", 1), Sentence(2, "b", 1)),
            image_candidates=(),
        )


def test_similarity_matrix_is_read_only():
    m = SimilarityMatrix([[0.1, 0.2], [0.3, 0.4]])
    assert m.n_sentences == 2 and m.n_images == 2
    with pytest.raises(ValueError):
        m.values[0, 0] = 9.0


def test_assignment_total_and_lookup():
    a = Assignment(pairs=((0, 1, 0.85), (1, 0, 0.8)))
    assert a.total_similarity == pytest.approx(1.65)
    assert a.sentence_of(0) == 1
    with pytest.raises(KeyError):
        a.sentence_of(5)


def _doc(sims, matched=(0,)):
    infos = tuple(
        ImageInfo(image_name=f"i{k}.jpg", raw_url=f"http://x/{k}.jpg", matched_text_index=m, matched_sim=sims[k])
        for k, m in enumerate(matched)
    )
    matrix = np.zeros((2, len(infos)))
    for k, m in enumerate(matched):
        matrix[m, k] = sims[k]
    return InterleavedDocument(
        url="http://example.com/a",
        text_list=("First sentence.", "Second one."),
        image_info=infos,
        similarity_matrix=SimilarityMatrix(matrix),
    )


def test_matched_index_bounds_checked():
    with pytest.raises(ValueError):
        InterleavedDocument(
            url="u",
            text_list=("only one",),
            image_info=(ImageInfo("a.jpg", "http://x/a.jpg", 7, 0.5),),
            similarity_matrix=SimilarityMatrix([[0.5]]),
        )


def test_serialized_field_names_match_release_format():
    obj = _doc(sims=[0.5]).to_json_obj()
    assert set(obj) == {"url", "text_list", "image_info", "similarity_matrix"}
    assert set(obj["image_info"][0]) == {"image_name", "raw_url", "matched_text_index", "matched_sim"}
    # rows = sentences, cols = images
    assert len(obj["similarity_matrix"]) == 2
    assert len(obj["similarity_matrix"][0]) == 1


def test_doc_id_rebuilt_from_url_on_read():
    doc = _doc(sims=[0.5])
    again = loads_document(dumps_document(doc))
    assert again.doc_id == stable_doc_id("http://example.com/a")


def test_full_precision_floats_round_trip():
    sim = 0.1234567890123456789
    line = dumps_document(_doc(sims=[sim]))
    assert loads_document(line).image_info[0].matched_sim == float(sim)


@settings(max_examples=200)
@given(
    sims=st.lists(st.floats(min_value=-1.0, max_value=1.0, allow_nan=False), min_size=1, max_size=4),
    data=st.data(),
)
def test_round_trip_identity(sims, data):
    matched = tuple(data.draw(st.integers(min_value=0, max_value=1)) for _ in sims)
    doc = _doc(sims=sims, matched=matched)
    again = loads_document(dumps_document(doc))
    assert again.url == doc.url
    assert again.text_list == doc.text_list
    assert again.image_info == doc.image_info
    assert again.similarity_matrix == doc.similarity_matrix
    # serialization is stable: re-dumping is byte-identical
    assert dumps_document(again) == dumps_document(doc)


def test_all_sims_validated_to_unit_interval():
    with pytest.raises(ValueError):
        _doc(sims=[1.5])


def test_json_lines_shape():
    line = dumps_document(_doc(sims=[0.5]))
    assert "\n" not in line
    json.loads(line)
