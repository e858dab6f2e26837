"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its measured numbers (run with -s to see them all)."""
import itertools
import json
import random
import time
from pathlib import Path

import numpy as np
import pytest

from mm_interleave.aligner import max_assignment_baseline, solve_assignment
from mm_interleave.corpus_model import SimilarityMatrix
from mm_interleave.embeddings import mock_embed
from mm_interleave.evalbench import LabeledDocument, brute_force_assignment, run_benchmark
from mm_interleave.fetcher import FetchPolicy, fetch_batch, fetch_image, resize_max_dim
from mm_interleave.filters import calibrate_threshold, nsfw_gate, size_aspect_filter
from mm_interleave.flatten import (
    document_rng,
    drop_single_image,
    filter_sequence,
    sample_subsequence,
)
from mm_interleave.imagehash import dedup_within_document
from mm_interleave.corpus_model import ImageCandidate, ImageInfo, ImageRecord, InterleavedDocument
from mm_interleave.subsets import core_filter
from mm_interleave.stats import sentence_coverage

from conftest import make_image
from instrumented_http import InstrumentedServer
from pipeline_fixture import build_fixture, run_pipeline


def report(name: str, ok: bool, detail: str = "") -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" -- {detail}" if detail else ""))
    assert ok, f"{name}: {detail}"


def test_lap_optimality_against_brute_force():
    rng = np.random.default_rng(20240501)
    start = time.monotonic()
    checked = 0
    worst = 0.0
    for _ in range(500):
        n_s = int(rng.integers(1, 8))
        n_i = int(rng.integers(1, 8))
        matrix = SimilarityMatrix(rng.uniform(-1, 1, size=(n_s, n_i)))
        solved = solve_assignment(matrix)
        oracle = brute_force_assignment(matrix)
        k = min(n_s, n_i)
        base_total = sum(p[2] for p in solved.pairs[:k])
        worst = max(worst, abs(base_total - oracle.total_similarity))
        checked += 1
    elapsed = time.monotonic() - start
    report(
        "LAP optimality (500 random matrices, dims 1..7)",
        worst <= 1e-9 and elapsed < 10.0,
        f"max |solver - brute force| = {worst:.2e}, {elapsed:.2f}s",
    )


def test_excess_image_rule_exhaustive_dims():
    rng = np.random.default_rng(77)
    failures = 0
    cases = 0
    for n_s in range(1, 5):
        for n_i in range(n_s + 1, 8):
            for _ in range(25):
                values = rng.uniform(-1, 1, size=(n_s, n_i))
                matrix = SimilarityMatrix(values)
                solved = solve_assignment(matrix)
                base, excess = solved.pairs[:n_s], solved.pairs[n_s:]
                cases += 1
                # every sentence receives exactly one exact-solve image
                if sorted(s for _, s, _ in base) != list(range(n_s)):
                    failures += 1
                    continue
                if len({i for i, _, _ in solved.pairs}) != n_i:
                    failures += 1
                    continue
                # the sentence-covering pairs are jointly optimal
                oracle = brute_force_assignment(matrix)
                if abs(sum(p[2] for p in base) - oracle.total_similarity) > 1e-9:
                    failures += 1
                    continue
                # each leftover image sits on a column-max sentence
                if any(sim != values[:, img].max() for img, _, sim in excess):
                    failures += 1
    report(
        "Excess-image rule (all n_s<=4 < n_i<=7 shapes)",
        failures == 0,
        f"{cases} cases, {failures} failures",
    )


def _random_suite(seed: int, n_docs: int = 1000, k: int = 20) -> list[LabeledDocument]:
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        docs.append(
            LabeledDocument(
                scores=SimilarityMatrix(rng.uniform(0, 1, size=(k, 1))),
                gold=(frozenset({int(rng.integers(0, k))}),),
            )
        )
    return docs


def test_random_baseline_matches_table_two_random_row():
    start = time.monotonic()
    result = run_benchmark(_random_suite(seed=42), scorer="max")
    elapsed = time.monotonic() - start
    ok = abs(result["auc"] - 50.0) <= 1.0 and abs(result["p_at_1"] - 5.0) <= 1.0 and elapsed < 5.0
    report(
        "Random-baseline consistency (1000 docs, k=20)",
        ok,
        f"auc={result['auc']}, p@1={result['p_at_1']}, {elapsed:.2f}s",
    )


def _mock_corpus_matrices(n_docs: int, dim: int = 16, seed: int = 9):
    rng = np.random.default_rng(seed)
    for d in range(n_docs):
        n_s = int(rng.integers(2, 13))
        n_i = int(rng.integers(1, n_s + 5))
        sents = [mock_embed(f"{d}:s{i}", dim, seed) for i in range(n_s)]
        imgs = [mock_embed(f"{d}:i{i}", dim, seed) for i in range(n_i)]
        s = np.asarray(sents, dtype=np.float64)
        im = np.asarray(imgs, dtype=np.float64)
        yield SimilarityMatrix(
            np.clip(s @ im.T / np.outer(np.linalg.norm(s, axis=1), np.linalg.norm(im, axis=1)), -1, 1)
        )


def test_assignment_dominance_properties():
    start = time.monotonic()
    strict_coverage_wins = 0
    lap_sims = []
    max_sims = []
    for matrix in _mock_corpus_matrices(1000):
        lap = solve_assignment(matrix)
        mx = max_assignment_baseline(matrix)
        lap_cov = len({s for _, s, _ in lap.pairs})
        max_cov = len({s for _, s, _ in mx.pairs})
        assert lap_cov >= max_cov, "coverage(LAP) must dominate coverage(max)"
        if min(matrix.n_images, matrix.n_sentences) == matrix.n_images:
            assert lap_cov == matrix.n_images
        if lap_cov > max_cov:
            strict_coverage_wins += 1
        lap_sims.extend(p[2] for p in lap.pairs)
        max_sims.extend(p[2] for p in mx.pairs)
    elapsed = time.monotonic() - start
    mean_lap = float(np.mean(lap_sims))
    mean_max = float(np.mean(max_sims))
    ok = strict_coverage_wins >= 1 and mean_lap <= mean_max and elapsed < 10.0
    report(
        "Assignment dominance (1000-doc mock corpus)",
        ok,
        f"strict coverage wins={strict_coverage_wins}, mean sim {mean_lap:.4f} <= {mean_max:.4f}, {elapsed:.2f}s",
    )


# ---------------------------------------------------------------------------
# filter cascade fixture: 50 images, survivors derived by hand


def _mask(bits: int) -> int:
    return (1 << bits) - 1


def _cascade_fixture():
    rng = np.random.default_rng(555)
    base = [int(x) for x in rng.integers(0, 1 << 63, size=38, dtype=np.int64)]
    # spec of the derivations below relies on bases being far apart
    for i in range(len(base)):
        for j in range(i + 1, len(base)):
            assert bin(base[i] ^ base[j]).count("1") >= 13

    rows = []

    def add(name, w, h, phash, nsfw, sims):
        rows.append({"name": name, "w": w, "h": h, "phash": phash, "nsfw": nsfw, "sims": sims})

    for k in range(10):  # c0..c9: clean keepers
        add(f"c{k}", 300, 300, base[k], 0.05, (0.5, 0.3))
    add("b0", 150, 150, base[10], 0.05, (0.5, 0.3))   # size boundary kept
    add("b1", 300, 150, base[11], 0.05, (0.5, 0.3))   # aspect exactly 2.0 kept
    add("b2", 150, 300, base[12], 0.05, (0.5, 0.3))   # aspect exactly 0.5 kept
    add("b3", 300, 300, base[13], 0.10, (0.5, 0.3))   # nsfw boundary kept ("over")
    add("b4", 300, 300, base[14], 0.05, (0.15, 0.02))  # relevance boundary kept
    add("b5", 300, 300, base[0] ^ _mask(6), 0.05, (0.5, 0.3))  # distance 6 from c0 kept
    add("d0", 300, 300, base[0], 0.05, (0.5, 0.3))             # exact dup of c0
    add("d1", 300, 300, base[1] ^ _mask(5), 0.05, (0.5, 0.3))  # distance 5 dropped
    add("d2", 300, 300, base[2] ^ _mask(1), 0.05, (0.5, 0.3))
    add("d3", 300, 300, base[3] ^ _mask(2), 0.05, (0.5, 0.3))  # trio with c3
    add("d4", 300, 300, base[3] ^ _mask(3), 0.05, (0.5, 0.3))
    add("d5", 300, 300, base[0] ^ _mask(6), 0.05, (0.5, 0.3))  # dup of kept b5
    add("d6", 300, 300, base[4] ^ _mask(4), 0.05, (0.5, 0.3))
    add("s0", 100, 200, base[15], 0.05, (0.5, 0.3))
    add("s1", 149, 300, base[16], 0.05, (0.5, 0.3))
    add("s2", 80, 80, base[17], 0.05, (0.5, 0.3))
    add("s3", 149, 149, base[18], 0.05, (0.5, 0.3))
    add("s4", 150, 149, base[19], 0.05, (0.5, 0.3))
    add("a0", 800, 300, base[20], 0.05, (0.5, 0.3))   # 2.67
    add("a1", 200, 500, base[21], 0.05, (0.5, 0.3))   # 0.4
    add("a2", 301, 150, base[22], 0.05, (0.5, 0.3))   # just over 2
    add("a3", 150, 301, base[23], 0.05, (0.5, 0.3))   # just under 0.5
    add("a4", 1000, 450, base[24], 0.05, (0.5, 0.3))
    add("n0", 300, 300, base[25], 0.25, (0.5, 0.3))
    add("n1", 300, 300, base[26], 0.101, (0.5, 0.3))
    add("n2", 300, 300, base[27], 1.0, (0.5, 0.3))
    add("n3", 300, 300, base[28], 0.9, (0.5, 0.3))
    add("r0", 300, 300, base[29], 0.05, (0.14, 0.10))
    add("r1", 300, 300, base[30], 0.05, (0.0, 0.0))
    add("r2", 300, 300, base[31], 0.05, (-0.5, -0.9))
    add("r3", 300, 300, base[32], 0.05, (0.1499, 0.1))
    add("x0", 300, 300, base[15] ^ _mask(3), 0.05, (0.5, 0.3))  # dup of too-small s0
    add("x1", 300, 300, base[29] ^ _mask(2), 0.05, (0.5, 0.3))  # dup of low-relevance r0
    add("x2", 900, 300, base[33], 0.9, (0.5, 0.3))              # aspect and nsfw
    add("x3", 100, 100, base[34], 0.05, (0.0, 0.0))             # size and relevance
    add("x4", 300, 300, base[35], 0.10000001, (0.5, 0.3))       # just over nsfw cutoff
    add("x5", 300, 300, base[36], 0.05, (0.150000001, 0.0))     # just over relevance
    add("x6", 151, 151, base[37], 0.05, (0.5, 0.3))
    add("x7", 300, 300, base[5] ^ _mask(7), 0.05, (0.5, 0.3))   # distance 7 from c5 kept
    add("x8", 300, 300, base[25], 0.05, (0.5, 0.3))             # dup of nsfw-dropped n0
    return rows


EXPECTED_SURVIVORS = [f"c{k}" for k in range(10)] + ["b0", "b1", "b2", "b3", "b4", "b5", "x5", "x6", "x7"]


def test_filter_cascade_exactness():
    rows = _cascade_fixture()
    assert len(rows) == 50

    records = [
        ImageRecord(image_id=r["name"], raw_url=f"http://x/{r['name']}.png",
                    width=r["w"], height=r["h"], phash=r["phash"])
        for r in rows
    ]
    by_name = {r["name"]: r for r in rows}

    kept = dedup_within_document(records, threshold=5)
    kept = [rec for rec in kept if size_aspect_filter(rec.width, rec.height) is None]
    kept = [rec for rec in kept if nsfw_gate(by_name[rec.image_id]["nsfw"], 0.1)]
    kept = [rec for rec in kept if max(by_name[rec.image_id]["sims"]) >= 0.15]

    survivors = [rec.image_id for rec in kept]
    report(
        "Filter cascade exactness (50-image crafted fixture)",
        survivors == EXPECTED_SURVIVORS,
        f"{len(survivors)}/50 survive; diff={set(survivors) ^ set(EXPECTED_SURVIVORS) or 'none'}",
    )


def test_calibration_on_synthetic_scores():
    rng = np.random.default_rng(31)
    pos = np.clip(rng.normal(0.7, 0.18, size=3000), 0.0, 1.0)
    neg = np.clip(rng.normal(0.3, 0.18, size=7000), 0.0, 1.0)
    scores = [(float(p), True) for p in pos] + [(float(n), False) for n in neg]

    results = {t: calibrate_threshold(scores, target_recall=t) for t in (0.90, 0.95, 0.99)}
    r95 = results[0.95]
    recomputed = np.mean(pos >= r95.threshold)
    ok = (
        recomputed >= 0.95
        and recomputed == r95.achieved_recall
        and results[0.90].threshold >= results[0.95].threshold >= results[0.99].threshold
    )
    report(
        "Calibration (10k synthetic scores)",
        bool(ok),
        f"t={r95.threshold:.4f}, recall={r95.achieved_recall:.4f}, kept={r95.kept_fraction:.3f}, "
        f"monotone {results[0.90].threshold:.3f} >= {results[0.95].threshold:.3f} >= {results[0.99].threshold:.3f}",
    )


def _core_doc(n_sentences, sims):
    infos = tuple(
        ImageInfo(image_name=f"im{k}.jpg", raw_url=f"http://x/{k}.jpg",
                  matched_text_index=min(k, n_sentences - 1), matched_sim=s)
        for k, s in enumerate(sims)
    )
    values = np.zeros((n_sentences, len(sims)))
    for k, s in enumerate(sims):
        values[min(k, n_sentences - 1), k] = s
    return InterleavedDocument(
        url=f"http://example.com/{n_sentences}-{len(sims)}-{hash(sims) & 0xffff}",
        text_list=tuple(f"S{i}." for i in range(n_sentences)),
        image_info=infos,
        similarity_matrix=SimilarityMatrix(values),
    )


def test_core_subset_fixed_point_and_dedicated_rejections():
    rejections = {
        "min_sentences": _core_doc(3, (0.3, 0.3)),
        "max_sentences": _core_doc(41, (0.3, 0.3)),
        "min_images": _core_doc(10, (0.3,)),
        "max_images": _core_doc(20, tuple([0.3] * 16)),
        "sim_floor": _core_doc(10, (0.3, 0.3, 0.2, 0.2)),
    }
    wrong = {
        reason: core_filter(doc)
        for reason, doc in rejections.items()
        if core_filter(doc) != reason
    }

    rng = np.random.default_rng(8)
    corpus = []
    for _ in range(200):
        n_s = int(rng.integers(2, 50))
        n_i = int(rng.integers(1, 20))
        sims = tuple(float(s) for s in rng.uniform(0.0, 0.6, size=n_i))
        corpus.append(_core_doc(n_s, sims))
    survivors = [d for d in corpus if core_filter(d) is None]
    refiltered = [core_filter(d) for d in survivors]
    ok = not wrong and len(survivors) > 0 and all(r is None for r in refiltered)
    report(
        "Core subset fixed point + dedicated rejections",
        ok,
        f"rejections ok={not wrong} ({wrong or 'all matched'}), "
        f"{len(survivors)} survivors re-pass 100%",
    )


def test_flattening_constraint_fuzz():
    rng = random.Random(2718)
    emitted = 0
    single_before_drop = 0
    single_kept = 0
    for trial in range(10000):
        n_sent = rng.randrange(1, 8)
        counts = [rng.randrange(1, 320) for _ in range(n_sent)]
        texts = tuple(" ".join(f"t{j}" for j in range(c)) for c in counts)
        infos = tuple(
            ImageInfo(image_name=f"im{k}.jpg", raw_url=f"http://x/{k}.jpg",
                      matched_text_index=rng.randrange(n_sent),
                      matched_sim=round(rng.uniform(-0.2, 0.9), 4))
            for k in range(rng.randrange(0, 9))
        )
        doc = InterleavedDocument(
            url=f"http://example.com/fz{trial}",
            text_list=texts,
            image_info=infos,
            similarity_matrix=SimilarityMatrix(np.zeros((n_sent, len(infos)))),
        )
        doc_rng = document_rng(99, doc.doc_id)
        seq = sample_subsequence(doc, cap=256, rng=doc_rng)
        seq = filter_sequence(seq, min_sim=0.20, max_images=5)
        if seq is None:
            continue
        if len(seq.images) == 1:
            single_before_drop += 1
        seq = drop_single_image(seq, p_drop=0.5, rng=doc_rng)
        if seq is None:
            continue
        emitted += 1
        if len(seq.images) == 1:
            single_kept += 1
        assert len(seq.tokens) <= 256
        assert 1 <= len(seq.images) <= 5
        assert all(s.sim >= 0.20 for s in seq.images)

    sigma = (single_before_drop * 0.25) ** 0.5
    deviation = abs(single_kept - single_before_drop / 2)
    ok = emitted > 1000 and deviation <= 3 * sigma
    report(
        "Flattening constraint fuzz (10k docs)",
        ok,
        f"{emitted} emitted, single-image kept {single_kept}/{single_before_drop} "
        f"(|dev|={deviation:.1f} <= 3 sigma={3 * sigma:.1f})",
    )


def test_end_to_end_determinism(tmp_path):
    fixture = build_fixture(tmp_path / "fixture")
    start = time.monotonic()
    run_a = run_pipeline(fixture, tmp_path / "run_a", jobs=1)
    run_b = run_pipeline(fixture, tmp_path / "run_b", jobs=1)
    run_c = run_pipeline(fixture, tmp_path / "run_c", jobs=8)
    elapsed = time.monotonic() - start

    def digest(run_dir):
        return {
            name: (run_dir / name).read_bytes()
            for name in ("corpus.jsonl", "sequences.jsonl", "corpus_core.jsonl", "corpus_ff.jsonl")
        }

    a, b, c = digest(run_a), digest(run_b), digest(run_c)
    n_docs = len(a["corpus.jsonl"].splitlines())
    ok = a == b == c and n_docs > 0 and elapsed < 30.0
    report(
        "End-to-end determinism (20-doc fixture, reruns and jobs 1 vs 8)",
        ok,
        f"{n_docs} corpus docs, identical bytes={a == b == c}, {elapsed:.1f}s",
    )


def test_fetcher_contract(tmp_path):
    server = InstrumentedServer()
    try:
        policy = FetchPolicy(max_concurrent=8, per_host_max=3, timeout_ms=300, retries=1, max_bytes=1_000_000)
        # phase 1: request bounds, measured on clean traffic only (a timed-out
        # request's server handler lingers after the client abandoned it)
        ok_urls = [ImageCandidate(url=f"{server.base}/ok{i}.png", source_doc="d") for i in range(24)]
        _, ok_counters = fetch_batch(ok_urls, policy)
        bounds_ok = server.max_active <= 3 and ok_counters.get("fetched") == 24
        # phase 2: each failure mode lands in its labeled counter
        errors = [
            ImageCandidate(url=f"{server.base}/missing.png", source_doc="d"),
            ImageCandidate(url=f"{server.base}/slow.png", source_doc="d"),
            ImageCandidate(url=f"{server.base}/big.png", source_doc="d"),
        ]
        _, counters = fetch_batch(errors, policy)
        counters_ok = (
            counters.get("http_status") == 1
            and counters.get("fetch_failed") == 1
            and counters.get("too_large") == 1
        )
    finally:
        server.shutdown()

    resized = resize_max_dim(make_image(1600, 800), 800)
    resize_ok = resized.size == (800, 400)
    report(
        "Fetcher contract (bounds, labeled errors, resize cap)",
        bounds_ok and counters_ok and resize_ok,
        f"max in-flight={server.max_active}<=3, counters={ {k: v for k, v in counters.items()} }, "
        f"1600x800 -> {resized.size}",
    )
