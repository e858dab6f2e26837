"""Corpus statistics: per-document size distributions, sentence coverage,
domain concentration, and rank correlation."""
from __future__ import annotations

import csv
import json
import re
from collections import Counter
from pathlib import Path
from urllib.parse import urlparse

import numpy as np

from .corpus_model import InterleavedDocument


class EmptyCorpus(ValueError):
    pass


class InvalidInput(ValueError):
    pass


_DIGIT_RUN = re.compile(r"[0-9]+")


def lower_median(values: list[int] | list[float]) -> float:
    """Median using the lower-of-two convention for even-sized inputs."""
    if not values:
        raise InvalidInput("median of empty sequence")
    ordered = sorted(values)
    return float(ordered[(len(ordered) - 1) // 2])


def per_doc_counts(corpus: list[InterleavedDocument]) -> dict:
    """Image/sentence count histograms with medians and means."""
    if not corpus:
        raise EmptyCorpus("no documents")
    n_images = [len(d.image_info) for d in corpus]
    n_sentences = [len(d.text_list) for d in corpus]
    return {
        "n_docs": len(corpus),
        "images": {
            "histogram": dict(sorted(Counter(n_images).items())),
            "median": lower_median(n_images),
            "mean": float(np.mean(n_images)),
        },
        "sentences": {
            "histogram": dict(sorted(Counter(n_sentences).items())),
            "median": lower_median(n_sentences),
            "mean": float(np.mean(n_sentences)),
        },
    }


def sentence_coverage(doc: InterleavedDocument) -> float:
    """Fraction of sentences holding at least one assigned image."""
    covered = {info.matched_text_index for info in doc.image_info}
    return len(covered) / len(doc.text_list)


def normalize_domain(url: str) -> str:
    """Host with digit runs collapsed to "*", lowercased.

    Clusters sub-sites that differ only by a shard number, e.g. i0.wp.com
    and i1.wp.com both map to i*.wp.com. Unparseable input lands in the
    "<invalid>" bucket.
    """
    try:
        host = urlparse(url).netloc
    except ValueError:
        return "<invalid>"
    if not host:
        return "<invalid>"
    host = host.split("@")[-1].split(":")[0].lower()
    if not host:
        return "<invalid>"
    return _DIGIT_RUN.sub("*", host)


def _concentration(counts: Counter) -> dict:
    per_domain = sorted(counts.values(), reverse=True)
    total = sum(per_domain)
    n = len(per_domain)
    top_decile = max(1, -(-n // 10))  # ceil(n/10), at least one domain
    return {
        "n_domains": n,
        "total": total,
        "top_decile_mass": sum(per_domain[:top_decile]) / total,
        "mean_per_domain": total / n,
        "median_per_domain": lower_median(per_domain),
    }


def domain_report(corpus: list[InterleavedDocument], top_k: int = 20) -> dict:
    """Top domains and concentration stats for documents and images."""
    if not corpus:
        raise EmptyCorpus("no documents")
    doc_domains = Counter(normalize_domain(d.url) for d in corpus)
    img_domains: Counter = Counter()
    for d in corpus:
        for info in d.image_info:
            img_domains[normalize_domain(info.raw_url)] += 1
    report = {
        "documents": {
            "top": doc_domains.most_common(top_k),
            **_concentration(doc_domains),
        }
    }
    if img_domains:
        report["images"] = {
            "top": img_domains.most_common(top_k),
            **_concentration(img_domains),
        }
    return report


def _average_ranks(values: list[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(len(arr), dtype=np.float64)
    i = 0
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # 1-based average rank
        i = j + 1
    return ranks


def spearman(xs: list[float], ys: list[float]) -> float:
    """Rank correlation with average ranks for ties."""
    if len(xs) != len(ys):
        raise InvalidInput(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise InvalidInput("need at least two points")
    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = float(np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    if denom == 0.0:
        raise InvalidInput("rank variance is zero")
    return float(np.dot(rx, ry) / denom)


def corpus_report(corpus: list[InterleavedDocument]) -> dict:
    """One-shot report combining counts, coverage, domains, and the
    image/sentence count correlation."""
    counts = per_doc_counts(corpus)
    coverage = [sentence_coverage(d) for d in corpus]
    report = {
        "counts": counts,
        "coverage": {
            "mean": float(np.mean(coverage)),
            "median": lower_median(coverage),
        },
        "domains": domain_report(corpus),
    }
    try:
        report["spearman_images_vs_sentences"] = spearman(
            [float(len(d.image_info)) for d in corpus],
            [float(len(d.text_list)) for d in corpus],
        )
    except InvalidInput:
        report["spearman_images_vs_sentences"] = None
    return report


def emit_report(report: dict, out_dir) -> list[str]:
    """Write stats.json plus CSV tables and histogram data files.

    Returns the relative names of the files written; rendering is left to
    external plotting tools.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    with open(out_dir / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append("stats.json")

    for axis in ("images", "sentences"):
        name = f"hist_{axis}.csv"
        with open(out_dir / name, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([axis, "n_docs"])
            for k, v in report["counts"][axis]["histogram"].items():
                writer.writerow([k, v])
        written.append(name)

    for side in ("documents", "images"):
        if side not in report["domains"]:
            continue
        name = f"domains_{side}.csv"
        with open(out_dir / name, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["domain", "count"])
            for domain, count in report["domains"][side]["top"]:
                writer.writerow([domain, count])
        written.append(name)
    return written
