"""Pipeline stages as composable subcommands over file checkpoints.

Every stage reads the previous stage's files from the run directory and
writes its own plus a runmeta JSON (config hash, input hashes, counters).
Nothing in a stage output depends on wall-clock time or worker count, so
reruns with unchanged inputs and config are byte-identical.

Exit codes: 0 success, 1 config error, 2 input error, 3 internal error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import aligner, evalbench, fetcher, filters, flatten, imagehash, ingest, stats, subsets
from .corpus_model import (
    ConfigError,
    ImageRecord,
    InterleavedDocument,
    normalize_threshold,
    read_documents,
    write_documents,
)
from .embeddings import (
    EmbeddingShard,
    load_shard_set,
    mock_embed,
    write_shard,
    write_shard_set_manifest,
)


class InputError(Exception):
    """Missing or malformed stage input; maps to exit code 2."""


DEFAULT_CONFIG = {
    "seed": 0,
    "jobs": 1,
    "url_rules": {
        "allowed_extensions": ["png", "jpeg", "jpg"],
        "blocked_tokens": ["logo", "button", "icon", "plugin", "widget"],
    },
    "fetch": {
        "max_concurrent": 64,
        "per_host_max": 4,
        "timeout_ms": 10000,
        "retries": 2,
        "max_bytes": 20 * 1024 * 1024,
        "resize_cap_px": 800,
    },
    "dedup": {
        "within_doc_threshold": 5,
        "cross_doc": True,
        "sample_size": 60000,
        "frequent_max_count": 10,
    },
    "filters": {
        "min_px": 150,
        "max_aspect": 2.0,
        "nsfw_threshold": 0.1,
        "nsfw_head_name": "nsfw",
        "heads": [],
    },
    "embed": {"mode": "mock", "dim": 32, "shard_manifest": None},
    "align": {
        "relevance_threshold": {"value": 0.15, "unit": "cosine"},
        "placement": "after",
    },
    "subset": {
        "face_head_name": "face",
        "face_threshold": 0.5,
        "core": {
            "min_sentences": 4,
            "max_sentences": 40,
            "min_images": 2,
            "max_images": 15,
            "dedup_threshold": 10,
            "sim_floor": {"value": 25, "unit": "points"},
            "sim_floor_fraction": 0.75,
        },
    },
    "flatten": {
        "token_cap": 256,
        "min_sim": {"value": 20, "unit": "points"},
        "max_images": 5,
        "p_drop_single": 0.5,
        "placement": "after",
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _resolve_threshold(node) -> float:
    if isinstance(node, dict):
        return normalize_threshold(float(node["value"]), node["unit"])
    return normalize_threshold(float(node), "cosine")


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    """Merge defaults, config file, and flag overrides; normalize all
    similarity thresholds to cosine."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _deep_merge(cfg, file_cfg)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    cfg["align"]["relevance_tau"] = _resolve_threshold(cfg["align"]["relevance_threshold"])
    cfg["subset"]["core"]["sim_floor_cosine"] = _resolve_threshold(cfg["subset"]["core"]["sim_floor"])
    cfg["flatten"]["min_sim_cosine"] = _resolve_threshold(cfg["flatten"]["min_sim"])
    if not 0.0 <= cfg["flatten"]["p_drop_single"] <= 1.0:
        raise ConfigError("flatten.p_drop_single must be in [0, 1]")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def _write_runmeta(out_dir: Path, stage: str, cfg: dict, inputs: list[Path], counters: dict) -> None:
    meta = {
        "stage": stage,
        "config_hash": config_hash(cfg),
        "input_hashes": {p.name: _hash_file(p) for p in inputs if p.exists()},
        "counters": counters,
    }
    with open(out_dir / f"runmeta_{stage}.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        raise InputError(f"missing input file {path} (run the previous stage first)")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{i}: invalid JSON: {exc}") from exc
    return rows


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def _map_jobs(fn, items, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _cache_root(args, out_dir: Path) -> Path:
    if getattr(args, "cache", None):
        return Path(args.cache)
    env = os.environ.get("MM_INTERLEAVE_CACHE")
    if env:
        return Path(env)
    return out_dir / "cache"


# --------------------------------------------------------------------------
# stages


def stage_ingest(args, cfg: dict) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise InputError(f"manifest {manifest} does not exist")
    rules = ingest.UrlRules(
        allowed_extensions=frozenset(cfg["url_rules"]["allowed_extensions"]),
        blocked_tokens=frozenset(cfg["url_rules"]["blocked_tokens"]),
    )
    docs = []
    errors = []
    seen_ids = set()
    counters = {"lines": 0, "docs": 0, "rejected_lines": 0, "candidates_in": 0, "candidates_kept": 0}
    with open(manifest, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            counters["lines"] += 1
            try:
                doc = ingest.parse_manifest_line(line)
                if doc.doc_id in seen_ids:
                    raise ingest.ManifestError(f"duplicate doc_id {doc.doc_id}")
                seen_ids.add(doc.doc_id)
            except ingest.ManifestError as exc:
                errors.append({"line_number": line_number, "reason": exc.reason})
                counters["rejected_lines"] += 1
                continue
            counters["candidates_in"] += len(doc.image_candidates)
            kept = ingest.extract_candidates(
                [c.url for c in doc.image_candidates], rules, source_doc=doc.doc_id
            )
            counters["candidates_kept"] += len(kept)
            counters["docs"] += 1
            docs.append(
                {
                    "doc_id": doc.doc_id,
                    "url": doc.url,
                    "sentences": [
                        {"text": s.text, "token_count": s.token_count} for s in doc.sentences
                    ],
                    "image_candidates": [c.url for c in kept],
                }
            )
    docs.sort(key=lambda d: d["doc_id"])
    _write_jsonl(out_dir / "docs.jsonl", docs)
    _write_jsonl(out_dir / "ingest_errors.jsonl", errors)
    _write_runmeta(out_dir, "ingest", cfg, [manifest], counters)
    return 0


def stage_fetch(args, cfg: dict) -> int:
    out_dir = Path(args.out_dir)
    docs = _read_jsonl(out_dir / "docs.jsonl")
    policy = fetcher.FetchPolicy(**cfg["fetch"])
    cache = fetcher.ImageCache(_cache_root(args, out_dir))

    candidates = []
    spans = []  # (doc_id, start, end) into the flat candidate list
    for doc in docs:
        start = len(candidates)
        for url in doc["image_candidates"]:
            candidates.append(ingest.ImageCandidate(url=url, source_doc=doc["doc_id"]))
        spans.append((doc["doc_id"], start, len(candidates)))

    results, counters = fetcher.fetch_batch(candidates, policy, cache)

    rows = []
    counters["images_in"] = len(candidates)
    counters["images_out"] = 0
    counters["docs_dropped_no_images"] = 0
    for doc, (doc_id, start, end) in zip(docs, spans):
        images = []
        for cand, res in zip(candidates[start:end], results[start:end]):
            if isinstance(res, fetcher.FetchError):
                continue
            resized = fetcher.resize_max_dim(res.image, policy.resize_cap_px)
            images.append(
                {
                    "image_id": f"i{res.content_hash[:16]}",
                    "raw_url": cand.url,
                    "width": resized.size[0],
                    "height": resized.size[1],
                }
            )
        if images:
            counters["images_out"] += len(images)
            rows.append({"doc_id": doc_id, "images": images})
        else:
            counters["docs_dropped_no_images"] += 1
    _write_jsonl(out_dir / "fetched.jsonl", rows)
    _write_runmeta(out_dir, "fetch", cfg, [out_dir / "docs.jsonl"], counters)
    return 0


def _load_cached_image(cache: fetcher.ImageCache, url: str, cap_px: int):
    content = cache.lookup(url)
    if content is None:
        raise InputError(f"image bytes for {url} missing from cache; rerun fetch")
    return fetcher.resize_max_dim(fetcher.decode_image(content), cap_px)


def stage_hashdedup(args, cfg: dict) -> int:
    out_dir = Path(args.out_dir)
    rows = _read_jsonl(out_dir / "fetched.jsonl")
    cache = fetcher.ImageCache(_cache_root(args, out_dir))
    cap = cfg["fetch"]["resize_cap_px"]
    threshold = cfg["dedup"]["within_doc_threshold"]
    jobs = cfg["jobs"]

    def hash_doc(row: dict) -> list[ImageRecord]:
        records = []
        for img in row["images"]:
            image = _load_cached_image(cache, img["raw_url"], cap)
            records.append(
                ImageRecord(
                    image_id=img["image_id"],
                    raw_url=img["raw_url"],
                    width=img["width"],
                    height=img["height"],
                    phash=imagehash.phash64(image),
                )
            )
        return records

    hashed = _map_jobs(hash_doc, rows, jobs)
    counters = {"images_in": sum(len(r["images"]) for r in rows)}
    deduped = [imagehash.dedup_within_document(records, threshold) for records in hashed]
    counters["deduped_within"] = counters["images_in"] - sum(len(d) for d in deduped)

    counters["deduped_frequent"] = 0
    if cfg["dedup"]["cross_doc"]:
        sample = [rec.phash for records in deduped for rec in records]
        sample = sample[: cfg["dedup"]["sample_size"]]
        index = imagehash.build_duplicate_index(sample, threshold)
        imagehash.write_duplicate_index(index, out_dir / "dupindex.bin")
        max_count = cfg["dedup"]["frequent_max_count"]
        survivors = [imagehash.drop_frequent_duplicates(records, index, max_count) for records in deduped]
        counters["deduped_frequent"] = sum(len(d) for d in deduped) - sum(len(s) for s in survivors)
        deduped = survivors

    out_rows = []
    counters["images_out"] = 0
    counters["docs_dropped_no_images"] = 0
    for row, records in zip(rows, deduped):
        if not records:
            counters["docs_dropped_no_images"] += 1
            continue
        counters["images_out"] += len(records)
        out_rows.append(
            {
                "doc_id": row["doc_id"],
                "images": [
                    {
                        "image_id": rec.image_id,
                        "raw_url": rec.raw_url,
                        "width": rec.width,
                        "height": rec.height,
                        "phash": f"{rec.phash:016x}",
                    }
                    for rec in records
                ],
            }
        )
    _write_jsonl(out_dir / "hashed.jsonl", out_rows)
    _write_runmeta(out_dir, "hashdedup", cfg, [out_dir / "fetched.jsonl"], counters)
    return 0


def stage_embed(args, cfg: dict) -> int:
    out_dir = Path(args.out_dir)
    docs = _read_jsonl(out_dir / "docs.jsonl")
    hashed = _read_jsonl(out_dir / "hashed.jsonl")

    if cfg["embed"]["mode"] == "external":
        manifest = cfg["embed"]["shard_manifest"] or getattr(args, "shards", None)
        if not manifest:
            raise ConfigError("embed.mode=external needs a shard-set manifest path")
        lookup = load_shard_set(manifest)
        needed = {f"{d['doc_id']}:s{i}" for d in docs for i in range(len(d["sentences"]))}
        needed |= {img["image_id"] for row in hashed for img in row["images"]}
        missing = sorted(needed - set(lookup))
        if missing:
            raise InputError(f"shard set lacks {len(missing)} ids, first: {missing[:3]}")
        # point at the provided manifest instead of copying shard data
        with open(out_dir / "shardset.json", "w", encoding="utf-8") as fh:
            json.dump({"external": str(Path(manifest).resolve())}, fh)
        _write_runmeta(out_dir, "embed", cfg, [out_dir / "docs.jsonl", out_dir / "hashed.jsonl"], {"ids": len(needed)})
        return 0

    if cfg["embed"]["mode"] != "mock":
        raise ConfigError(f"unknown embed mode {cfg['embed']['mode']!r}")
    dim = int(cfg["embed"]["dim"])
    seed = int(cfg["seed"])
    sentence_entries = []
    for doc in docs:
        for i in range(len(doc["sentences"])):
            eid = f"{doc['doc_id']}:s{i}"
            sentence_entries.append((eid, mock_embed(eid, dim, seed)))
    image_entries = []
    seen = set()
    for row in hashed:
        for img in row["images"]:
            eid = img["image_id"]
            if eid not in seen:
                seen.add(eid)
                image_entries.append((eid, mock_embed(eid, dim, seed)))
    write_shard(EmbeddingShard(dim=dim, entries=sentence_entries), out_dir / "sentences.mmeb")
    write_shard(EmbeddingShard(dim=dim, entries=image_entries), out_dir / "images.mmeb")
    write_shard_set_manifest(out_dir / "shardset.json", ["sentences.mmeb", "images.mmeb"], dim)
    counters = {"sentence_vectors": len(sentence_entries), "image_vectors": len(image_entries)}
    _write_runmeta(out_dir, "embed", cfg, [out_dir / "docs.jsonl", out_dir / "hashed.jsonl"], counters)
    return 0


def _load_embeddings(out_dir: Path) -> dict[str, np.ndarray]:
    manifest = out_dir / "shardset.json"
    if not manifest.exists():
        raise InputError(f"missing {manifest}; run the embed stage first")
    with open(manifest, encoding="utf-8") as fh:
        obj = json.load(fh)
    if "external" in obj:
        return load_shard_set(obj["external"])
    return load_shard_set(manifest)


def stage_filter(args, cfg: dict) -> int:
    out_dir = Path(args.out_dir)
    rows = _read_jsonl(out_dir / "hashed.jsonl")
    lookup = _load_embeddings(out_dir)
    heads = [filters.read_head(p) for p in cfg["filters"]["heads"]]
    nsfw_name = cfg["filters"]["nsfw_head_name"]
    nsfw_threshold = cfg["filters"]["nsfw_threshold"]
    min_px = cfg["filters"]["min_px"]
    max_aspect = cfg["filters"]["max_aspect"]

    counters = {
        "images_in": sum(len(r["images"]) for r in rows),
        "too_small": 0,
        "aspect": 0,
        "nsfw_dropped": 0,
        "images_out": 0,
        "docs_dropped_no_images": 0,
    }
    out_rows = []
    for row in rows:
        kept = []
        for img in row["images"]:
            reason = filters.size_aspect_filter(img["width"], img["height"], min_px, max_aspect)
            if reason is not None:
                counters[reason] += 1
                continue
            scores = {}
            for head in heads:
                if img["image_id"] not in lookup:
                    raise InputError(f"no embedding for image {img['image_id']}")
                scores[head.name] = filters.score_head(lookup[img["image_id"]], head)
            if nsfw_name in scores and not filters.nsfw_gate(scores[nsfw_name], nsfw_threshold):
                counters["nsfw_dropped"] += 1
                continue
            out = dict(img)
            if scores:
                out["head_scores"] = scores
            kept.append(out)
        if kept:
            counters["images_out"] += len(kept)
            out_rows.append({"doc_id": row["doc_id"], "images": kept})
        else:
            counters["docs_dropped_no_images"] += 1
    _write_jsonl(out_dir / "filtered.jsonl", out_rows)
    _write_runmeta(out_dir, "filter", cfg, [out_dir / "hashed.jsonl"], counters)
    return 0


def stage_align(args, cfg: dict) -> int:
    out_dir = Path(args.out_dir)
    docs = {d["doc_id"]: d for d in _read_jsonl(out_dir / "docs.jsonl")}
    rows = _read_jsonl(out_dir / "filtered.jsonl")
    lookup = _load_embeddings(out_dir)
    params = aligner.AlignmentParams(
        relevance_tau=cfg["align"]["relevance_tau"],
        placement=cfg["align"]["placement"],
        rng_seed=cfg["seed"],
    )

    def align_row(row: dict):
        doc_meta = docs.get(row["doc_id"])
        if doc_meta is None:
            raise InputError(f"doc {row['doc_id']} in filtered.jsonl but not docs.jsonl")
        sentences = [
            ingest.Sentence(index=i, text=s["text"], token_count=s["token_count"])
            for i, s in enumerate(doc_meta["sentences"])
        ]
        raw_doc = ingest.RawDocument(
            doc_id=row["doc_id"], url=doc_meta["url"], sentences=tuple(sentences), image_candidates=()
        )
        records = [
            ImageRecord(
                image_id=img["image_id"],
                raw_url=img["raw_url"],
                width=img["width"],
                height=img["height"],
                phash=int(img["phash"], 16),
                head_scores=img.get("head_scores", {}),
            )
            for img in row["images"]
        ]
        sent_vecs = []
        for i in range(len(sentences)):
            eid = f"{row['doc_id']}:s{i}"
            if eid not in lookup:
                raise InputError(f"no embedding for sentence {eid}")
            sent_vecs.append(lookup[eid])
        img_vecs = [lookup[r.image_id] for r in records]
        return aligner.align_document(raw_doc, sent_vecs, records, img_vecs, params)

    results = _map_jobs(align_row, rows, cfg["jobs"])
    counters = {
        "images_in": sum(len(r["images"]) for r in rows),
        "low_relevance_dropped": 0,
        "images_out": 0,
        "docs_excluded": 0,
    }
    out_docs = []
    for (doc, n_dropped) in results:
        counters["low_relevance_dropped"] += n_dropped
        if doc is None:
            counters["docs_excluded"] += 1
        else:
            counters["images_out"] += len(doc.image_info)
            out_docs.append(doc)
    write_documents(out_dir / "corpus.jsonl", out_docs)
    counters["docs_out"] = len(out_docs)
    _write_runmeta(
        out_dir, "align", cfg, [out_dir / "docs.jsonl", out_dir / "filtered.jsonl"], counters
    )
    return 0


def _image_meta_by_name(out_dir: Path) -> dict[str, dict]:
    """image_name stem -> filtered.jsonl image entry (hashes, head scores)."""
    meta = {}
    for row in _read_jsonl(out_dir / "filtered.jsonl"):
        for img in row["images"]:
            meta[img["image_id"]] = img
    return meta


def stage_subset(args, cfg: dict) -> int:
    out_dir = Path(args.out_dir)
    corpus = list(read_documents(out_dir / "corpus.jsonl")) if (out_dir / "corpus.jsonl").exists() else None
    if corpus is None:
        raise InputError(f"missing {out_dir / 'corpus.jsonl'}; run align first")
    variant = args.variant
    meta = _image_meta_by_name(out_dir)

    def face_scores_for(doc: InterleavedDocument) -> dict[str, float]:
        scores = {}
        name = cfg["subset"]["face_head_name"]
        for info in doc.image_info:
            stem = info.image_name.rsplit(".", 1)[0]
            entry = meta.get(stem, {})
            if name not in entry.get("head_scores", {}):
                raise subsets.MissingScore(info.image_name)
            scores[info.image_name] = entry["head_scores"][name]
        return scores

    def phashes_for(doc: InterleavedDocument) -> dict[str, int]:
        hashes = {}
        for info in doc.image_info:
            stem = info.image_name.rsplit(".", 1)[0]
            entry = meta.get(stem)
            if entry is None or "phash" not in entry:
                raise subsets.MissingScore(info.image_name)
            hashes[info.image_name] = int(entry["phash"], 16)
        return hashes

    core_cfg = cfg["subset"]["core"]
    params = subsets.CoreParams(
        min_sentences=core_cfg["min_sentences"],
        max_sentences=core_cfg["max_sentences"],
        min_images=core_cfg["min_images"],
        max_images=core_cfg["max_images"],
        dedup_threshold=core_cfg["dedup_threshold"],
        sim_floor=core_cfg["sim_floor_cosine"],
        sim_floor_fraction=core_cfg["sim_floor_fraction"],
    )
    threshold = cfg["subset"]["face_threshold"]
    if getattr(args, "calibration_scores", None):
        rows = _read_jsonl(Path(args.calibration_scores))
        scored = [(float(r["prob"]), bool(r["label"])) for r in rows]
        result = filters.calibrate_threshold(scored, target_recall=args.target_recall)
        threshold = result.threshold

    counters = {"docs_in": len(corpus), "docs_out": 0, "ff_excluded": 0, "core_failed": 0}
    out_docs = []
    for doc in corpus:
        if variant in ("ff", "core-ff"):
            doc = subsets.ff_transform(doc, face_scores_for(doc), threshold)
            if doc is None:
                counters["ff_excluded"] += 1
                continue
        if variant in ("core", "core-ff"):
            reason = subsets.core_filter(doc, params, phashes_for(doc))
            if reason is not None:
                counters["core_failed"] += 1
                counters[f"core_failed_{reason}"] = counters.get(f"core_failed_{reason}", 0) + 1
                continue
        counters["docs_out"] += 1
        out_docs.append(doc)
    name = {"ff": "corpus_ff", "core": "corpus_core", "core-ff": "corpus_core_ff"}[variant]
    write_documents(out_dir / f"{name}.jsonl", out_docs)
    _write_runmeta(out_dir, f"subset_{variant.replace('-', '_')}", cfg, [out_dir / "corpus.jsonl"], counters)
    return 0


def stage_flatten(args, cfg: dict) -> int:
    out_dir = Path(args.out_dir)
    corpus_path = out_dir / (args.corpus or "corpus.jsonl")
    if not corpus_path.exists():
        raise InputError(f"missing {corpus_path}; run align first")
    fcfg = cfg["flatten"]
    counters = {"docs_in": 0, "sequences_out": 0, "discarded": 0}
    lines = []
    for doc in read_documents(corpus_path):
        counters["docs_in"] += 1
        seq = flatten.flatten_document(
            doc,
            seed=cfg["seed"],
            cap=fcfg["token_cap"],
            min_sim=fcfg["min_sim_cosine"],
            max_images=fcfg["max_images"],
            p_drop=fcfg["p_drop_single"],
            placement=fcfg["placement"],
        )
        if seq is None:
            counters["discarded"] += 1
        else:
            counters["sequences_out"] += 1
            lines.append(flatten.dumps_sequence(seq))
    with open(out_dir / "sequences.jsonl", "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    _write_runmeta(out_dir, "flatten", cfg, [corpus_path], counters)
    return 0


def stage_stats(args, cfg: dict) -> int:
    out_dir = Path(args.out_dir)
    corpus_path = out_dir / (args.corpus or "corpus.jsonl")
    if not corpus_path.exists():
        raise InputError(f"missing {corpus_path}; run align first")
    corpus = list(read_documents(corpus_path))
    if not corpus:
        raise InputError("corpus is empty")
    report = stats.corpus_report(corpus)
    written = stats.emit_report(report, out_dir / "stats")
    _write_runmeta(out_dir, "stats", cfg, [corpus_path], {"docs": len(corpus), "files": len(written)})
    return 0


def stage_eval(args, cfg: dict) -> int:
    bench_path = Path(args.bench)
    if not bench_path.exists():
        raise InputError(f"benchmark file {bench_path} does not exist")
    docs = evalbench.read_benchmark(bench_path)
    report = evalbench.run_benchmark(docs, scorer=args.scorer)
    out = json.dumps(report, indent=2, sort_keys=True)
    print(out)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"eval_{args.scorer}.json", "w", encoding="utf-8") as fh:
            fh.write(out + "\n")
    return 0


def stage_pipeline(args, cfg: dict) -> int:
    stage_ingest(args, cfg)
    stage_fetch(args, cfg)
    stage_hashdedup(args, cfg)
    stage_embed(args, cfg)
    stage_filter(args, cfg)
    stage_align(args, cfg)
    variants = ["core"]
    head_names = {filters.read_head(p).name for p in cfg["filters"]["heads"]}
    if cfg["subset"]["face_head_name"] in head_names:
        variants += ["ff", "core-ff"]
    for variant in variants:
        args.variant = variant
        stage_subset(args, cfg)
    args.corpus = None
    stage_flatten(args, cfg)
    stage_stats(args, cfg)
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mm-interleave",
        description="Curation pipeline for interleaved image/text corpora",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out-dir", required=out_required, help="run directory for stage files")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--jobs", type=int, help="document-level parallelism")
        p.add_argument("--cache", help="image cache root (default $MM_INTERLEAVE_CACHE)")

    p = sub.add_parser("ingest", help="parse a manifest into documents")
    common(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("fetch", help="download, decode, and resize candidate images")
    common(p)
    p.add_argument("--max-concurrent", type=int)
    p.add_argument("--timeout-ms", type=int)
    p.add_argument("--retries", type=int)

    p = sub.add_parser("hashdedup", help="perceptual-hash dedup within documents and across a sample")
    common(p)

    p = sub.add_parser("embed", help="produce or link embedding shards")
    common(p)
    p.add_argument("--mock", action="store_true", help="use the deterministic mock embedder")
    p.add_argument("--dim", type=int)
    p.add_argument("--shards", help="external shard-set manifest")

    p = sub.add_parser("filter", help="size/aspect gating and classifier heads")
    common(p)
    p.add_argument("--head", action="append", dest="heads", help="MMHD head weights file (repeatable)")

    p = sub.add_parser("align", help="similarity matrices and assignment interleaving")
    common(p)
    p.add_argument("--relevance-tau", type=float, help="relevance threshold, cosine units")
    p.add_argument("--placement", choices=aligner.PLACEMENTS)

    p = sub.add_parser("subset", help="produce ff/core corpus variants")
    common(p)
    p.add_argument("--variant", choices=("ff", "core", "core-ff"), required=True)
    p.add_argument("--params", help="JSON file overriding core subset parameters")
    p.add_argument("--face-threshold", type=float)
    p.add_argument("--calibration-scores", help="JSONL of {prob, label} to calibrate the face cutoff")
    p.add_argument("--target-recall", type=float, default=0.95)

    p = sub.add_parser("flatten", help="emit capped training sequences")
    common(p)
    p.add_argument("--corpus", help="corpus file within the run dir (default corpus.jsonl)")

    p = sub.add_parser("stats", help="corpus statistics report")
    common(p)
    p.add_argument("--corpus", help="corpus file within the run dir (default corpus.jsonl)")

    p = sub.add_parser("eval", help="alignment-quality benchmark metrics")
    common(p, out_required=False)
    p.add_argument("--bench", required=True, help="JSONL of labeled documents")
    p.add_argument("--scorer", choices=("lap", "max"), default="max")

    p = sub.add_parser("pipeline", help="run every stage end to end")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mock", action="store_true", help="use the deterministic mock embedder")
    p.add_argument("--dim", type=int)
    p.add_argument("--shards", help="external shard-set manifest")
    p.add_argument("--head", action="append", dest="heads", help="MMHD head weights file (repeatable)")
    p.add_argument("--relevance-tau", type=float, help="relevance threshold, cosine units")
    p.add_argument("--placement", choices=aligner.PLACEMENTS)
    p.add_argument("--max-concurrent", type=int)
    p.add_argument("--timeout-ms", type=int)
    p.add_argument("--retries", type=int)
    p.add_argument("--face-threshold", type=float)

    return parser


def _overrides_from_args(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        over["jobs"] = args.jobs
    fetch_over = {}
    for flag, key in (("max_concurrent", "max_concurrent"), ("timeout_ms", "timeout_ms"), ("retries", "retries")):
        if getattr(args, flag, None) is not None:
            fetch_over[key] = getattr(args, flag)
    if fetch_over:
        over["fetch"] = fetch_over
    if getattr(args, "relevance_tau", None) is not None:
        over["align"] = {"relevance_threshold": {"value": args.relevance_tau, "unit": "cosine"}}
    if getattr(args, "placement", None) is not None:
        over.setdefault("align", {})["placement"] = args.placement
    if getattr(args, "mock", False):
        over["embed"] = {"mode": "mock"}
    if getattr(args, "dim", None) is not None:
        over.setdefault("embed", {})["dim"] = args.dim
    if getattr(args, "shards", None):
        over.setdefault("embed", {})["mode"] = "external"
        over.setdefault("embed", {})["shard_manifest"] = args.shards
    if getattr(args, "heads", None):
        over["filters"] = {"heads": args.heads}
    if getattr(args, "face_threshold", None) is not None:
        over["subset"] = {"face_threshold": args.face_threshold}
    if getattr(args, "params", None):
        with open(args.params, encoding="utf-8") as fh:
            over.setdefault("subset", {})["core"] = json.load(fh)
    return over


STAGES = {
    "ingest": stage_ingest,
    "fetch": stage_fetch,
    "hashdedup": stage_hashdedup,
    "embed": stage_embed,
    "filter": stage_filter,
    "align": stage_align,
    "subset": stage_subset,
    "flatten": stage_flatten,
    "stats": stage_stats,
    "eval": stage_eval,
    "pipeline": stage_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides_from_args(args))
        return STAGES[args.subcommand](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (InputError, subsets.MissingScore) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - contract maps unexpected failures to 3
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
