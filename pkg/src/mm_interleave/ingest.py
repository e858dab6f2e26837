"""Manifest parsing, sentence splitting, and image-candidate extraction.

The ingestion boundary is a JSON Lines manifest (one document per line:
url, optional doc_id, text or text_list, image_urls). Upstream concerns
such as raw web-archive parsing, language ID, and text dedup are assumed
done before the manifest was produced.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Callable
from urllib.parse import urlparse

from .corpus_model import ImageCandidate, RawDocument, Sentence, stable_doc_id

TokenCounter = Callable[[str], int]


def whitespace_tokens(text: str) -> int:
    return len(text.split())


class ManifestError(ValueError):
    """A manifest line that cannot become a document; carries a short reason."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class UrlRules:
    allowed_extensions: frozenset[str] = frozenset({"png", "jpeg", "jpg"})
    blocked_tokens: frozenset[str] = frozenset({"logo", "button", "icon", "plugin", "widget"})


# Abbreviations that do not end a sentence even when followed by a capital.
_ABBREVIATIONS = {"dr.", "mr.", "mrs.", "ms.", "st.", "vs.", "e.g.", "i.e.", "etc."}

# Terminal punctuation, optional closing quote/bracket, whitespace, then an
# upper-case letter, digit, or opening quote starting the next sentence.
_BOUNDARY = re.compile(r"([.!?]+[\"'”’)\]]*)(\s+)(?=[A-Z0-9\"'“‘(\[])")


def split_sentences(text: str, token_counter: TokenCounter = whitespace_tokens) -> list[Sentence]:
    """Deterministic rule-based sentence segmentation.

    Splits after {., !, ?} followed by whitespace and an upper-case letter,
    digit, or quote, unless the final word is a known abbreviation. Joining
    the results with single spaces preserves every non-whitespace character
    of the input.
    """
    segments: list[str] = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        tail = text[start : m.end(1)]
        last_word = tail.rsplit(None, 1)[-1] if tail.split() else tail
        if last_word.lower().rstrip("\"'”’)]") in _ABBREVIATIONS:
            continue
        segments.append(tail)
        start = m.end()
    segments.append(text[start:])

    sentences = []
    for seg in segments:
        stripped = seg.strip()
        if stripped:
            sentences.append(
                Sentence(index=len(sentences), text=stripped, token_count=token_counter(stripped))
            )
    return sentences


def extract_candidates(
    urls: list[str], rules: UrlRules, source_doc: str = ""
) -> list[ImageCandidate]:
    """Keep URLs with an allowed path extension and no blocked token.

    The extension check ignores the query string; blocked-token matching is
    a case-insensitive substring test over the whole URL. Unparseable URLs
    are dropped.
    """
    kept: list[ImageCandidate] = []
    for url in urls:
        if not url:
            continue
        try:
            path = urlparse(url).path.lower()
        except ValueError:
            continue
        ext = path.rsplit(".", 1)[-1] if "." in path else ""
        if ext not in rules.allowed_extensions:
            continue
        lowered = url.lower()
        if any(tok in lowered for tok in rules.blocked_tokens):
            continue
        kept.append(ImageCandidate(url=url, source_doc=source_doc))
    return kept


def parse_manifest_line(
    line: str, token_counter: TokenCounter = whitespace_tokens
) -> RawDocument:
    """Parse one manifest line into a RawDocument.

    Raises ManifestError for malformed JSON or contract violations; the
    caller records the rejection and keeps going.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ManifestError("line is not a JSON object")

    url = obj.get("url")
    if not isinstance(url, str) or not url:
        raise ManifestError("missing or empty url")

    has_text = "text" in obj
    has_list = "text_list" in obj
    if has_text == has_list:
        raise ManifestError("exactly one of text / text_list is required")
    if has_text:
        if not isinstance(obj["text"], str):
            raise ManifestError("text must be a string")
        sentences = split_sentences(obj["text"], token_counter)
    else:
        if not isinstance(obj["text_list"], list) or not all(
            isinstance(t, str) for t in obj["text_list"]
        ):
            raise ManifestError("text_list must be an array of strings")
        sentences = []
        for t in obj["text_list"]:
            stripped = t.strip()
            if stripped:
                sentences.append(
                    Sentence(
                        index=len(sentences), text=stripped, token_count=token_counter(stripped)
                    )
                )
    if not sentences:
        raise ManifestError("document has no non-empty sentences")

    image_urls = obj.get("image_urls")
    if not isinstance(image_urls, list) or not all(isinstance(u, str) for u in image_urls):
        raise ManifestError("image_urls must be an array of strings")

    doc_id = obj.get("doc_id")
    if doc_id is not None and (not isinstance(doc_id, str) or not doc_id):
        raise ManifestError("doc_id must be a non-empty string when present")
    if doc_id is None:
        doc_id = stable_doc_id(url)

    return RawDocument(
        doc_id=doc_id,
        url=url,
        sentences=tuple(sentences),
        image_candidates=tuple(ImageCandidate(url=u, source_doc=doc_id) for u in image_urls),
    )
