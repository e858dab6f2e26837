"""Best-effort image download, decode, and resize.

The only internally concurrent module: a bounded thread pool pulls
candidates while per-host semaphores keep any single host under its
connection cap. Results are re-ordered to input order before emission so
downstream output never depends on network timing. Raw bytes are cached on
disk keyed by content hash; reruns skip the network entirely.

Per-image failures are non-fatal: each increments a labeled counter and the
document simply keeps fewer images (a document keeping zero is dropped by
the pipeline stage).
"""
from __future__ import annotations

import hashlib
import io
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import urlparse

import requests
from PIL import Image

from .corpus_model import ImageCandidate


class FetchError(Exception):
    """Base for per-image fetch failures; ``label`` names the counter."""

    label = "fetch_failed"


class FetchFailed(FetchError):
    label = "fetch_failed"


class HttpStatus(FetchError):
    label = "http_status"

    def __init__(self, status: int, url: str):
        super().__init__(f"HTTP {status} for {url}")
        self.status = status


class DecodeFailed(FetchError):
    label = "decode_failed"


class TooLarge(FetchError):
    label = "too_large"


@dataclass(frozen=True)
class FetchPolicy:
    max_concurrent: int = 64
    per_host_max: int = 4
    timeout_ms: int = 10000
    retries: int = 2
    max_bytes: int = 20 * 1024 * 1024
    resize_cap_px: int = 800

    def __post_init__(self) -> None:
        for name in ("max_concurrent", "per_host_max", "timeout_ms", "retries", "max_bytes", "resize_cap_px"):
            if getattr(self, name) < (0 if name == "retries" else 1):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class FetchedImage:
    image: Image.Image  # RGB, original size
    width: int  # original dimensions
    height: int
    content: bytes

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.content).hexdigest()


def resize_max_dim(image: Image.Image, cap_px: int) -> Image.Image:
    """Scale so max(w, h) == cap_px, aspect preserved, bilinear.

    Images already within the cap are returned unchanged; the minor
    dimension rounds half up (never below 1 px).
    """
    if cap_px < 1:
        raise ValueError(f"cap_px must be >= 1, got {cap_px}")
    w, h = image.size
    if max(w, h) <= cap_px:
        return image
    if w >= h:
        new_w, new_h = cap_px, max(1, int(h * cap_px / w + 0.5))
    else:
        new_w, new_h = max(1, int(w * cap_px / h + 0.5)), cap_px
    return image.resize((new_w, new_h), Image.BILINEAR)


def decode_image(content: bytes) -> Image.Image:
    """Decode to RGB; animated inputs contribute their first frame only."""
    try:
        img = Image.open(io.BytesIO(content))
        img.load()
    except Exception as exc:
        raise DecodeFailed(f"undecodable image bytes: {exc}") from exc
    return img.convert("RGB")


def _download(url: str, policy: FetchPolicy, session: requests.Session | None) -> bytes:
    scheme = urlparse(url).scheme
    if scheme == "file":
        path = Path(urlparse(url).path)
        try:
            content = path.read_bytes()
        except OSError as exc:
            raise FetchFailed(f"cannot read {url}: {exc}") from exc
        if len(content) > policy.max_bytes:
            raise TooLarge(f"{len(content)} bytes exceeds cap {policy.max_bytes}")
        return content

    timeout = policy.timeout_ms / 1000.0
    last_exc: Exception | None = None
    for _ in range(policy.retries + 1):
        try:
            own_session = session or requests
            with own_session.get(url, timeout=timeout, stream=True) as resp:
                if not 200 <= resp.status_code < 300:
                    raise HttpStatus(resp.status_code, url)
                declared = resp.headers.get("Content-Length")
                if declared and int(declared) > policy.max_bytes:
                    raise TooLarge(f"declared {declared} bytes exceeds cap {policy.max_bytes}")
                chunks = []
                total = 0
                for chunk in resp.iter_content(chunk_size=65536):
                    total += len(chunk)
                    if total > policy.max_bytes:
                        raise TooLarge(f"body exceeds cap {policy.max_bytes}")
                    chunks.append(chunk)
                return b"".join(chunks)
        except (HttpStatus, TooLarge):
            raise
        except requests.RequestException as exc:
            last_exc = exc
    raise FetchFailed(f"giving up on {url} after {policy.retries + 1} attempts: {last_exc}") from last_exc


def fetch_image(
    candidate: ImageCandidate,
    policy: FetchPolicy,
    session: requests.Session | None = None,
) -> FetchedImage:
    """Download and decode one candidate, honoring timeout/retry/size limits."""
    content = _download(candidate.url, policy, session)
    img = decode_image(content)
    return FetchedImage(image=img, width=img.size[0], height=img.size[1], content=content)


class ImageCache:
    """Content-addressed blob store: <root>/<2-hex-prefix>/<hash>.bin plus a
    JSON Lines index mapping url -> {content_hash, width, height, fetched_at}."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.jsonl"
        self._by_url: dict[str, dict] = {}
        if self.index_path.exists():
            with open(self.index_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        entry = json.loads(line)
                        self._by_url[entry["url"]] = entry

    def _blob_path(self, content_hash: str) -> Path:
        return self.root / content_hash[:2] / f"{content_hash}.bin"

    def lookup(self, url: str) -> bytes | None:
        entry = self._by_url.get(url)
        if entry is None:
            return None
        path = self._blob_path(entry["content_hash"])
        if not path.exists():
            return None
        return path.read_bytes()

    def store(self, url: str, content: bytes, width: int, height: int) -> str:
        content_hash = hashlib.sha256(content).hexdigest()
        path = self._blob_path(content_hash)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(content)
        if url not in self._by_url:
            entry = {
                "url": url,
                "content_hash": content_hash,
                "width": width,
                "height": height,
                "fetched_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            }
            self._by_url[url] = entry
            with open(self.index_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
        return content_hash


class _HostLimiter:
    def __init__(self, per_host_max: int):
        self.per_host_max = per_host_max
        self._lock = threading.Lock()
        self._sems: dict[str, threading.BoundedSemaphore] = {}

    def semaphore(self, url: str) -> threading.BoundedSemaphore:
        host = urlparse(url).netloc
        with self._lock:
            if host not in self._sems:
                self._sems[host] = threading.BoundedSemaphore(self.per_host_max)
            return self._sems[host]


def fetch_batch(
    candidates: list[ImageCandidate],
    policy: FetchPolicy,
    cache: ImageCache | None = None,
) -> tuple[list[FetchedImage | FetchError], dict[str, int]]:
    """Fetch many candidates under the policy's concurrency bounds.

    Returns per-candidate results in input order plus labeled counters.
    Cache hits bypass the network; new downloads are stored back in input
    order so the cache index is reproducible.
    """
    limiter = _HostLimiter(policy.per_host_max)
    cached: dict[int, bytes] = {}
    if cache is not None:
        for i, cand in enumerate(candidates):
            hit = cache.lookup(cand.url)
            if hit is not None:
                cached[i] = hit

    def work(item: tuple[int, ImageCandidate]) -> FetchedImage | FetchError:
        i, cand = item
        try:
            if i in cached:
                content = cached[i]
                img = decode_image(content)
                return FetchedImage(image=img, width=img.size[0], height=img.size[1], content=content)
            with limiter.semaphore(cand.url):
                return fetch_image(cand, policy)
        except FetchError as exc:
            return exc

    counters = {"fetched": 0, "cache_hits": len(cached)}
    with ThreadPoolExecutor(max_workers=policy.max_concurrent) as pool:
        results = list(pool.map(work, enumerate(candidates)))

    for i, (cand, res) in enumerate(zip(candidates, results)):
        if isinstance(res, FetchError):
            counters[res.label] = counters.get(res.label, 0) + 1
            continue
        counters["fetched"] += 1
        if cache is not None and i not in cached:
            resized = resize_max_dim(res.image, policy.resize_cap_px)
            cache.store(cand.url, res.content, resized.size[0], resized.size[1])
    return results, counters
