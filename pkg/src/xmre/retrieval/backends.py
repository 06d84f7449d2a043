"""Retrieval backend and fetcher interfaces plus the offline mock.

The mock backend is driven by a fixtures directory:

    objects.json   {image ref: [{"bbox": [x, y, w, h], "salience": s}, ...]}
    textual.json   {ref: {"entities": [...],
                          "web_refs": [{"page_url": ..., "image_url": ...}]}}
    visual.json    {query text: ["fixture://images/a.png", ...]}
    pages/*.html   served by the mock fetcher under fixture://pages/...
    images/*       served under fixture://images/...

Refs for whole images are the dataset ``img_id``; refs for object crops are
``<img_id>#obj<n>``. Missing keys mean "no results", not an error. Every
mock call is counted so cache idempotence is testable.
"""

from __future__ import annotations

import json
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

from xmre.errors import RetrievalError

FIXTURE_SCHEME = "fixture://"


@dataclass(frozen=True)
class WebRef:
    """A page that embeds a retrieved image, per reverse-image lookup."""

    page_url: str
    image_url: str


@dataclass(frozen=True)
class ReverseLookup:
    entities: tuple[str, ...]
    web_refs: tuple[WebRef, ...]


RawDetection = tuple[tuple[int, int, int, int], float]


class RetrievalBackend(Protocol):
    def detect_objects(self, ref: str, image: bytes) -> list[RawDetection]:
        """Salient object boxes, unordered and unlimited."""

    def reverse_image_lookup(self, ref: str, image: bytes) -> ReverseLookup:
        """Entities describing the image plus page/image URL pairs."""

    def text_image_search(self, query: str) -> list[str]:
        """Image URLs for a text query, in backend rank order."""

    def provenance(self, kind: str, key: str) -> dict:
        """Provenance stamp for one retrieved item."""


class Fetcher(Protocol):
    def fetch(self, url: str, timeout: float) -> bytes: ...


class RateLimiter:
    """Serializes calls so at most ``rate`` happen per second, thread-safe."""

    def __init__(
        self,
        rate: float | None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.interval = 0.0 if not rate else 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next_at = 0.0

    def acquire(self) -> None:
        if self.interval <= 0.0:
            return
        with self._lock:
            now = self._clock()
            wait = self._next_at - now
            self._next_at = max(now, self._next_at) + self.interval
        if wait > 0:
            self._sleep(wait)


def with_retries(
    fn: Callable[[], bytes],
    *,
    attempts: int = 3,
    base_delay: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
):
    """Run ``fn`` with exponential backoff; re-raise after the last attempt."""

    delay = base_delay
    for attempt in range(attempts):
        try:
            return fn()
        except RetrievalError:
            if attempt == attempts - 1:
                raise
            sleep(delay)
            delay *= 2.0


class MockFetcher:
    """Serves ``fixture://`` URLs from a directory; anything else fails."""

    def __init__(self, fixtures_dir: str | Path):
        self.root = Path(fixtures_dir)
        self.calls: Counter[str] = Counter()

    def fetch(self, url: str, timeout: float = 10.0) -> bytes:
        self.calls["fetch"] += 1
        if not url.startswith(FIXTURE_SCHEME):
            raise RetrievalError(f"mock fetcher cannot resolve non-fixture URL {url!r}")
        rel = url[len(FIXTURE_SCHEME) :]
        path = (self.root / rel).resolve()
        if not path.is_relative_to(self.root.resolve()):
            raise RetrievalError(f"fixture URL escapes the fixtures directory: {url!r}")
        if not path.is_file():
            raise RetrievalError(f"fixture not found: {url!r}")
        return path.read_bytes()

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())


class MockBackend:
    """Deterministic fixture-backed backend; counts every call."""

    def __init__(self, fixtures_dir: str | Path):
        self.root = Path(fixtures_dir)
        self.calls: Counter[str] = Counter()
        self._objects = self._load("objects.json")
        self._textual = self._load("textual.json")
        self._visual = self._load("visual.json")

    def _load(self, name: str) -> dict:
        path = self.root / name
        if not path.is_file():
            return {}
        return json.loads(path.read_text(encoding="utf-8"))

    def detect_objects(self, ref: str, image: bytes) -> list[RawDetection]:
        self.calls["detect_objects"] += 1
        hits = self._objects.get(ref, [])
        return [
            (tuple(int(v) for v in hit["bbox"]), float(hit["salience"])) for hit in hits
        ]

    def reverse_image_lookup(self, ref: str, image: bytes) -> ReverseLookup:
        self.calls["reverse_image_lookup"] += 1
        entry = self._textual.get(ref, {})
        return ReverseLookup(
            entities=tuple(str(e) for e in entry.get("entities", [])),
            web_refs=tuple(
                WebRef(str(w["page_url"]), str(w["image_url"]))
                for w in entry.get("web_refs", [])
            ),
        )

    def text_image_search(self, query: str) -> list[str]:
        self.calls["text_image_search"] += 1
        return [str(u) for u in self._visual.get(query, [])]

    def provenance(self, kind: str, key: str) -> dict:
        return {"fixture": f"{kind}:{key}"}

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())
