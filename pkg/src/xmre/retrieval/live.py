"""Adapters for live retrieval services.

Each adapter pairs a thin HTTP call with a pure ``parse_*`` function, so the
response handling is unit-testable with canned payloads and no network. The
HTTP side needs credentials from environment variables and is rate limited;
nothing here is exercised by the offline test suite beyond the parsers.

Credentials (never read from config files or flags):

    XMRE_VISION_API_KEY    object detection and reverse image lookup
    XMRE_SEARCH_API_KEY    text-to-image search
    XMRE_SEARCH_CX         search engine id for text-to-image search

Expected response shapes, trimmed to the fields we consume:

    detection:       {"objects": [{"bbox": [x, y, w, h], "score": s}, ...]}
    reverse lookup:  {"entities": [{"description": str}, ...],
                      "pages": [{"url": str, "image_url": str}, ...]}
    image search:    {"items": [{"link": str}, ...]}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import requests

from xmre.errors import RetrievalError
from xmre.retrieval.backends import (
    RateLimiter,
    RawDetection,
    ReverseLookup,
    WebRef,
    with_retries,
)

DETECT_URL = "https://vision.example.com/v1/images:annotate"
LOOKUP_URL = "https://vision.example.com/v1/images:webDetection"
SEARCH_URL = "https://search.example.com/customsearch/v1"


def _require_env(name: str) -> str:
    value = os.environ.get(name, "")
    if not value:
        raise RetrievalError(f"missing credential: set {name}")
    return value


def parse_detection(payload: dict) -> list[RawDetection]:
    """Extract (bbox, salience) pairs from a detection response."""

    out: list[RawDetection] = []
    for obj in payload.get("objects", []):
        bbox = obj.get("bbox")
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise RetrievalError(f"malformed bbox in detection response: {bbox!r}")
        score = float(obj.get("score", 0.0))
        out.append(((int(bbox[0]), int(bbox[1]), int(bbox[2]), int(bbox[3])), score))
    return out


def parse_reverse_lookup(payload: dict) -> ReverseLookup:
    entities = tuple(
        e["description"] for e in payload.get("entities", []) if e.get("description")
    )
    web_refs = tuple(
        WebRef(page_url=p["url"], image_url=p["image_url"])
        for p in payload.get("pages", [])
        if p.get("url") and p.get("image_url")
    )
    return ReverseLookup(entities=entities, web_refs=web_refs)


def parse_image_search(payload: dict) -> list[str]:
    return [item["link"] for item in payload.get("items", []) if item.get("link")]


@dataclass
class LiveBackend:
    """Rate-limited HTTP backend; construct only when credentials are set."""

    rate: float = 1.0
    timeout: float = 10.0
    session: requests.Session = field(default_factory=requests.Session)

    def __post_init__(self) -> None:
        self._limiter = RateLimiter(self.rate)

    def _post(self, url: str, body: dict, key: str) -> dict:
        def call() -> dict:
            self._limiter.acquire()
            resp = self.session.post(
                url, json=body, params={"key": key}, timeout=self.timeout
            )
            if resp.status_code != 200:
                raise RetrievalError(f"{url} returned {resp.status_code}")
            return resp.json()

        return with_retries(call)

    def _get(self, url: str, params: dict) -> dict:
        def call() -> dict:
            self._limiter.acquire()
            resp = self.session.get(url, params=params, timeout=self.timeout)
            if resp.status_code != 200:
                raise RetrievalError(f"{url} returned {resp.status_code}")
            return resp.json()

        return with_retries(call)

    def detect_objects(self, ref: str, image: bytes) -> list[RawDetection]:
        key = _require_env("XMRE_VISION_API_KEY")
        body = {"image": {"content": image.hex()}, "features": ["OBJECT_LOCALIZATION"]}
        return parse_detection(self._post(DETECT_URL, body, key))

    def reverse_image_lookup(self, ref: str, image: bytes) -> ReverseLookup:
        key = _require_env("XMRE_VISION_API_KEY")
        body = {"image": {"content": image.hex()}, "features": ["WEB_DETECTION"]}
        return parse_reverse_lookup(self._post(LOOKUP_URL, body, key))

    def text_image_search(self, text: str) -> list[str]:
        key = _require_env("XMRE_SEARCH_API_KEY")
        cx = _require_env("XMRE_SEARCH_CX")
        params = {"key": key, "cx": cx, "q": text, "searchType": "image"}
        return parse_image_search(self._get(SEARCH_URL, params))

    def provenance(self, kind: str, key: str) -> dict:
        return {"service": kind, "query": key}


@dataclass
class LiveFetcher:
    """Plain HTTP fetcher for evidence pages and retrieved images."""

    rate: float = 1.0
    session: requests.Session = field(default_factory=requests.Session)

    def __post_init__(self) -> None:
        self._limiter = RateLimiter(self.rate)

    def fetch(self, url: str, timeout: float = 10.0) -> bytes:
        def call() -> bytes:
            self._limiter.acquire()
            resp = self.session.get(url, timeout=timeout)
            if resp.status_code != 200:
                raise RetrievalError(f"fetch {url} returned {resp.status_code}")
            return resp.content

        return with_retries(call)


def canned_response(text: str) -> dict:
    """Parse a canned JSON payload; convenience for adapter tests."""

    return json.loads(text)
