"""Evidence retrieval: object detection, textual/visual evidence, caching.

The pluggable pieces are a :class:`~xmre.retrieval.backends.RetrievalBackend`
(reverse-image lookup, text-to-image search, object grounding) and a
:class:`~xmre.retrieval.backends.Fetcher` (page and image downloads). The
repository ships a deterministic file-fixture implementation of both; live
adapters with documented request/response schemas live in
:mod:`xmre.retrieval.live` and require credentials via environment variables.
"""

from xmre.retrieval.backends import (
    Fetcher,
    MockBackend,
    MockFetcher,
    RateLimiter,
    RetrievalBackend,
    ReverseLookup,
    WebRef,
    with_retries,
)
from xmre.retrieval.captions import extract_caption
from xmre.retrieval.ops import (
    DetectedObject,
    RetrievedImage,
    TextualEvidence,
    detect_objects,
    retrieve_textual_evidence,
    retrieve_visual_evidence,
)
from xmre.retrieval.store import (
    EvidenceBundle,
    EvidenceStore,
    RetrievalConfig,
    StoredObject,
    build_evidence_store,
)

__all__ = [
    "DetectedObject",
    "EvidenceBundle",
    "EvidenceStore",
    "Fetcher",
    "MockBackend",
    "MockFetcher",
    "RateLimiter",
    "RetrievalBackend",
    "RetrievalConfig",
    "RetrievedImage",
    "ReverseLookup",
    "StoredObject",
    "TextualEvidence",
    "WebRef",
    "build_evidence_store",
    "detect_objects",
    "extract_caption",
    "retrieve_textual_evidence",
    "retrieve_visual_evidence",
    "with_retries",
]
