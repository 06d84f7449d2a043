"""Retrieval operations: object detection, textual and visual evidence."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass

from PIL import Image, UnidentifiedImageError

from xmre.errors import ContractViolation, DecodeError, RetrievalError, ValidationError
from xmre.retrieval.backends import Fetcher, RetrievalBackend
from xmre.retrieval.captions import extract_caption

log = logging.getLogger("xmre.retrieval")


@dataclass(frozen=True)
class DetectedObject:
    """One salient region; ``crop_id`` names the cropped image."""

    bbox: tuple[int, int, int, int]  # x, y, w, h in pixels
    salience: float
    crop_id: str


@dataclass(frozen=True)
class SourcedText:
    text: str
    provenance: dict


@dataclass(frozen=True)
class TextualEvidence:
    """Entities and captions for one source (whole image or one crop)."""

    source: str
    entities: tuple[SourcedText, ...]
    captions: tuple[SourcedText, ...]


@dataclass(frozen=True)
class RetrievedImage:
    url: str
    data: bytes
    provenance: dict


def _image_size(image: bytes) -> tuple[int, int]:
    try:
        with Image.open(io.BytesIO(image)) as img:
            return img.size
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"undecodable image: {exc}") from exc


def detect_objects(
    backend: RetrievalBackend, ref: str, image: bytes, m: int
) -> list[DetectedObject]:
    """Top-m salient objects, descending salience, ties broken by bbox (x, y).

    Crop ids are assigned after sorting: ``<ref>#obj<rank>``. Backend failure
    raises :class:`RetrievalError`; an empty result is a valid answer.
    """

    if m < 0:
        raise ContractViolation(f"object count m must be >= 0, got {m}")
    width, height = _image_size(image)
    raw = backend.detect_objects(ref, image)
    for bbox, salience in raw:
        x, y, w, h = bbox
        if not (0 <= x and 0 <= y and w > 0 and h > 0 and x + w <= width and y + h <= height):
            raise ValidationError(
                f"detection bbox {bbox} outside {width}x{height} image {ref!r}"
            )
        if not 0.0 <= salience <= 1.0:
            raise ValidationError(f"salience {salience} outside [0, 1] for {ref!r}")
    ordered = sorted(raw, key=lambda d: (-d[1], d[0]))
    return [
        DetectedObject(bbox=bbox, salience=salience, crop_id=f"{ref}#obj{i}")
        for i, (bbox, salience) in enumerate(ordered[:m])
    ]


def crop_image(image: bytes, bbox: tuple[int, int, int, int]) -> bytes:
    """Cut one bbox out of the image, re-encoded as PNG."""

    x, y, w, h = bbox
    try:
        with Image.open(io.BytesIO(image)) as img:
            crop = img.crop((x, y, x + w, y + h))
            buf = io.BytesIO()
            crop.save(buf, format="PNG")
            return buf.getvalue()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot crop image: {exc}") from exc


def retrieve_textual_evidence(
    backend: RetrievalBackend,
    fetcher: Fetcher,
    sources: list[tuple[str, bytes]],
    k: int,
    *,
    page_timeout: float = 10.0,
) -> list[TextualEvidence]:
    """Entities and crawled captions for each (ref, image bytes) source.

    The backend's reverse lookup returns entities directly; captions come
    from fetching each referenced page and searching it for the reported
    image URL. Pages that fail to fetch or contain no caption are skipped.
    """

    if k < 0:
        raise ContractViolation(f"evidence count k must be >= 0, got {k}")
    out: list[TextualEvidence] = []
    for ref, image in sources:
        if k == 0:
            out.append(TextualEvidence(source=ref, entities=(), captions=()))
            continue
        lookup = backend.reverse_image_lookup(ref, image)
        entities = tuple(
            SourcedText(text, backend.provenance("entity", ref))
            for text in lookup.entities[:k]
        )
        captions: list[SourcedText] = []
        for web_ref in lookup.web_refs:
            if len(captions) >= k:
                break
            try:
                page = fetcher.fetch(web_ref.page_url, timeout=page_timeout)
            except RetrievalError as exc:
                log.warning("caption page skipped for %s: %s", ref, exc)
                continue
            caption = extract_caption(page.decode("utf-8", errors="replace"), web_ref.image_url)
            if caption:
                captions.append(
                    SourcedText(caption, backend.provenance("caption", web_ref.page_url))
                )
        out.append(TextualEvidence(source=ref, entities=entities, captions=tuple(captions)))
    return out


def retrieve_visual_evidence(
    backend: RetrievalBackend, fetcher: Fetcher, text: str, k: int
) -> list[RetrievedImage]:
    """Up to k images for a sentence, fetched in backend rank order.

    Images that fail to download are skipped and logged, never substituted
    by lower-ranked results.
    """

    if not text.strip():
        raise ValidationError("visual evidence query text is empty")
    if k < 0:
        raise ContractViolation(f"evidence count k must be >= 0, got {k}")
    if k == 0:
        return []
    results: list[RetrievedImage] = []
    for url in backend.text_image_search(text)[:k]:
        try:
            data = fetcher.fetch(url, timeout=30.0)
        except RetrievalError as exc:
            log.warning("retrieved image skipped (%s): %s", url, exc)
            continue
        results.append(RetrievedImage(url, data, backend.provenance("image", url)))
    return results
