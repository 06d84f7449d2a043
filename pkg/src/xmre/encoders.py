"""Toy encoders and feature assembly for the fusion core.

Two operating scales share one code path: at toy scale the text encoder is a
trainable embedding-plus-position lookup over a hashed vocabulary and the
image encoder is a fixed seeded projection of a grayscale histogram; at paper
scale the same structures are filled from precomputed XMRF feature files.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from xmre import autodiff as ad
from xmre.autodiff import Tensor
from xmre.data_model import RelationInstance, insert_entity_markers
from xmre.errors import ConfigError, ContractViolation, DecodeError, FeatureFileError
from xmre.featfile import FeatureFile, RecordMeta

CLS_TOKEN = "[CLS]"
CLS_ID = 0

TAG_CONTENT_IMAGE = "content-image"
TAG_CONTENT_OBJECT = "content-object"
TAG_RETRIEVED = "retrieved"

SOURCE_IMAGE = "img"


@dataclass
class TextFeatures:
    """Encoded token sequence; positions index rows of ``matrix``."""

    matrix: Tensor
    e1_pos: int | None = None
    e2_pos: int | None = None
    cls_pos: int | None = None
    mask: np.ndarray | None = None  # True = real row; None = all real

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]


@dataclass
class VisualFeatures:
    """One row per image; tags partition rows into content and retrieved."""

    matrix: Tensor
    tags: tuple[str, ...]
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.tags) != self.matrix.shape[0]:
            raise ContractViolation(
                f"{len(self.tags)} tags for {self.matrix.shape[0]} visual rows"
            )

    def rows_tagged(self, *tags: str) -> list[int]:
        wanted = set(tags)
        return [i for i, t in enumerate(self.tags) if t in wanted]


class ToyTextEncoder:
    """Deterministic hashed-vocabulary embedding with learned position rows.

    Row 0 of the token table is reserved for the CLS summary token; natural
    tokens hash into rows 1..vocab_size-1 with a seed-keyed hash, so there is
    no out-of-vocabulary failure mode.
    """

    def __init__(self, d_text: int, vocab_size: int, max_positions: int, seed: int):
        if vocab_size < 2:
            raise ConfigError("toy vocabulary needs at least 2 rows (CLS + tokens)")
        self.d_text = d_text
        self.vocab_size = vocab_size
        self.max_positions = max_positions
        self.seed = seed
        self._key = int(seed).to_bytes(8, "little", signed=True)
        rng = np.random.default_rng([abs(int(seed)), 0x7E87])
        self.token_table = ad.parameter(rng.normal(0.0, 0.02, (vocab_size, d_text)))
        self.pos_table = ad.parameter(rng.normal(0.0, 0.02, (max_positions, d_text)))

    def token_id(self, token: str) -> int:
        if token == CLS_TOKEN:
            return CLS_ID
        digest = hashlib.blake2s(token.encode("utf-8"), key=self._key).digest()
        return 1 + int.from_bytes(digest[:8], "little") % (self.vocab_size - 1)

    def encode(
        self,
        tokens: Sequence[str],
        *,
        e1_pos: int | None = None,
        e2_pos: int | None = None,
        add_cls: bool = False,
    ) -> TextFeatures:
        seq = ([CLS_TOKEN] if add_cls else []) + list(tokens)
        offset = 1 if add_cls else 0
        if len(seq) > self.max_positions:
            raise ConfigError(
                f"sequence of {len(seq)} tokens exceeds the position table "
                f"({self.max_positions} rows)"
            )
        ids = [self.token_id(t) for t in seq]
        matrix = ad.add(
            ad.gather_rows(self.token_table, ids),
            ad.gather_rows(self.pos_table, list(range(len(seq)))),
        )
        return TextFeatures(
            matrix=matrix,
            e1_pos=None if e1_pos is None else e1_pos + offset,
            e2_pos=None if e2_pos is None else e2_pos + offset,
            cls_pos=0 if add_cls else None,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"enc/token_table": self.token_table, "enc/pos_table": self.pos_table}


def grayscale_histogram(image_bytes: bytes, bins: int = 64) -> np.ndarray:
    """Normalized intensity histogram; the toy encoder's content signature."""

    try:
        with Image.open(io.BytesIO(image_bytes)) as img:
            gray = np.asarray(img.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"undecodable image: {exc}") from exc
    counts = np.bincount((gray.reshape(-1) // (256 // bins)), minlength=bins)
    return counts.astype(np.float64) / max(1, gray.size)


class ToyImageEncoder:
    """Fixed seeded random projection of a 64-bin grayscale histogram."""

    BINS = 64

    def __init__(self, d_vis: int, seed: int):
        self.d_vis = d_vis
        rng = np.random.default_rng([abs(int(seed)), 0x1317])
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(self.BINS), (d_vis, self.BINS))

    def encode(self, image_bytes: bytes) -> np.ndarray:
        return self.projection @ grayscale_histogram(image_bytes, self.BINS)


def features_from_record(
    ff: FeatureFile, key: str, expect_cols: int
) -> TextFeatures:
    """Load one text record as constant features, positions from metadata."""

    matrix = ff.matrix(key, expect_cols=expect_cols)
    meta = ff.get(key).meta or RecordMeta()
    return TextFeatures(
        matrix=ad.constant(matrix.astype(np.float64)),
        e1_pos=meta.e1_pos,
        e2_pos=meta.e2_pos,
        cls_pos=meta.cls_pos,
    )


def pad_features(feats: Sequence[TextFeatures]) -> list[TextFeatures]:
    """Zero-pad a batch to a common row count, attaching validity masks."""

    width = max(f.rows for f in feats)
    out = []
    for f in feats:
        n = f.rows
        if n == width:
            mask = np.ones(n, dtype=bool)
            out.append(TextFeatures(f.matrix, f.e1_pos, f.e2_pos, f.cls_pos, mask))
            continue
        pad = ad.constant(np.zeros((width - n, f.matrix.shape[1])))
        mask = np.zeros(width, dtype=bool)
        mask[:n] = True
        out.append(
            TextFeatures(ad.concat([f.matrix, pad], axis=0), f.e1_pos, f.e2_pos, f.cls_pos, mask)
        )
    return out


# --- instance assembly -----------------------------------------------------


@dataclass(frozen=True)
class EvidenceSelection:
    """Evidence counts and ablation drops applied before encoding."""

    k_text: int = 10
    k_image: int = 10
    drop_object_evidence: bool = False
    drop_image_evidence: bool = False
    drop_visual_evidence: bool = False


@dataclass
class PreparedEvidence:
    source: str  # "img" or a crop id
    kind: str  # "entity" | "caption"
    tokens: tuple[str, ...] | None = None
    features: TextFeatures | None = None


@dataclass
class PreparedInstance:
    """Everything the fusion forward needs for one instance."""

    id: str
    label_id: int | None
    content_tokens: tuple[str, ...] | None = None
    content_e1: int | None = None
    content_e2: int | None = None
    content_features: TextFeatures | None = None
    evidence: tuple[PreparedEvidence, ...] = ()
    visual: VisualFeatures | None = None


def _selected_texts(bundle, selection: EvidenceSelection) -> list[tuple[str, str, str]]:
    """(source, kind, text) triples in deterministic bundle order."""

    out: list[tuple[str, str, str]] = []
    if bundle is None:
        return out
    sources = [SOURCE_IMAGE] + [obj.crop_id for obj in bundle.objects]
    for source in sources:
        if source == SOURCE_IMAGE and selection.drop_image_evidence:
            continue
        if source != SOURCE_IMAGE and selection.drop_object_evidence:
            continue
        for text in bundle.entities.get(source, ())[: selection.k_text]:
            out.append((source, "entity", text))
        for text in bundle.captions.get(source, ())[: selection.k_text]:
            out.append((source, "caption", text))
    return out


def _visual_parts(bundle, selection: EvidenceSelection):
    crops = [] if bundle is None else [obj.digest for obj in bundle.objects]
    retrieved = [] if bundle is None or selection.drop_visual_evidence else list(
        bundle.images[: selection.k_image]
    )
    return crops, retrieved


def prepare_instance_toy(
    instance: RelationInstance,
    bundle,
    *,
    label_id: int | None,
    selection: EvidenceSelection,
    image_encoder: ToyImageEncoder,
    content_image: bytes,
    stored_image: Callable[[str], bytes],
    max_evidence_tokens: int = 30,
) -> PreparedInstance:
    """Assemble the toy-scale inputs: token sequences plus encoded visual rows.

    ``stored_image`` resolves an evidence-store digest to image bytes. A
    missing bundle is treated as zero evidence of both kinds.
    """

    marked = insert_entity_markers(instance)
    evidence = tuple(
        PreparedEvidence(source, kind, tokens=tuple(text.split())[:max_evidence_tokens])
        for source, kind, text in _selected_texts(bundle, selection)
    )
    crops, retrieved = _visual_parts(bundle, selection)
    rows = [image_encoder.encode(content_image)]
    tags = [TAG_CONTENT_IMAGE]
    for digest in crops:
        rows.append(image_encoder.encode(stored_image(digest)))
        tags.append(TAG_CONTENT_OBJECT)
    for digest in retrieved:
        rows.append(image_encoder.encode(stored_image(digest)))
        tags.append(TAG_RETRIEVED)
    visual = VisualFeatures(matrix=ad.constant(np.stack(rows)), tags=tuple(tags))
    return PreparedInstance(
        id=instance.id,
        label_id=label_id,
        content_tokens=marked.tokens,
        content_e1=marked.e1_pos,
        content_e2=marked.e2_pos,
        evidence=evidence,
        visual=visual,
    )


def _evidence_key(instance_id: str, source: str, kind: str, rank: int) -> str:
    return f"ev:{instance_id}:{source}:{kind}{rank}"


def content_text_key(instance_id: str) -> str:
    return f"txt:{instance_id}"


def image_key(digest: str) -> str:
    return f"img:{digest}"


def prepare_instance_files(
    instance: RelationInstance,
    bundle,
    *,
    label_id: int | None,
    selection: EvidenceSelection,
    text_ff: FeatureFile,
    image_ff: FeatureFile,
    content_digest: str,
    d_text: int,
    d_vis: int,
) -> PreparedInstance:
    """Assemble paper-scale inputs from exported XMRF files.

    The content record is required; evidence records absent from the files
    (for example sequences the exporter skipped) are dropped.
    """

    content = features_from_record(text_ff, content_text_key(instance.id), d_text)
    if content.e1_pos is None or content.e2_pos is None:
        raise FeatureFileError(
            f"content record for instance {instance.id} lacks marker positions"
        )
    ranks: dict[tuple[str, str], int] = {}
    evidence: list[PreparedEvidence] = []
    for source, kind, _text in _selected_texts(bundle, selection):
        rank = ranks.get((source, kind), 0)
        ranks[(source, kind)] = rank + 1
        key = _evidence_key(instance.id, source, kind, rank)
        if key not in text_ff:
            continue
        feats = features_from_record(text_ff, key, d_text)
        if feats.cls_pos is None:
            raise FeatureFileError(f"evidence record {key!r} lacks a CLS position")
        evidence.append(PreparedEvidence(source, kind, features=feats))
    crops, retrieved = _visual_parts(bundle, selection)
    digests = [content_digest] + crops + retrieved
    tags = (
        [TAG_CONTENT_IMAGE]
        + [TAG_CONTENT_OBJECT] * len(crops)
        + [TAG_RETRIEVED] * len(retrieved)
    )
    rows = [image_ff.matrix(image_key(d), expect_cols=d_vis)[0] for d in digests]
    visual = VisualFeatures(
        matrix=ad.constant(np.stack(rows).astype(np.float64)), tags=tuple(tags)
    )
    return PreparedInstance(
        id=instance.id,
        label_id=label_id,
        content_features=content,
        evidence=tuple(evidence),
        visual=visual,
    )
