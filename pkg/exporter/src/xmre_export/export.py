"""Export operations: run the encoders and write XMRF feature files.

Record keys follow the training package's naming:

    txt:{instance_id}                     content sentence, marker + CLS positions
    ev:{instance_id}:{source}:{kind}{rank}  evidence text, CLS position
    img:{digest}                          one pooled row per image digest

Sequences whose encoded length exceeds the maximum are skipped and
recorded with a reason rather than truncated, since truncation could
drop a marker. Undecodable images are likewise skipped with a reason.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from xmre_export import xmrf
from xmre_export.dataset import Instance, insert_markers
from xmre_export.encoders import (
    CROP_SIZE,
    IMAGENET_MEAN,
    IMAGENET_STD,
    RESIZE_SHORT_SIDE,
    EncodeError,
    ImageEncoder,
    TextEncoder,
)
from xmre_export.store import EvidenceStore


class ExportError(ValueError):
    """The export cannot proceed (for example duplicate instance ids)."""


@dataclass(frozen=True)
class SkippedRecord:
    subject: str
    reason: str


@dataclass
class ExportResult:
    out: str
    keys: list[str]
    skipped: list[SkippedRecord]

    @property
    def records_written(self) -> int:
        return len(self.keys)


def content_key(instance_id: str) -> str:
    return f"txt:{instance_id}"


def evidence_key(instance_id: str, source: str, kind: str, rank: int) -> str:
    return f"ev:{instance_id}:{source}:{kind}{rank}"


def image_key(digest: str) -> str:
    return f"img:{digest}"


def export_text_features(
    instances: Iterable[Instance],
    store: EvidenceStore | None,
    encoder: TextEncoder,
    out: str | Path,
    *,
    max_len: int = 128,
) -> ExportResult:
    """One record per content sentence and per evidence text.

    Content records carry post-subword marker positions plus the CLS
    position; evidence records carry the CLS position only.
    """

    records: list[xmrf.Record] = []
    skipped: list[SkippedRecord] = []
    seen: set[str] = set()
    for inst in instances:
        key = content_key(inst.id)
        if key in seen:
            raise ExportError(f"duplicate instance id {inst.id!r}; record keys must be unique")
        seen.add(key)
        marked = insert_markers(inst)
        length = encoder.encoded_length(marked)
        if length > max_len:
            skipped.append(
                SkippedRecord(key, f"encoded length {length} exceeds max length {max_len}")
            )
        else:
            enc = encoder.encode_marked_tokens(marked)
            records.append(
                xmrf.Record(
                    key=key,
                    matrix=enc.matrix,
                    positions=xmrf.Positions(e1=enc.e1_pos, e2=enc.e2_pos, cls=enc.cls_pos),
                )
            )
        if store is None:
            continue
        for ev in store.evidence_texts(inst.id):
            ev_key = evidence_key(inst.id, ev.source, ev.kind, ev.rank)
            length = encoder.encoded_length(ev.text)
            if length > max_len:
                skipped.append(
                    SkippedRecord(ev_key, f"encoded length {length} exceeds max length {max_len}")
                )
                continue
            enc = encoder.encode_text(ev.text)
            records.append(
                xmrf.Record(key=ev_key, matrix=enc.matrix, positions=xmrf.Positions(cls=enc.cls_pos))
            )
    xmrf.write_records(out, records)
    return ExportResult(out=str(out), keys=[r.key for r in records], skipped=skipped)


def export_image_features(
    images: Iterable[tuple[str, bytes]],
    encoder: ImageEncoder,
    out: str | Path,
) -> ExportResult:
    """One 2048-wide record per distinct image digest.

    ``images`` yields (subject, bytes) pairs where subject names the
    source for skip reporting; the record key is the content digest, so
    identical bytes from different subjects share one record.
    """

    records: list[xmrf.Record] = []
    skipped: list[SkippedRecord] = []
    seen: set[str] = set()
    for subject, data in images:
        digest = hashlib.sha256(data).hexdigest()
        key = image_key(digest)
        if key in seen:
            continue
        try:
            vector = encoder.encode_bytes(data)
        except EncodeError as exc:
            skipped.append(SkippedRecord(subject, str(exc)))
            continue
        seen.add(key)
        records.append(xmrf.Record(key=key, matrix=vector.reshape(1, -1)))
    xmrf.write_records(out, records)
    return ExportResult(out=str(out), keys=[r.key for r in records], skipped=skipped)


def gather_instance_images(
    instances: Iterable[Instance],
    images_dir: str | Path | None,
    store: EvidenceStore | None,
) -> Iterable[tuple[str, bytes]]:
    """(subject, bytes) pairs: each instance's content image, then its
    store crops and retrieved images. An unreadable content file is
    yielded with an empty payload so it surfaces as a per-image skip
    instead of aborting the whole export."""

    for inst in instances:
        if images_dir is not None:
            path = Path(images_dir) / inst.image_id
            try:
                yield str(path), path.read_bytes()
            except OSError:
                yield str(path), b""
        if store is not None:
            for digest in store.image_digests(inst.id):
                yield image_key(digest), store.image_bytes(digest)


@dataclass
class ExportManifest:
    """What was exported, with what, and how inputs were preprocessed."""

    datasets: list[str]
    store: str | None
    outputs: dict[str, str]
    encoders: dict[str, dict[str, str]]
    preprocessing: dict[str, object]
    records: dict[str, int] = field(default_factory=dict)
    skipped: list[SkippedRecord] = field(default_factory=list)

    @staticmethod
    def framework_versions() -> dict[str, str]:
        import torch
        import torchvision
        import transformers

        return {
            "torch": torch.__version__,
            "torchvision": torchvision.__version__,
            "transformers": transformers.__version__,
        }

    @staticmethod
    def text_preprocessing(max_len: int) -> dict[str, object]:
        return {"max_len": max_len, "markers_are_special_tokens": True}

    @staticmethod
    def image_preprocessing() -> dict[str, object]:
        return {
            "resize_short_side": RESIZE_SHORT_SIDE,
            "center_crop": CROP_SIZE,
            "normalize_mean": list(IMAGENET_MEAN),
            "normalize_std": list(IMAGENET_STD),
            "pooling": "global_average",
        }

    def write(self, path: str | Path) -> None:
        payload = asdict(self)
        Path(path).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
