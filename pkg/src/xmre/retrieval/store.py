"""Content-addressed evidence store with a JSON manifest.

Layout under the store root:

    manifest.json          instance_id -> bundle (timestamp-free, byte-stable)
    images/<sha256>.bin    crop and retrieved-image bytes, content-addressed
    text/<id>.json         textual evidence with per-item provenance

The manifest carries no volatile fields, so two mock-backend builds from the
same fixtures produce byte-identical manifests. Provenance (which includes
retrieval timestamps for live backends) lives only in the per-instance text
files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from xmre.data_model import RelationInstance
from xmre.errors import ValidationError, XmreError
from xmre.retrieval.backends import Fetcher, RetrievalBackend
from xmre.retrieval.ops import (
    DetectedObject,
    crop_image,
    detect_objects,
    retrieve_textual_evidence,
    retrieve_visual_evidence,
)

log = logging.getLogger("xmre.retrieval")

MANIFEST_NAME = "manifest.json"
SOURCE_IMAGE = "img"


@dataclass(frozen=True)
class StoredObject:
    crop_id: str
    bbox: tuple[int, int, int, int]
    salience: float
    digest: str


@dataclass(frozen=True)
class EvidenceBundle:
    """Evidence lists for one instance; sources are 'img' plus crop ids."""

    image_id: str
    objects: tuple[StoredObject, ...] = ()
    entities: dict = field(default_factory=dict)  # source -> tuple[str, ...]
    captions: dict = field(default_factory=dict)
    images: tuple[str, ...] = ()  # digests of retrieved images, rank order
    errors: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "objects": [
                {
                    "crop_id": o.crop_id,
                    "bbox": list(o.bbox),
                    "salience": o.salience,
                    "digest": o.digest,
                }
                for o in self.objects
            ],
            "entities": {src: list(items) for src, items in self.entities.items()},
            "captions": {src: list(items) for src, items in self.captions.items()},
            "images": list(self.images),
            "errors": list(self.errors),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvidenceBundle":
        return cls(
            image_id=obj["image_id"],
            objects=tuple(
                StoredObject(
                    crop_id=o["crop_id"],
                    bbox=tuple(o["bbox"]),
                    salience=o["salience"],
                    digest=o["digest"],
                )
                for o in obj.get("objects", [])
            ),
            entities={s: tuple(v) for s, v in obj.get("entities", {}).items()},
            captions={s: tuple(v) for s, v in obj.get("captions", {}).items()},
            images=tuple(obj.get("images", [])),
            errors=tuple(obj.get("errors", [])),
        )

    def digests(self) -> list[str]:
        return [o.digest for o in self.objects] + list(self.images)


class EvidenceStore:
    """Filesystem store; many concurrent readers, one manifest writer."""

    def __init__(self, root: str | Path, k: int = 10, m: int = 3):
        self.root = Path(root)
        self.k = k
        self.m = m
        self.manifest: dict[str, EvidenceBundle] = {}
        self._write_lock = threading.Lock()

    @property
    def images_dir(self) -> Path:
        return self.root / "images"

    @property
    def text_dir(self) -> Path:
        return self.root / "text"

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    @classmethod
    def create(cls, root: str | Path, k: int = 10, m: int = 3) -> "EvidenceStore":
        store = cls(root, k=k, m=m)
        store.images_dir.mkdir(parents=True, exist_ok=True)
        store.text_dir.mkdir(parents=True, exist_ok=True)
        return store

    @classmethod
    def open(cls, root: str | Path, verify_digests: bool = False) -> "EvidenceStore":
        """Load a manifest and verify that every referenced file exists."""

        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.is_file():
            raise ValidationError(f"no manifest at {path}")
        obj = json.loads(path.read_text(encoding="utf-8"))
        store = cls(root, k=int(obj.get("k", 10)), m=int(obj.get("m", 3)))
        store.manifest = {
            iid: EvidenceBundle.from_json(b) for iid, b in obj.get("bundles", {}).items()
        }
        store.validate(deep=verify_digests)
        return store

    def validate(self, deep: bool = False) -> None:
        problems = []
        for iid, bundle in self.manifest.items():
            for digest in bundle.digests():
                path = self.image_path(digest)
                if not path.is_file():
                    problems.append(f"{iid}: missing image file {digest}")
                elif deep:
                    actual = hashlib.sha256(path.read_bytes()).hexdigest()
                    if actual != digest:
                        problems.append(f"{iid}: digest mismatch for {digest}")
        if problems:
            raise ValidationError(
                "evidence store is inconsistent: " + "; ".join(problems[:10])
            )

    def image_path(self, digest: str) -> Path:
        return self.images_dir / f"{digest}.bin"

    def put_image(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self.image_path(digest)
        if not path.is_file():
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(data)
            tmp.replace(path)
        return digest

    def image_bytes(self, digest: str) -> bytes:
        path = self.image_path(digest)
        if not path.is_file():
            raise ValidationError(f"store has no image {digest}")
        return path.read_bytes()

    def bundle(self, instance_id: str) -> EvidenceBundle | None:
        return self.manifest.get(instance_id)

    def add_bundle(self, instance_id: str, bundle: EvidenceBundle, provenance: dict) -> None:
        with self._write_lock:
            self.manifest[instance_id] = bundle
            text_path = self.text_dir / f"{instance_id}.json"
            text_path.write_text(
                json.dumps(provenance, sort_keys=True, indent=1) + "\n", encoding="utf-8"
            )

    def write_manifest(self) -> None:
        payload = {
            "version": 1,
            "k": self.k,
            "m": self.m,
            "bundles": {
                iid: self.manifest[iid].to_json() for iid in sorted(self.manifest)
            },
        }
        tmp = self.manifest_path.with_name(MANIFEST_NAME + ".tmp")
        tmp.write_text(
            json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )
        tmp.replace(self.manifest_path)


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 10
    m: int = 3
    workers: int = 1
    page_timeout: float = 10.0

    def __post_init__(self) -> None:
        if self.k < 0 or self.m < 0:
            raise ValidationError("k and m must be >= 0")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")


def _build_one(
    store: EvidenceStore,
    instance: RelationInstance,
    image_bytes: bytes,
    backend: RetrievalBackend,
    fetcher: Fetcher,
    config: RetrievalConfig,
) -> tuple[EvidenceBundle, dict]:
    errors: list[str] = []
    objects: list[DetectedObject] = []
    stored_objects: list[StoredObject] = []
    try:
        objects = detect_objects(backend, instance.image_id, image_bytes, config.m)
    except XmreError as exc:
        errors.append(f"detect_objects: {exc}")
    crops: list[tuple[str, bytes]] = []
    for obj in objects:
        data = crop_image(image_bytes, obj.bbox)
        digest = store.put_image(data)
        stored_objects.append(StoredObject(obj.crop_id, obj.bbox, obj.salience, digest))
        crops.append((obj.crop_id, data))

    entities: dict[str, tuple[str, ...]] = {}
    captions: dict[str, tuple[str, ...]] = {}
    provenance: dict = {"sources": {}, "images": []}
    try:
        sources = [(instance.image_id, image_bytes)] + crops
        for evidence in retrieve_textual_evidence(
            backend, fetcher, sources, config.k, page_timeout=config.page_timeout
        ):
            source = SOURCE_IMAGE if evidence.source == instance.image_id else evidence.source
            entities[source] = tuple(item.text for item in evidence.entities)
            captions[source] = tuple(item.text for item in evidence.captions)
            provenance["sources"][source] = {
                "entities": [
                    {"text": item.text, "provenance": item.provenance}
                    for item in evidence.entities
                ],
                "captions": [
                    {"text": item.text, "provenance": item.provenance}
                    for item in evidence.captions
                ],
            }
    except XmreError as exc:
        errors.append(f"textual_evidence: {exc}")

    digests: list[str] = []
    try:
        for item in retrieve_visual_evidence(
            backend, fetcher, " ".join(instance.tokens), config.k
        ):
            digest = store.put_image(item.data)
            digests.append(digest)
            provenance["images"].append({"digest": digest, "provenance": item.provenance})
    except XmreError as exc:
        errors.append(f"visual_evidence: {exc}")

    bundle = EvidenceBundle(
        image_id=instance.image_id,
        objects=tuple(stored_objects),
        entities=entities,
        captions=captions,
        images=tuple(digests),
        errors=tuple(errors),
    )
    return bundle, provenance


def build_evidence_store(
    instances: Sequence[RelationInstance],
    images_dir: str | Path,
    root: str | Path,
    backend: RetrievalBackend,
    fetcher: Fetcher,
    config: RetrievalConfig | None = None,
) -> EvidenceStore:
    """Build (or extend) the store; instances already in the manifest are
    skipped, so a rerun over a complete store makes zero backend calls."""

    config = config or RetrievalConfig()
    images_dir = Path(images_dir)
    root = Path(root)
    if (root / MANIFEST_NAME).is_file():
        store = EvidenceStore.open(root)
        store.k, store.m = config.k, config.m
    else:
        store = EvidenceStore.create(root, k=config.k, m=config.m)

    pending = [inst for inst in instances if inst.id not in store.manifest]

    def work(instance: RelationInstance) -> None:
        image_path = images_dir / instance.image_id
        if not image_path.is_file():
            bundle = EvidenceBundle(
                image_id=instance.image_id,
                errors=(f"content image not found: {image_path.name}",),
            )
            store.add_bundle(instance.id, bundle, {"sources": {}, "images": []})
            return
        bundle, provenance = _build_one(
            store, instance, image_path.read_bytes(), backend, fetcher, config
        )
        store.add_bundle(instance.id, bundle, provenance)

    if config.workers == 1 or len(pending) <= 1:
        for inst in pending:
            work(inst)
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            list(pool.map(work, pending))
    store.write_manifest()
    log.info(
        "evidence store at %s: %d bundles (%d new)",
        root,
        len(store.manifest),
        len(pending),
    )
    return store


def iter_bundles(store: EvidenceStore) -> Iterable[tuple[str, EvidenceBundle]]:
    return sorted(store.manifest.items())
