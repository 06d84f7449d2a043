"""Read-only access to an evidence store directory.

Layout, as produced by `xmre retrieve`:

    <root>/manifest.json   {"bundles": {instance_id: bundle}, "k": .., "m": ..}
    <root>/images/<sha256>.bin
    <root>/text/<instance_id>.json

A bundle holds `image_id`, `objects` (list of {crop_id, digest, bbox,
salience}), `images` (retrieved digests in rank order), `entities` and
`captions` (source -> list of strings, where source is "img" or a crop
id), and `errors`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

SOURCE_IMAGE = "img"


class StoreError(ValueError):
    """The evidence store is missing or structurally invalid."""


@dataclass(frozen=True)
class EvidenceText:
    source: str
    kind: str
    rank: int
    text: str


class EvidenceStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise StoreError(f"cannot open store manifest {manifest_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise StoreError(f"store manifest {manifest_path} is not valid JSON: {exc}") from exc
        if "bundles" not in manifest:
            raise StoreError(f"store manifest {manifest_path} lacks a 'bundles' map")
        self.bundles: dict[str, dict] = manifest["bundles"]
        self.k = manifest.get("k")
        self.m = manifest.get("m")

    def bundle(self, instance_id: str) -> dict | None:
        return self.bundles.get(instance_id)

    def image_bytes(self, digest: str) -> bytes:
        path = self.root / "images" / f"{digest}.bin"
        try:
            return path.read_bytes()
        except OSError as exc:
            raise StoreError(f"store image {digest} unreadable: {exc}") from exc

    def evidence_texts(self, instance_id: str) -> Iterator[EvidenceText]:
        """Texts in the bundle's deterministic order.

        Sources run whole image first, then object crops in detection
        order; within a source, entities precede captions; rank is the
        index within each per-source list. This matches the order the
        training side assigns record ranks in.
        """

        bundle = self.bundle(instance_id)
        if bundle is None:
            return
        sources = [SOURCE_IMAGE] + [obj["crop_id"] for obj in bundle.get("objects", [])]
        entities = bundle.get("entities", {})
        captions = bundle.get("captions", {})
        for source in sources:
            for rank, text in enumerate(entities.get(source, [])):
                yield EvidenceText(source, "entity", rank, text)
            for rank, text in enumerate(captions.get(source, [])):
                yield EvidenceText(source, "caption", rank, text)

    def image_digests(self, instance_id: str) -> list[str]:
        """Crop digests then retrieved digests, in bundle order."""

        bundle = self.bundle(instance_id)
        if bundle is None:
            return []
        digests = [obj["digest"] for obj in bundle.get("objects", [])]
        digests.extend(bundle.get("images", []))
        return digests
