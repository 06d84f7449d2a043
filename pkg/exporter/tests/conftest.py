"""Shared fixtures: offline encoders and two evidence trees.

The encoders are randomly initialized at the real output widths (768
text, 2048 image) so width and round-trip contracts are exercised
without downloading pretrained weights. `mini` is a small handcrafted
dataset plus store; `toy_tree` is a full fixture tree built through the
xmre command line, used for cross-package checks.
"""

from __future__ import annotations

import hashlib
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest
import torch
from PIL import Image

from xmre_export.encoders import (
    ImageEncoder,
    TextEncoder,
    build_wordpiece_tokenizer,
    register_markers,
)

WORDS = [
    "acme", "alice", "bob", "carol", "club", "dave", "eve", "labs", "lee",
    "nguyen", "orbit", "rivertown", "confirm", "employment", "for",
    "friendship", "joined", "location", "membership", "news", "reasons",
    "report", "the", "this", "visited", "week", "welcomed", "with",
    "snapshot", "of", "scene", "detail", "showing", "object", "item",
    "work", "##ing", "##s", "0", "1", "2", "3", "4", "5",
]


def png_bytes(width: int = 16, height: int = 16, color=(200, 30, 30)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (width, height), color).save(buf, format="PNG")
    return buf.getvalue()


def sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@pytest.fixture(scope="session")
def vocab_file(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("vocab") / "vocab.txt"
    tokens = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + WORDS
    path.write_text("\n".join(tokens) + "\n", encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def tokenizer(vocab_file):
    tok = build_wordpiece_tokenizer(vocab_file)
    register_markers(tok)
    return tok


@pytest.fixture(scope="session")
def text_encoder(tokenizer) -> TextEncoder:
    from transformers import BertConfig, BertModel

    config = BertConfig(
        vocab_size=len(tokenizer),
        hidden_size=768,
        num_hidden_layers=1,
        num_attention_heads=2,
        intermediate_size=128,
        max_position_embeddings=512,
        pad_token_id=tokenizer.pad_token_id,
    )
    torch.manual_seed(7)
    return TextEncoder(tokenizer, BertModel(config), identifier="test-bert-768")


@pytest.fixture(scope="session")
def image_encoder() -> ImageEncoder:
    from torchvision.models import resnet50

    torch.manual_seed(7)
    return ImageEncoder(resnet50(weights=None), identifier="test-resnet50")


@pytest.fixture(scope="session")
def mini(tmp_path_factory):
    """Three instances; "a" and "c" have bundles, "b" has none."""

    root = tmp_path_factory.mktemp("mini")
    images_dir = root / "images"
    images_dir.mkdir()
    content = {
        "a.png": png_bytes(24, 24, (10, 200, 10)),
        "b.png": png_bytes(32, 16, (10, 10, 200)),
        "c.png": png_bytes(16, 32, (200, 200, 10)),
    }
    for name, data in content.items():
        (images_dir / name).write_bytes(data)

    lines = [
        {
            "id": "a",
            "token": ["alice", "joined", "acme", "club", "this", "week"],
            "h": {"name": "alice", "pos": [0, 1]},
            "t": {"name": "acme club", "pos": [2, 4]},
            "img_id": "a.png",
            "relation": "member_of",
        },
        {
            "id": "b",
            "token": ["rivertown", "welcomed", "bob"],
            "h": {"name": "bob", "pos": [2, 3]},
            "t": {"name": "rivertown", "pos": [0, 1]},
            "img_id": "b.png",
            "relation": "located_in",
        },
        {
            "id": "c",
            "token": ["carol", "visited", "orbit", "labs"],
            "h": {"name": "carol", "pos": [0, 1]},
            "t": {"name": "orbit labs", "pos": [2, 4]},
            "img_id": "c.png",
            "relation": "works_for",
        },
    ]
    dataset = root / "data.jsonl"
    dataset.write_text(
        "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines), encoding="utf-8"
    )

    store_root = root / "store"
    store_images = store_root / "images"
    store_images.mkdir(parents=True)
    crop_a0 = png_bytes(12, 12, (1, 2, 3))
    crop_a1 = png_bytes(12, 12, (4, 5, 6))
    crop_c0 = png_bytes(12, 12, (7, 8, 9))
    ret_0 = png_bytes(20, 20, (30, 30, 30))
    ret_1 = png_bytes(20, 20, (60, 60, 60))
    digests = {}
    for name, data in [
        ("crop_a0", crop_a0),
        ("crop_a1", crop_a1),
        ("crop_c0", crop_c0),
        ("ret_0", ret_0),
        ("ret_1", ret_1),
    ]:
        digest = sha(data)
        digests[name] = digest
        (store_images / f"{digest}.bin").write_bytes(data)

    manifest = {
        "version": 1,
        "k": 5,
        "m": 2,
        "bundles": {
            "a": {
                "image_id": "a.png",
                "objects": [
                    {
                        "crop_id": "a.png#obj0",
                        "digest": digests["crop_a0"],
                        "bbox": [0, 0, 12, 12],
                        "salience": 0.9,
                    },
                    {
                        "crop_id": "a.png#obj1",
                        "digest": digests["crop_a1"],
                        "bbox": [4, 4, 16, 16],
                        "salience": 0.5,
                    },
                ],
                "images": [digests["ret_0"], digests["ret_1"]],
                "entities": {
                    "img": ["acme club", "alice lee"],
                    "a.png#obj0": ["membership news"],
                },
                "captions": {
                    "img": ["snapshot of membership scene 1"],
                    "a.png#obj1": ["detail 1 showing membership"],
                },
                "errors": [],
            },
            "c": {
                "image_id": "c.png",
                "objects": [
                    {
                        "crop_id": "c.png#obj0",
                        "digest": digests["crop_c0"],
                        "bbox": [0, 0, 12, 12],
                        "salience": 0.7,
                    }
                ],
                "images": [digests["ret_1"]],
                "entities": {"c.png#obj0": ["orbit labs"]},
                "captions": {"img": ["snapshot of employment scene 2"]},
                "errors": [],
            },
        },
    }
    (store_root / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    (store_root / "text").mkdir()
    return {
        "root": root,
        "dataset": dataset,
        "images_dir": images_dir,
        "store": store_root,
        "digests": digests,
        "content": content,
    }


@pytest.fixture(scope="session")
def toy_tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("tree")
    subprocess.run(
        [sys.executable, "-m", "xmre.toydata", str(root / "tree")],
        check=True,
        capture_output=True,
    )
    config = root / "tree" / "config.json"
    subprocess.run(
        ["xmre", "retrieve", "--config", str(config)], check=True, capture_output=True
    )
    return {"config": config, "cfg": json.loads(config.read_text(encoding="utf-8"))}
