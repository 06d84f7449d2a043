"""Deterministic toy fixture generator.

``python -m xmre.toydata <root>`` writes a self-contained working tree:

    config.json            run config wired to the paths below
    data/{train,dev,test}.jsonl   32/8/8 instances over 4 relation labels
    data/images/*.png      one content image per instance
    fixtures/objects.json  mock object detections (4 boxes per image)
    fixtures/textual.json  mock reverse-lookup entities + page refs
    fixtures/visual.json   mock text-to-image search results (20 per query)
    fixtures/pages/*.html  caption pages served by the mock fetcher
    fixtures/images/*.png  retrieved-image pool

Every byte is a pure function of this module: images are seeded gradients,
sentences come from fixed templates, and each relation label has a trigger
token plus a distinct image intensity band, so the task is learnable by the
toy encoders. Regenerating into the same directory is idempotent.
"""

from __future__ import annotations

import io
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from xmre.data_model import RelationInstance, write_dataset

RELATIONS = (
    ("member_of", "membership", 40),
    ("located_in", "location", 100),
    ("works_for", "employment", 160),
    ("friend_of", "friendship", 220),
)

HEAD_NAMES = (("Alice", "Lee"), ("Bob",), ("Carol", "Nguyen"), ("Dave",))
TAIL_NAMES = (("Acme", "Club"), ("Rivertown",), ("Orbit", "Labs"), ("Eve",))

IMAGE_SIZE = 32
OBJECT_BOXES = ((0, 0, 16, 16), (16, 0, 16, 16), (0, 16, 16, 16), (16, 16, 16, 16))
OBJECT_SALIENCES = (0.9, 0.7, 0.5, 0.3)
RETRIEVED_PER_RELATION = 20
ENTITIES_PER_IMAGE = 20
ENTITIES_PER_CROP = 4


def _sentence(template: int, head: tuple[str, ...], tail: tuple[str, ...], trigger: str):
    """Tokens plus head/tail spans; templates vary span order and adjacency."""

    if template == 0:
        tokens = [*head, "joined", *tail, trigger, "this", "week"]
        h = (0, len(head))
        t = (len(head) + 1, len(head) + 1 + len(tail))
    elif template == 1:
        tokens = [*tail, "welcomed", *head, "with", trigger, "news"]
        t = (0, len(tail))
        h = (len(tail) + 1, len(tail) + 1 + len(head))
    elif template == 2:
        # Adjacent spans: the tail starts where the head ends.
        tokens = ["report", ":", *head, *tail, "confirm", trigger]
        h = (2, 2 + len(head))
        t = (2 + len(head), 2 + len(head) + len(tail))
    else:
        tokens = [*head, "visited", "the", *tail, "for", trigger, "reasons"]
        h = (0, len(head))
        t = (len(head) + 2, len(head) + 2 + len(tail))
    return tokens, h, t


def _content_image(base: int, variant: int) -> bytes:
    """32x32 grayscale PNG; quadrants offset from the relation's base band."""

    px = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    offsets = (0, 15, 30, 5)
    for (x, y, w, h), off in zip(OBJECT_BOXES, offsets):
        px[y : y + h, x : x + w] = min(255, base + off + variant)
    buf = io.BytesIO()
    Image.fromarray(px, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _retrieved_image(base: int, j: int) -> bytes:
    px = np.full((IMAGE_SIZE, IMAGE_SIZE), min(255, base + 2 * j), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(px, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _instances(split: str, per_relation: int, start_variant: int):
    out = []
    for r, (relation, trigger, _base) in enumerate(RELATIONS):
        for i in range(per_relation):
            template = i % 4
            head = HEAD_NAMES[(r + i) % len(HEAD_NAMES)]
            tail = TAIL_NAMES[(r + i + (1 if split != "train" else 0)) % len(TAIL_NAMES)]
            tokens, h, t = _sentence(template, head, tail, trigger)
            idx = len(out)
            out.append(
                RelationInstance(
                    id=f"{split}{idx:03d}",
                    tokens=tuple(tokens),
                    head_span=h,
                    tail_span=t,
                    image_id=f"{split}_{idx:03d}.png",
                    relation=relation,
                )
            )
    return out


def generate(root: str | Path) -> Path:
    """Write the full toy tree under ``root`` and return the config path."""

    root = Path(root)
    data_dir = root / "data"
    images_dir = data_dir / "images"
    fixtures = root / "fixtures"
    pages_dir = fixtures / "pages"
    fx_images = fixtures / "images"
    for d in (images_dir, pages_dir, fx_images):
        d.mkdir(parents=True, exist_ok=True)

    splits = {
        "train": _instances("train", 8, 0),
        "dev": _instances("dev", 2, 50),
        "test": _instances("test", 2, 70),
    }
    objects: dict[str, list] = {}
    textual: dict[str, dict] = {}
    visual: dict[str, list] = {}

    for r, (relation, trigger, base) in enumerate(RELATIONS):
        for j in range(RETRIEVED_PER_RELATION):
            (fx_images / f"ret_r{r}_{j:02d}.png").write_bytes(_retrieved_image(base, j))

    for split, instances in splits.items():
        write_dataset(data_dir / f"{split}.jsonl", instances)
        for inst in instances:
            r = next(i for i, (rel, _, _) in enumerate(RELATIONS) if rel == inst.relation)
            relation, trigger, base = RELATIONS[r]
            variant = int(inst.id[-3:]) % 8
            (images_dir / inst.image_id).write_bytes(_content_image(base, variant))

            objects[inst.image_id] = [
                {"bbox": list(bbox), "salience": sal}
                for bbox, sal in zip(OBJECT_BOXES, OBJECT_SALIENCES)
            ]
            stem = Path(inst.image_id).stem
            web_refs = []
            for n in range(2):
                page_name = f"p_{stem}_{n}.html"
                image_url = f"https://media.example/{stem}_{n}.jpg"
                caption = f"Snapshot of {trigger} scene {n} for {stem}"
                (pages_dir / page_name).write_text(
                    "<html><body>\n"
                    f"<figure><img src=\"{image_url}\" alt=\"photo {n}\">"
                    f"<figcaption>{caption}</figcaption></figure>\n"
                    "</body></html>\n",
                    encoding="utf-8",
                )
                web_refs.append(
                    {"page_url": f"fixture://pages/{page_name}", "image_url": image_url}
                )
            textual[inst.image_id] = {
                "entities": [f"{trigger} circle {j}" for j in range(ENTITIES_PER_IMAGE)],
                "web_refs": web_refs,
            }
            for o in range(3):
                crop_ref = f"{inst.image_id}#obj{o}"
                page_name = f"p_{stem}_obj{o}.html"
                image_url = f"https://media.example/{stem}_obj{o}.jpg"
                (pages_dir / page_name).write_text(
                    "<html><body>\n"
                    f"<figure><img src=\"{image_url}\">"
                    f"<figcaption>Detail {o} showing {trigger}</figcaption></figure>\n"
                    "</body></html>\n",
                    encoding="utf-8",
                )
                textual[crop_ref] = {
                    "entities": [
                        f"{trigger} object {o} item {j}" for j in range(ENTITIES_PER_CROP)
                    ],
                    "web_refs": [
                        {"page_url": f"fixture://pages/{page_name}", "image_url": image_url}
                    ],
                }
            visual[" ".join(inst.tokens)] = [
                f"fixture://images/ret_r{r}_{j:02d}.png"
                for j in range(RETRIEVED_PER_RELATION)
            ]

    for name, payload in (
        ("objects.json", objects),
        ("textual.json", textual),
        ("visual.json", visual),
    ):
        (fixtures / name).write_text(
            json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )

    config = {
        "dataset": {
            "train": str(data_dir / "train.jsonl"),
            "dev": str(data_dir / "dev.jsonl"),
            "test": str(data_dir / "test.jsonl"),
            "images": str(images_dir),
        },
        "store": str(root / "store"),
        "output": str(root / "out"),
        "scale": "toy",
        "seeds": [1, 2, 3, 4, 5],
        "model": {"d_text": 16, "d_vis": 32, "hidden_dim": 64},
        "train": {
            "learning_rate": 0.02,
            "epochs": 30,
            "k_text": 3,
            "k_image": 3,
        },
        "retrieval": {"fixtures": str(fixtures), "k": 20, "m": 3},
    }
    config_path = root / "config.json"
    config_path.write_text(
        json.dumps(config, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return config_path


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m xmre.toydata <output-root>", file=sys.stderr)
        return 2
    config_path = generate(argv[0])
    print(f"wrote toy fixture tree; config at {config_path}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
