"""JSON-lines dataset parsing and entity-marker insertion.

The dataset format is the one the `xmre` package reads: one JSON object
per line with keys `token` (list of strings), `h` and `t` (objects with
`name` and `pos` = [start, end)), `img_id`, `relation`, and an optional
`id` that defaults to the zero-padded line number.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

MARKER_E1_OPEN = "[E1]"
MARKER_E1_CLOSE = "[/E1]"
MARKER_E2_OPEN = "[E2]"
MARKER_E2_CLOSE = "[/E2]"
MARKERS = (MARKER_E1_OPEN, MARKER_E1_CLOSE, MARKER_E2_OPEN, MARKER_E2_CLOSE)


class DatasetError(ValueError):
    """A dataset line is malformed or violates the format's invariants."""


@dataclass(frozen=True)
class Instance:
    id: str
    tokens: tuple[str, ...]
    head_span: tuple[int, int]
    tail_span: tuple[int, int]
    image_id: str
    relation: str


def _check_span(span: tuple[int, int], n_tokens: int, name: str) -> None:
    start, end = span
    if not (0 <= start < end <= n_tokens):
        raise DatasetError(f"{name} span {span} invalid for {n_tokens} tokens")


def parse_line(line: str, lineno: int) -> Instance:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    try:
        tokens = tuple(str(t) for t in obj["token"])
        head = (int(obj["h"]["pos"][0]), int(obj["h"]["pos"][1]))
        tail = (int(obj["t"]["pos"][0]), int(obj["t"]["pos"][1]))
        inst = Instance(
            id=str(obj.get("id", f"{lineno:06d}")),
            tokens=tokens,
            head_span=head,
            tail_span=tail,
            image_id=str(obj["img_id"]),
            relation=str(obj["relation"]),
        )
    except (KeyError, IndexError, TypeError) as exc:
        raise DatasetError(f"line {lineno}: missing or malformed field ({exc})") from exc
    _check_span(inst.head_span, len(tokens), "head")
    _check_span(inst.tail_span, len(tokens), "tail")
    if max(inst.head_span[0], inst.tail_span[0]) < min(inst.head_span[1], inst.tail_span[1]):
        raise DatasetError(f"line {lineno}: head and tail spans overlap")
    return inst


def parse_dataset(path: str | Path) -> list[Instance]:
    instances: list[Instance] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            instances.append(parse_line(line, lineno))
    return instances


def insert_markers(inst: Instance) -> list[str]:
    """Wrap the head span in [E1]..[/E1] and the tail span in [E2]..[/E2].

    Marker identity follows the entity role, not surface order: when the
    tail precedes the head in the sentence, [E2]/[/E2] still wrap the
    tail. At a shared boundary the earlier span's closing marker lands
    before the later span's opening marker.
    """

    inserts = [
        (inst.head_span[0], 1, MARKER_E1_OPEN),
        (inst.head_span[1], 0, MARKER_E1_CLOSE),
        (inst.tail_span[0], 1, MARKER_E2_OPEN),
        (inst.tail_span[1], 0, MARKER_E2_CLOSE),
    ]
    out = list(inst.tokens)
    for pos, _rank, marker in sorted(inserts, reverse=True):
        out.insert(pos, marker)
    return out
