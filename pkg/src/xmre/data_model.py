"""Dataset parsing, entity-marker insertion and the relation label vocabulary.

The on-disk dataset format is UTF-8 JSON-lines. Each line is an object with
keys ``token`` (array of strings), ``h`` and ``t`` (objects with ``name`` and
``pos``: [start, end)), ``img_id`` and ``relation``. An optional ``id`` key
names the instance; absent ids are derived from the line number so raw MNRE
files parse unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from xmre.errors import ParseError, ValidationError

E1_OPEN = "[E1]"
E1_CLOSE = "[/E1]"
E2_OPEN = "[E2]"
E2_CLOSE = "[/E2]"
MARKER_TOKENS = (E1_OPEN, E1_CLOSE, E2_OPEN, E2_CLOSE)

DEFAULT_MAX_LEN = 128


@dataclass(frozen=True)
class RelationInstance:
    """One sentence with two marked entity spans, an image and a gold label."""

    id: str
    tokens: tuple[str, ...]
    head_span: tuple[int, int]
    tail_span: tuple[int, int]
    image_id: str
    relation: str

    def validate(self) -> None:
        m = len(self.tokens)
        for name, (a, b) in (("head", self.head_span), ("tail", self.tail_span)):
            if not (0 <= a < b <= m):
                raise ValidationError(
                    f"instance {self.id}: {name} span [{a}, {b}) invalid for {m} tokens"
                )
        hi, hj = self.head_span
        ti, tj = self.tail_span
        if hi < tj and ti < hj:
            raise ValidationError(
                f"instance {self.id}: head span {self.head_span} overlaps "
                f"tail span {self.tail_span}"
            )
        for tok in self.tokens:
            if tok in MARKER_TOKENS:
                raise ValidationError(
                    f"instance {self.id}: token {tok!r} collides with a reserved marker"
                )


@dataclass(frozen=True)
class MarkedSequence:
    """Token sequence of length M+4 with the four entity markers inserted."""

    tokens: tuple[str, ...]
    e1_pos: int
    e2_pos: int


class LabelVocabulary:
    """Bijective label <-> index map with stable first-occurrence ordering."""

    def __init__(self, labels: Sequence[str]):
        self.labels: tuple[str, ...] = tuple(labels)
        self._index = {lab: i for i, lab in enumerate(self.labels)}
        if len(self._index) != len(self.labels):
            raise ValidationError("duplicate labels in vocabulary")

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelVocabulary) and other.labels == self.labels

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise ValidationError(f"unknown relation label {label!r}") from None

    def label(self, idx: int) -> str:
        return self.labels[idx]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(lab + "\n" for lab in self.labels), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LabelVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocabulary(instances: Iterable[RelationInstance]) -> LabelVocabulary:
    """Collect labels in first-occurrence order (train split only)."""

    seen: dict[str, None] = {}
    for inst in instances:
        seen.setdefault(inst.relation, None)
    return LabelVocabulary(list(seen))


def parse_line(line: str, lineno: int, *, max_len: int = DEFAULT_MAX_LEN) -> RelationInstance:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    try:
        tokens = tuple(str(t) for t in obj["token"])
        head = obj["h"]
        tail = obj["t"]
        inst = RelationInstance(
            id=str(obj.get("id", f"{lineno:06d}")),
            tokens=tokens,
            head_span=(int(head["pos"][0]), int(head["pos"][1])),
            tail_span=(int(tail["pos"][0]), int(tail["pos"][1])),
            image_id=str(obj["img_id"]),
            relation=str(obj["relation"]),
        )
    except (KeyError, IndexError, TypeError) as exc:
        raise ParseError(f"line {lineno}: missing or malformed field ({exc})") from exc
    try:
        inst.validate()
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from exc
    # Markers must survive encoding, so over-long sentences are rejected
    # outright instead of truncated.
    if len(tokens) + 4 > max_len:
        raise ValidationError(
            f"line {lineno}: instance {inst.id} has {len(tokens)} tokens; "
            f"{len(tokens)} + 4 markers exceeds max length {max_len}"
        )
    return inst


def parse_dataset(
    path: str | Path,
    *,
    vocab: LabelVocabulary | None = None,
    max_len: int = DEFAULT_MAX_LEN,
) -> list[RelationInstance]:
    """Parse a JSON-lines dataset file.

    When ``vocab`` is given (dev/test splits), every relation must already be
    a member; unknown labels raise a :class:`ValidationError` naming the label.
    """

    instances: list[RelationInstance] = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot open dataset {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            inst = parse_line(line, lineno, max_len=max_len)
            if vocab is not None and inst.relation not in vocab:
                raise ValidationError(
                    f"line {lineno}: relation label {inst.relation!r} is not in the "
                    f"training vocabulary"
                )
            instances.append(inst)
    return instances


def serialize_instance(inst: RelationInstance) -> str:
    """One JSON line; ``parse_line`` of the result reproduces ``inst``."""

    obj = {
        "id": inst.id,
        "token": list(inst.tokens),
        "h": {"name": " ".join(inst.tokens[inst.head_span[0] : inst.head_span[1]]),
              "pos": list(inst.head_span)},
        "t": {"name": " ".join(inst.tokens[inst.tail_span[0] : inst.tail_span[1]]),
              "pos": list(inst.tail_span)},
        "img_id": inst.image_id,
        "relation": inst.relation,
    }
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def write_dataset(path: str | Path, instances: Iterable[RelationInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(serialize_instance(inst) + "\n")


def insert_entity_markers(inst: RelationInstance) -> MarkedSequence:
    """Wrap the head span in [E1]..[/E1] and the tail span in [E2]..[/E2].

    Marker identity follows entity role, not surface order: when the tail
    precedes the head in the sentence, [E2]/[/E2] still wrap the tail span.
    At a shared boundary position the closing marker is emitted before the
    opening one, so adjacent spans nest correctly.
    """

    inst.validate()
    opens = {inst.head_span[0]: E1_OPEN, inst.tail_span[0]: E2_OPEN}
    closes = {inst.head_span[1]: E1_CLOSE, inst.tail_span[1]: E2_CLOSE}
    out: list[str] = []
    positions: dict[str, int] = {}
    for pos in range(len(inst.tokens) + 1):
        if pos in closes:
            out.append(closes[pos])
        if pos in opens:
            positions[opens[pos]] = len(out)
            out.append(opens[pos])
        if pos < len(inst.tokens):
            out.append(inst.tokens[pos])
    return MarkedSequence(tokens=tuple(out), e1_pos=positions[E1_OPEN], e2_pos=positions[E2_OPEN])


def strip_markers(marked: MarkedSequence) -> tuple[str, ...]:
    """Delete the four marker tokens, recovering the original sequence."""

    return tuple(t for t in marked.tokens if t not in MARKER_TOKENS)


def with_relation(inst: RelationInstance, relation: str) -> RelationInstance:
    return replace(inst, relation=relation)
