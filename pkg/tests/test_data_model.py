"""Dataset parsing, marker insertion and the label vocabulary."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmre.data_model import (
    DEFAULT_MAX_LEN,
    MARKER_TOKENS,
    LabelVocabulary,
    RelationInstance,
    build_vocabulary,
    insert_entity_markers,
    parse_dataset,
    parse_line,
    serialize_instance,
    strip_markers,
    write_dataset,
)
from xmre.errors import ParseError, ValidationError


def make_instance(tokens, head, tail, **kw):
    fields = dict(id="i0", image_id="img.png", relation="r")
    fields.update(kw)
    return RelationInstance(
        tokens=tuple(tokens), head_span=head, tail_span=tail, **fields
    )


def line_of(tokens, head, tail, relation="r", **extra):
    obj = {
        "token": list(tokens),
        "h": {"name": " ".join(tokens[head[0]:head[1]]), "pos": list(head)},
        "t": {"name": " ".join(tokens[tail[0]:tail[1]]), "pos": list(tail)},
        "img_id": "img.png",
        "relation": relation,
    }
    obj.update(extra)
    return json.dumps(obj)


# --- marker insertion --------------------------------------------------------


def test_markers_head_before_tail():
    inst = make_instance(["a", "b", "c", "d"], (0, 2), (3, 4))
    marked = insert_entity_markers(inst)
    assert marked.tokens == ("[E1]", "a", "b", "[/E1]", "c", "[E2]", "d", "[/E2]")
    assert marked.tokens[marked.e1_pos] == "[E1]"
    assert marked.tokens[marked.e2_pos] == "[E2]"


def test_markers_follow_role_not_surface_order():
    # Tail first in the sentence: [E2] still wraps the tail span.
    inst = make_instance(["x", "y", "z"], (2, 3), (0, 1))
    marked = insert_entity_markers(inst)
    assert marked.tokens == ("[E2]", "x", "[/E2]", "y", "[E1]", "z", "[/E1]")


def test_markers_adjacent_spans_close_before_open():
    inst = make_instance(["x1", "x2"], (0, 1), (1, 2))
    marked = insert_entity_markers(inst)
    assert marked.tokens == ("[E1]", "x1", "[/E1]", "[E2]", "x2", "[/E2]")


def test_marked_length_is_plus_four():
    inst = make_instance(["a", "b", "c"], (0, 1), (2, 3))
    assert len(insert_entity_markers(inst).tokens) == 3 + 4


tokens_strategy = st.lists(
    st.text(alphabet="abcdefgh", min_size=1, max_size=4), min_size=2, max_size=20
)


@settings(max_examples=200, deadline=None)
@given(tokens=tokens_strategy, data=st.data())
def test_strip_markers_recovers_sentence(tokens, data):
    n = len(tokens)
    bounds = sorted(
        data.draw(
            st.lists(st.integers(0, n), min_size=4, max_size=4).filter(
                lambda xs: sorted(xs)[0] < sorted(xs)[1] <= sorted(xs)[2] < sorted(xs)[3]
            )
        )
    )
    spans = [(bounds[0], bounds[1]), (bounds[2], bounds[3])]
    if data.draw(st.booleans()):
        spans.reverse()
    inst = make_instance(tokens, spans[0], spans[1])
    marked = insert_entity_markers(inst)
    assert strip_markers(marked) == inst.tokens
    assert marked.tokens[marked.e1_pos] == "[E1]"
    assert marked.tokens[marked.e2_pos] == "[E2]"
    # Opening markers sit directly before their span's first token.
    assert marked.tokens[marked.e1_pos + 1] == tokens[inst.head_span[0]]
    assert marked.tokens[marked.e2_pos + 1] == tokens[inst.tail_span[0]]


def test_overlapping_spans_rejected():
    with pytest.raises(ValidationError, match="overlaps"):
        make_instance(["a", "b", "c"], (0, 2), (1, 3)).validate()


def test_degenerate_span_rejected():
    with pytest.raises(ValidationError, match="span"):
        make_instance(["a", "b"], (1, 1), (0, 1)).validate()


def test_span_outside_sentence_rejected():
    with pytest.raises(ValidationError, match="span"):
        make_instance(["a", "b"], (0, 1), (1, 3)).validate()


def test_marker_collision_rejected():
    with pytest.raises(ValidationError, match="reserved marker"):
        make_instance(["a", "[E1]", "b"], (0, 1), (2, 3)).validate()


# --- parsing -----------------------------------------------------------------


def test_parse_line_round_trip():
    inst = make_instance(["a", "b", "c", "d"], (1, 2), (3, 4), relation="works_for")
    again = parse_line(serialize_instance(inst), 0)
    assert again == inst


@settings(max_examples=100, deadline=None)
@given(tokens=tokens_strategy, data=st.data())
def test_serialize_parse_round_trip(tokens, data):
    n = len(tokens)
    cut = data.draw(st.integers(1, n - 1))
    inst = make_instance(tokens, (0, cut), (cut, n), id="x7", relation="rel")
    assert parse_line(serialize_instance(inst), 3) == inst


def test_parse_invalid_json_names_line():
    with pytest.raises(ParseError, match="line 12"):
        parse_line("{не json", 12)


def test_parse_missing_field_names_line():
    with pytest.raises(ParseError, match="line 4"):
        parse_line('{"token": ["a"], "relation": "r"}', 4)


def test_parse_bad_span_names_line():
    with pytest.raises(ValidationError, match="line 9"):
        parse_line(line_of(["a", "b"], (0, 1), (0, 2)), 9)


def test_parse_overlong_sentence_rejected():
    tokens = ["t"] * (DEFAULT_MAX_LEN - 3)  # M + 4 exceeds the limit by one
    with pytest.raises(ValidationError, match="exceeds max length"):
        parse_line(line_of(tokens, (0, 1), (1, 2)), 0)


def test_parse_longest_admissible_sentence():
    tokens = ["t"] * (DEFAULT_MAX_LEN - 4)
    inst = parse_line(line_of(tokens, (0, 1), (1, 2)), 0)
    assert len(insert_entity_markers(inst).tokens) == DEFAULT_MAX_LEN


def test_parse_default_id_from_line_number():
    inst = parse_line(line_of(["a", "b"], (0, 1), (1, 2)), 37)
    assert inst.id == "000037"


def test_parse_explicit_id_wins():
    inst = parse_line(line_of(["a", "b"], (0, 1), (1, 2), id="custom"), 37)
    assert inst.id == "custom"


def test_parse_dataset_reports_line_numbers(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(
        line_of(["a", "b"], (0, 1), (1, 2)) + "\n" + "garbage\n", encoding="utf-8"
    )
    with pytest.raises(ParseError, match="line 1"):
        parse_dataset(path)


def test_parse_dataset_skips_blank_lines(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(
        "\n" + line_of(["a", "b"], (0, 1), (1, 2)) + "\n\n", encoding="utf-8"
    )
    assert len(parse_dataset(path)) == 1


def test_parse_dataset_missing_file_raises_parse_error():
    with pytest.raises(ParseError, match="cannot open"):
        parse_dataset("/nonexistent/d.jsonl")


def test_write_dataset_round_trip(tmp_path):
    insts = [
        make_instance(["a", "b", "c"], (0, 1), (2, 3), id="p", relation="r1"),
        make_instance(["d", "e"], (1, 2), (0, 1), id="q", relation="r2"),
    ]
    path = tmp_path / "d.jsonl"
    write_dataset(path, insts)
    assert parse_dataset(path) == insts


# --- label vocabulary ---------------------------------------------------------


def test_vocabulary_first_occurrence_order():
    insts = [
        make_instance(["a", "b"], (0, 1), (1, 2), relation=r)
        for r in ("per", "org", "per", "loc")
    ]
    vocab = build_vocabulary(insts)
    assert vocab.labels == ("per", "org", "loc")
    assert [vocab.index(r) for r in vocab.labels] == [0, 1, 2]
    assert vocab.label(1) == "org"


def test_vocabulary_unknown_label_named():
    vocab = LabelVocabulary(["a", "b"])
    with pytest.raises(ValidationError, match="'zzz'"):
        vocab.index("zzz")


def test_vocabulary_save_load(tmp_path):
    vocab = LabelVocabulary(["member_of", "located_in"])
    path = tmp_path / "labels.txt"
    vocab.save(path)
    assert LabelVocabulary.load(path) == vocab


def test_dev_split_label_must_be_in_vocabulary(tmp_path):
    path = tmp_path / "dev.jsonl"
    path.write_text(line_of(["a", "b"], (0, 1), (1, 2), relation="novel") + "\n")
    with pytest.raises(ValidationError, match="'novel'"):
        parse_dataset(path, vocab=LabelVocabulary(["known"]))


def test_marker_tokens_are_the_four_expected():
    assert MARKER_TOKENS == ("[E1]", "[/E1]", "[E2]", "[/E2]")
