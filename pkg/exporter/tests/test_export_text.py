"""Text export: record keys, widths, marker positions, and skip rules."""

import numpy as np
import pytest

from xmre_export import xmrf
from xmre_export.dataset import parse_dataset
from xmre_export.export import ExportError, export_text_features
from xmre_export.store import EvidenceStore


@pytest.fixture(scope="module")
def exported(mini, text_encoder, tmp_path_factory):
    out = tmp_path_factory.mktemp("text") / "text.xmrf"
    instances = parse_dataset(mini["dataset"])
    store = EvidenceStore(mini["store"])
    result = export_text_features(instances, store, text_encoder, out, max_len=128)
    return result, xmrf.read_records(out), out


def test_content_keys_cover_every_instance(exported):
    result, records, _ = exported
    assert {"txt:a", "txt:b", "txt:c"} <= set(records)
    assert result.records_written == len(records)
    assert result.skipped == []


def test_evidence_keys_follow_bundle_order(exported):
    _, records, _ = exported
    expected = {
        "ev:a:img:entity0",
        "ev:a:img:entity1",
        "ev:a:img:caption0",
        "ev:a:a.png#obj0:entity0",
        "ev:a:a.png#obj1:caption0",
        "ev:c:img:caption0",
        "ev:c:c.png#obj0:entity0",
    }
    assert expected == {k for k in records if k.startswith("ev:")}


def test_records_are_width_768(exported):
    _, records, _ = exported
    for rec in records.values():
        assert rec.matrix.shape[1] == 768
        assert rec.matrix.dtype == np.float32


def test_marker_positions_point_at_marker_tokens(mini, text_encoder, exported):
    _, records, _ = exported
    from xmre_export.dataset import insert_markers

    for inst in parse_dataset(mini["dataset"]):
        rec = records[f"txt:{inst.id}"]
        marked = insert_markers(inst)
        enc = text_encoder.tokenizer(marked, is_split_into_words=True, add_special_tokens=True)
        ids = enc["input_ids"]
        assert rec.positions.cls == 0
        assert text_encoder.tokenizer.convert_ids_to_tokens([ids[rec.positions.e1]]) == ["[E1]"]
        assert text_encoder.tokenizer.convert_ids_to_tokens([ids[rec.positions.e2]]) == ["[E2]"]
        assert rec.matrix.shape[0] == len(ids)


def test_evidence_records_carry_cls_only(exported):
    _, records, _ = exported
    for key, rec in records.items():
        if not key.startswith("ev:"):
            continue
        assert rec.positions.cls == 0
        assert rec.positions.e1 is None
        assert rec.positions.e2 is None


def test_subword_splitting_keeps_markers_whole(text_encoder):
    from xmre_export.dataset import Instance, insert_markers

    inst = Instance(
        id="w",
        tokens=("alice", "working", "acme"),
        head_span=(0, 1),
        tail_span=(2, 3),
        image_id="x",
        relation="r",
    )
    enc = text_encoder.encode_marked_tokens(insert_markers(inst))
    ids = text_encoder.tokenizer(
        insert_markers(inst), is_split_into_words=True, add_special_tokens=True
    )["input_ids"]
    tokens = text_encoder.tokenizer.convert_ids_to_tokens(ids)
    assert tokens.count("[E1]") == 1 and tokens.count("[E2]") == 1
    assert "##ing" in tokens
    assert tokens[enc.e1_pos] == "[E1]"
    assert tokens[enc.e2_pos] == "[E2]"
    assert enc.matrix.shape == (len(tokens), 768)


def test_over_long_sequences_skip_with_reason(mini, text_encoder, tmp_path, exported):
    full_result, _, _ = exported
    instances = parse_dataset(mini["dataset"])
    store = EvidenceStore(mini["store"])
    out = tmp_path / "short.xmrf"
    result = export_text_features(instances, store, text_encoder, out, max_len=9)
    records = xmrf.read_records(out)
    skipped_subjects = {s.subject for s in result.skipped}
    assert {"txt:a", "txt:c"} <= skipped_subjects
    assert "txt:a" not in records
    assert "txt:b" in records
    for skip in result.skipped:
        assert "exceeds max length 9" in skip.reason
    assert set(records) | skipped_subjects == set(full_result.keys)


def test_duplicate_instance_ids_rejected(mini, text_encoder, tmp_path):
    instances = parse_dataset(mini["dataset"])
    with pytest.raises(ExportError, match="duplicate instance id"):
        export_text_features(
            instances + instances[:1], None, text_encoder, tmp_path / "dup.xmrf"
        )


def test_export_without_store_writes_content_only(mini, text_encoder, tmp_path):
    instances = parse_dataset(mini["dataset"])
    out = tmp_path / "content.xmrf"
    result = export_text_features(instances, None, text_encoder, out)
    assert set(result.keys) == {"txt:a", "txt:b", "txt:c"}


def test_export_is_deterministic(mini, text_encoder, tmp_path):
    instances = parse_dataset(mini["dataset"])
    store = EvidenceStore(mini["store"])
    a = tmp_path / "a.xmrf"
    b = tmp_path / "b.xmrf"
    export_text_features(instances, store, text_encoder, a)
    export_text_features(instances, store, text_encoder, b)
    assert a.read_bytes() == b.read_bytes()
