"""Acceptance gate: one test per release criterion, run with ``pytest -v``.

Each test prints a [PASS] line with its measurements when it succeeds; the
pytest -v status line is the authoritative pass/fail record per criterion.
"""

import json
import re
import time
from dataclasses import replace

import numpy as np
import pytest

import xmre.autodiff as ad
from xmre.data_model import RelationInstance, insert_entity_markers, strip_markers
from xmre.fusion import (
    FusionConfig,
    FusionModel,
    consistency_reweight,
    multi_head_attention,
)
from xmre.metrics import SeedSummary, compute_report, format_summary_table
from xmre.retrieval.backends import MockBackend, MockFetcher
from xmre.retrieval.captions import extract_caption
from xmre.retrieval.store import RetrievalConfig, build_evidence_store
from xmre.training import TrainConfig, evaluate, run_ablation_suite, sweep_evidence, train

import cases
import oracles

OUTPUT_KEYS = (
    "h_t_content", "h_t_retrieved", "h_v_content", "h_v_retrieved",
    "logits", "probabilities",
)


def _pass(line: str) -> None:
    print(f"[PASS] {line}", flush=True)


# --- criterion 1: oracle equivalence ---------------------------------------------


def _random_layer_case(rng):
    d_text, d_vis = 16, 32
    heads_text = int(rng.choice([1, 2, 4]))
    heads_vis = int(rng.choice([1, 2, 4]))
    params = {
        "sel/phi/W": rng.normal(size=(d_vis, d_text)),
        "sel/phi/b": rng.normal(size=d_text),
        "sel/theta/W": rng.normal(size=(d_text, d_vis)),
        "sel/theta/b": rng.normal(size=d_vis),
    }
    for stream, d in (("text", d_text), ("vis", d_vis)):
        for w in ("Wq", "Wk", "Wv", "Wo"):
            params[f"sel/l0/{stream}/{w}"] = rng.normal(size=(d, d))

    def mask(n):
        if rng.integers(0, 2) == 0:
            return None
        m = np.zeros(n, dtype=bool)
        m[: int(rng.integers(1, n + 1))] = True
        return m

    t_seqs = [rng.normal(size=(int(rng.integers(2, 7)), d_text))
              for _ in range(1 + int(rng.integers(0, 3)))]
    t_masks = [mask(seq.shape[0]) for seq in t_seqs]
    v_mat = rng.normal(size=(int(rng.integers(1, 6)), d_vis))
    v_mask = mask(v_mat.shape[0])
    return params, t_seqs, t_masks, v_mat, v_mask, heads_text, heads_vis


def _package_layer(params, t_seqs, t_masks, v_mat, v_mask, heads_text, heads_vis):
    p = {name: ad.constant(arr) for name, arr in params.items()}
    v = ad.constant(v_mat)
    seqs = [ad.constant(s) for s in t_seqs]
    v_in_text = ad.add(ad.matmul(v, p["sel/phi/W"]), p["sel/phi/b"])
    t_in_vis = ad.add(ad.matmul(seqs[0], p["sel/theta/W"]), p["sel/theta/b"])

    def cat_mask(first, n_first, second, n_second):
        if first is None and second is None:
            return None
        a = np.ones(n_first, dtype=bool) if first is None else first
        b = np.ones(n_second, dtype=bool) if second is None else second
        return np.concatenate([a, b])

    new_seqs = []
    for seq, mask in zip(seqs, t_masks):
        kv = ad.concat([v_in_text, seq], axis=0)
        kv_mask = cat_mask(v_mask, v_mat.shape[0], mask, seq.shape[0])
        new_seqs.append(multi_head_attention(
            seq, kv,
            p["sel/l0/text/Wq"], p["sel/l0/text/Wk"],
            p["sel/l0/text/Wv"], p["sel/l0/text/Wo"],
            heads_text, kv_mask,
        ))
    kv_v = ad.concat([t_in_vis, v], axis=0)
    kv_v_mask = cat_mask(t_masks[0], t_seqs[0].shape[0], v_mask, v_mat.shape[0])
    new_v = multi_head_attention(
        v, kv_v,
        p["sel/l0/vis/Wq"], p["sel/l0/vis/Wk"],
        p["sel/l0/vis/Wv"], p["sel/l0/vis/Wo"],
        heads_vis, kv_v_mask,
    )
    return [s.data for s in new_seqs], new_v.data


def test_criterion_1_oracle_equivalence():
    started = time.monotonic()
    rng = np.random.default_rng(20240901)
    worst = 0.0
    n_cases = 0

    for _ in range(450):
        params, t_seqs, t_masks, v_mat, v_mask, ht, hv = _random_layer_case(rng)
        got_seqs, got_v = _package_layer(params, t_seqs, t_masks, v_mat, v_mask, ht, hv)
        want_seqs, want_v = oracles.oracle_selection_layer(
            t_seqs, t_masks, v_mat, v_mask, params, 0, ht, hv
        )
        for got, want in zip(got_seqs + [got_v], want_seqs + [want_v]):
            worst = max(worst, float(np.abs(got - want).max()))
        n_cases += 1

    for _ in range(300):
        d = int(rng.choice([16, 32]))
        n = int(rng.integers(1, 7))
        query = rng.normal(size=d)
        retrieved = rng.normal(size=(n, d))
        w = rng.normal(size=(d, d))
        wp = rng.normal(size=(d, d))
        temp = float(rng.uniform(0.5, 2.0)) * d
        got = consistency_reweight(
            ad.constant(query), ad.constant(retrieved),
            ad.constant(w), ad.constant(wp), temp,
        ).data
        want = oracles.oracle_consistency(query, retrieved, w, wp, temp)
        worst = max(worst, float(np.abs(got - want).max()))
        n_cases += 1

    for i in range(300):
        cfg = cases.random_config(rng)
        if i % 5 == 0:
            model = FusionModel(replace(cfg, vocab_size=64, max_positions=16),
                                seed=int(rng.integers(0, 1000)))
            case = cases.token_case(rng, model)
        else:
            model = FusionModel(cfg, seed=int(rng.integers(0, 1000)))
            case = cases.random_feature_case(rng, cfg)
        out = model.forward(case.instance)
        ref = oracles.oracle_forward(
            cases.param_arrays(model), case.t_seqs, case.t_masks,
            case.e1_pos, case.e2_pos, case.cls_positions,
            case.v_mat, case.v_mask, case.content_rows, case.retrieved_rows,
            **cases.oracle_kwargs(model.config),
        )
        for key in OUTPUT_KEYS:
            worst = max(worst, float(np.abs(getattr(out, key) - ref[key]).max()))
        n_cases += 1

    elapsed = time.monotonic() - started
    assert n_cases >= 1000
    assert worst < 1e-6, f"worst deviation {worst:.3e}"
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    _pass(f"criterion 1: {n_cases} cases, worst |model - oracle| = {worst:.3e}, "
          f"{elapsed:.1f}s")


# --- criterion 2: gradient check ----------------------------------------------------


def _loss_of(model: FusionModel, instance, gold: int) -> float:
    logits = model.forward(instance).logits
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[gold])


def test_criterion_2_gradient_check():
    started = time.monotonic()
    cfg = FusionConfig(
        n_labels=3, d_text=16, d_vis=32, n_layers=1, heads_text=2, heads_vis=2,
        hidden_dim=8, vocab_size=24, max_positions=16,
    )
    model = FusionModel(cfg, seed=11)
    rng = np.random.default_rng(7)
    case = cases.token_case(rng, model, n_evidence=2, n_retrieved=2)
    gold = 1

    model.zero_grad()
    output = model.forward(case.instance)
    model.loss_and_backward(output, gold)
    analytic = {name: g.copy() for name, g in model.gradients().items()}

    step = 1e-3
    checked = 0
    worst = 0.0
    worst_name = ""
    for name, param in sorted(model.parameters().items()):
        grad = analytic[name]
        flat = param.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = _loss_of(model, case.instance, gold)
            flat[i] = original - step
            down = _loss_of(model, case.instance, gold)
            flat[i] = original
            numeric = (up - down) / (2 * step)
            a = float(grad.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            if rel > worst:
                worst = rel
                worst_name = name
            checked += 1

    elapsed = time.monotonic() - started
    assert worst < 1e-4, f"worst relative error {worst:.3e} at {worst_name}"
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    _pass(f"criterion 2: {checked} parameter entries, worst rel err = {worst:.3e} "
          f"({worst_name}), {elapsed:.1f}s")


# --- criterion 3: invariant suite -----------------------------------------------------


def test_criterion_3_invariant_suite():
    rng = np.random.default_rng(42)

    # Softmax rows normalize within 1e-6, masked keys get exactly zero.
    for _ in range(200):
        rows, cols = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        scale = float(rng.choice([1.0, 10.0, 100.0]))
        logits = ad.constant(rng.normal(size=(rows, cols)) * scale)
        mask = np.zeros(cols, dtype=bool)
        mask[: int(rng.integers(1, cols + 1))] = True
        out = ad.masked_softmax(logits, mask.reshape(1, cols), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert (out[:, ~mask] == 0.0).all()
        plain = ad.softmax_np(logits.data)
        np.testing.assert_allclose(plain.sum(axis=-1), 1.0, atol=1e-6)

    # Consistency pooling is invariant to the order of retrieved rows.
    for _ in range(100):
        d = int(rng.choice([16, 32]))
        n = int(rng.integers(2, 7))
        query = ad.constant(rng.normal(size=d))
        retrieved = rng.normal(size=(n, d))
        w = ad.constant(rng.normal(size=(d, d)))
        wp = ad.constant(rng.normal(size=(d, d)))
        base = consistency_reweight(query, ad.constant(retrieved), w, wp, float(d)).data
        perm = rng.permutation(n)
        permuted = consistency_reweight(
            query, ad.constant(retrieved[perm]), w, wp, float(d)
        ).data
        np.testing.assert_allclose(permuted, base, atol=1e-6)

    # Entity-marker insertion round-trips exactly.
    words = [f"w{i}" for i in range(30)]
    for _ in range(200):
        n = int(rng.integers(2, 21))
        tokens = tuple(str(rng.choice(words)) for _ in range(n))
        if n >= 4:
            a, b, c, d = sorted(rng.choice(n + 1, size=4, replace=False).tolist())
        else:
            a, b, c, d = 0, 1, 1, 2
        if b == a:
            b += 1
        if d <= c:
            d = c + 1
        spans = [(a, b), (c, d)]
        if rng.integers(0, 2):
            spans.reverse()
        inst = RelationInstance(
            id="inv", tokens=tokens, head_span=spans[0], tail_span=spans[1],
            image_id="x.png", relation="r",
        )
        marked = insert_entity_markers(inst)
        assert strip_markers(marked) == tokens
        assert marked.tokens[marked.e1_pos] == "[E1]"
        assert marked.tokens[marked.e2_pos] == "[E2]"
        h0, h1 = inst.head_span
        assert marked.tokens[marked.e1_pos + 1 : marked.e1_pos + 1 + (h1 - h0)] == tokens[h0:h1]

    # Metrics agree with the counting oracle to 1e-12.
    for _ in range(150):
        n_labels = int(rng.integers(2, 10))
        n = int(rng.integers(1, 60))
        gold = rng.integers(0, n_labels, size=n).tolist()
        pred = rng.integers(0, n_labels, size=n).tolist()
        report = compute_report(gold, pred, [f"l{i}" for i in range(n_labels)])
        ref = oracles.oracle_metrics(gold, pred, n_labels)
        for field in ("accuracy", "macro_precision", "macro_recall", "macro_f1",
                      "macro_f1_all", "micro_f1"):
            assert getattr(report, field) == pytest.approx(ref[field], abs=1e-12)

    # Shifting every logit by a constant preserves the argmax.
    for _ in range(200):
        z = rng.normal(size=int(rng.integers(2, 24))) * 10
        shift = float(rng.normal() * 1e4)
        assert int(np.argmax(ad.softmax_np(z + shift))) == int(np.argmax(ad.softmax_np(z)))
        np.testing.assert_allclose(ad.softmax_np(z + shift), ad.softmax_np(z), atol=1e-9)

    # The same invariance holds through the classifier bias.
    cfg = cases.random_config(rng)
    model = FusionModel(cfg, seed=5)
    case = cases.random_feature_case(rng, cfg, n_evidence=2, n_retrieved=2)
    before = model.forward(case.instance)
    model.parameters()["clf/b2"].data += 123.456
    after = model.forward(case.instance)
    assert int(np.argmax(after.probabilities)) == int(np.argmax(before.probabilities))
    np.testing.assert_allclose(after.probabilities, before.probabilities, atol=1e-9)

    _pass("criterion 3: softmax normalization, masked-key zeros, consistency "
          "permutation invariance, marker round trip, metric oracle equality, "
          "logit-shift argmax invariance")


# --- criterion 4: overfit sanity -------------------------------------------------------


def _overfit_once(toy_tree, toy_experiment_factory, out_dir, seed=1):
    exp = toy_experiment_factory(out_dir)
    toy_train = toy_tree.config["train"]
    config = TrainConfig(
        learning_rate=toy_train["learning_rate"],
        k_text=toy_train["k_text"],
        k_image=toy_train["k_image"],
        batch_size=16,
        epochs=250,
        seed=seed,
        stop_at_train_accuracy=1.0,
    )
    prepared = exp.prepare(exp.split("train"), config, seed)
    assert len(prepared) == 32
    model = FusionModel(exp.model_config(config), seed=seed)
    result = train(model, prepared, [], exp.labels.labels, config, out_dir)
    return result


def test_criterion_4_overfit_and_determinism(toy_tree, toy_experiment_factory, tmp_path):
    started = time.monotonic()
    first = _overfit_once(toy_tree, toy_experiment_factory, tmp_path / "a")
    second = _overfit_once(toy_tree, toy_experiment_factory, tmp_path / "b")
    elapsed = time.monotonic() - started

    reached = first.first_step_at_accuracy(1.0)
    assert reached is not None, "never reached 100% train accuracy"
    assert reached <= 500, f"needed {reached} steps"
    assert first.log_path.read_bytes() == second.log_path.read_bytes()
    assert first.checkpoint_path.read_bytes() == second.checkpoint_path.read_bytes()
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    _pass(f"criterion 4: 100% train accuracy at step {reached} (<=500), "
          f"two same-seed runs bitwise identical, {elapsed:.1f}s")


# --- criterion 5: ablation wiring -------------------------------------------------------


def test_criterion_5_ablation_wiring(toy_experiment_factory, tmp_path):
    exp = toy_experiment_factory(tmp_path)
    rng = np.random.default_rng(8)

    # Six-row table from the suite.
    rows, table = run_ablation_suite(
        exp, TrainConfig(learning_rate=0.02, epochs=1, batch_size=16),
        seeds=(1,), out_dir=tmp_path / "abl",
    )
    assert len(rows) == 6
    body_lines = [l for l in table.splitlines() if l and not set(l) <= {"-", " "}]
    assert len(body_lines) == 7  # header plus six variants

    # w/o selection equals a zero-layer stack bitwise.
    for _ in range(5):
        cfg = cases.random_config(rng)
        case = cases.random_feature_case(rng, cfg, n_evidence=2, n_retrieved=2)
        flagged = FusionModel(replace(cfg, no_selection=True), seed=3)
        zero_layers = FusionModel(replace(cfg, n_layers=0), seed=3)
        a = flagged.forward(case.instance)
        b = zero_layers.forward(case.instance)
        assert np.array_equal(a.logits, b.logits)

    # w/o consistency equals uniform evidence averaging. With zero selection
    # layers the pooled rows are the raw inputs, so the mean is checkable
    # exactly; with layers the oracle recomputes the same uniform mean.
    cfg = cases.random_config(rng, n_labels=4, n_layers=0)
    model = FusionModel(replace(cfg, no_consistency=True), seed=4)
    case = cases.random_feature_case(rng, cfg, n_evidence=4, n_retrieved=4)
    out = model.forward(case.instance)
    assert np.array_equal(
        out.h_t_retrieved,
        np.stack([case.t_seqs[1 + i][case.cls_positions[i]]
                  for i in range(len(case.cls_positions))]).mean(axis=0),
    )
    assert np.array_equal(
        out.h_v_retrieved, case.v_mat[case.retrieved_rows].mean(axis=0)
    )
    row = rng.normal(size=cfg.d_vis)
    fixture = replace(
        case.instance,
        visual=replace(
            case.instance.visual,
            matrix=ad.constant(np.vstack([case.v_mat[case.content_rows],
                                          np.tile(row, (4, 1))])),
            tags=tuple(case.instance.visual.tags[i] for i in case.content_rows)
            + ("retrieved",) * 4,
        ),
    )
    fixed = model.forward(fixture)
    assert np.array_equal(fixed.h_v_retrieved, row)

    layered_cfg = cases.random_config(rng, n_labels=4, n_layers=2)
    layered = FusionModel(replace(layered_cfg, no_consistency=True), seed=4)
    layered_case = cases.random_feature_case(rng, layered_cfg, n_evidence=3, n_retrieved=3)
    got = layered.forward(layered_case.instance)
    ref = oracles.oracle_forward(
        cases.param_arrays(layered), layered_case.t_seqs, layered_case.t_masks,
        layered_case.e1_pos, layered_case.e2_pos, layered_case.cls_positions,
        layered_case.v_mat, layered_case.v_mask,
        layered_case.content_rows, layered_case.retrieved_rows,
        **cases.oracle_kwargs(layered.config),
    )
    np.testing.assert_allclose(got.h_t_retrieved, ref["h_t_retrieved"], atol=1e-9)
    np.testing.assert_allclose(got.h_v_retrieved, ref["h_v_retrieved"], atol=1e-9)

    # Evidence ablations remove exactly the tagged rows/sequences.
    prep_full = exp.prepare(exp.split("train")[:4], TrainConfig(), seed=1)
    prep_no_vis = exp.prepare(exp.split("train")[:4],
                              TrainConfig(drop_visual_evidence=True), seed=1)
    prep_no_obj = exp.prepare(exp.split("train")[:4],
                              TrainConfig(drop_object_evidence=True), seed=1)
    prep_no_img = exp.prepare(exp.split("train")[:4],
                              TrainConfig(drop_image_evidence=True), seed=1)
    for f, nv, no, ni in zip(prep_full, prep_no_vis, prep_no_obj, prep_no_img):
        kept = [i for i, t in enumerate(f.visual.tags) if t != "retrieved"]
        assert nv.visual.tags == tuple(f.visual.tags[i] for i in kept)
        np.testing.assert_array_equal(nv.visual.matrix.data, f.visual.matrix.data[kept])
        want_no_obj = [e for e in f.evidence if e.source == "img"]
        assert [e.tokens for e in no.evidence] == [e.tokens for e in want_no_obj]
        want_no_img = [e for e in f.evidence if e.source != "img"]
        assert [e.tokens for e in ni.evidence] == [e.tokens for e in want_no_img]

    _pass("criterion 5: 6-row table, w/o selection == zero layers bitwise, "
          "w/o consistency == uniform average (fixture exact), drops remove "
          "exactly the tagged rows")


# --- criterion 6: harness shape ----------------------------------------------------------


def test_criterion_6_harness_shape(toy_experiment_factory, tmp_path):
    exp = toy_experiment_factory(tmp_path)
    quick = TrainConfig(learning_rate=0.02, epochs=1, batch_size=16)

    written = sweep_evidence(
        exp, quick, seeds=(1,), out_dir=tmp_path / "sweep",
        counts=tuple(range(1, 21)), modalities=("text", "image"),
    )
    assert set(written) == {"text", "image"}
    for path in written.values():
        lines = path.read_text().splitlines()
        assert lines[0] == "count,mean_f1,std_f1"
        assert len(lines) == 21, f"{path.name} has {len(lines) - 1} points"
        assert [int(l.split(",")[0]) for l in lines[1:]] == list(range(1, 21))

    reports = []
    for seed in (1, 2, 3, 4, 5):
        _, report = exp.run(quick, seed, tmp_path / "seeds" / f"s{seed}")
        reports.append(report)
    summary = SeedSummary.from_reports(reports)
    assert summary.n_seeds == 5
    table = format_summary_table([("Ours", summary)])
    assert re.search(r"\d+\.\d{2}±\d+\.\d{2}", table)

    paper = FusionConfig(
        scale="paper", n_labels=23, d_text=768, d_vis=2048,
        hidden_dim=1024, n_layers=0,
    )
    assert paper.classifier_input_dim == 5632
    model = FusionModel(paper, seed=0)
    assert model.params["clf/W1"].data.shape == (5632, 1024)
    assert model.params["clf/W2"].data.shape == (1024, 23)
    assert model.text_encoder is None

    _pass("criterion 6: 20 sweep points per modality, mean±std over exactly "
          "5 seeds, paper-scale classifier 5632 -> 1024 -> 23")


# --- criterion 7: retrieval offline suite ---------------------------------------------------


def test_criterion_7_retrieval_offline_suite(toy_tree, toy_store, tmp_path):
    fixtures = toy_tree.fixtures_dir
    retrieval = toy_tree.config["retrieval"]
    config = RetrievalConfig(k=retrieval["k"], m=retrieval["m"])
    instances = toy_tree.all_instances()

    # Rebuilding the existing store touches neither backend nor fetcher.
    backend = MockBackend(fixtures)
    fetcher = MockFetcher(fixtures)
    build_evidence_store(
        instances, toy_tree.images_dir, toy_store.root, backend, fetcher, config
    )
    assert backend.total_calls == 0
    assert fetcher.total_calls == 0

    # An independent build in a fresh directory yields the same manifest bytes.
    rebuilt = build_evidence_store(
        instances, toy_tree.images_dir, tmp_path / "fresh",
        MockBackend(fixtures), MockFetcher(fixtures), config,
    )
    assert (rebuilt.root / "manifest.json").read_bytes() == \
        (toy_store.root / "manifest.json").read_bytes()

    # Caption extraction recovers the known caption from the HTML fixture.
    page = (fixtures / "pages" / "p_train_000_0.html").read_text()
    caption = extract_caption(page, "https://media.example/train_000_0.jpg")
    assert caption == "Snapshot of membership scene 0 for train_000"
    assert extract_caption(page, "https://media.example/other.jpg") is None

    # k and m limits hold on a fresh store built with tight settings.
    tight = build_evidence_store(
        instances[:4], toy_tree.images_dir, tmp_path / "tight",
        MockBackend(fixtures), MockFetcher(fixtures), RetrievalConfig(k=2, m=1),
    )
    for instance in instances[:4]:
        bundle = tight.bundle(instance.id)
        assert bundle.errors == ()
        assert len(bundle.objects) <= 1
        assert len(bundle.images) <= 2
        for entities in bundle.entities.values():
            assert len(entities) <= 2
        for captions in bundle.captions.values():
            assert len(captions) <= 2
    full_bundle = toy_store.bundle(instances[0].id)
    assert len(full_bundle.objects) <= retrieval["m"]
    assert len(full_bundle.images) <= retrieval["k"]

    _pass("criterion 7: idempotent rebuild (zero calls), byte-stable manifest, "
          "caption recovered from HTML fixture, k/m limits enforced")
