"""Command-line entry point.

Subcommands: retrieve, features, train, eval, ablate, sweep-evidence,
validate-store. Exit codes: 0 success, 1 runtime failure (stderr names the
failing module), 2 usage error. Logs go to stderr; artifacts only under the
configured output directory, each carrying the resolved run config.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from xmre import config as cfgmod
from xmre.config import RunConfig
from xmre.data_model import LabelVocabulary, build_vocabulary, parse_dataset
from xmre.encoders import content_text_key, image_key
from xmre.errors import ConfigError, XmreError
from xmre.featfile import FeatureFile
from xmre.fusion import FusionModel
from xmre.metrics import SeedSummary, format_summary_table
from xmre.retrieval.backends import MockBackend, MockFetcher
from xmre.retrieval.store import EvidenceStore, build_evidence_store
from xmre.training import Experiment, evaluate, run_ablation_suite, sweep_evidence, train

log = logging.getLogger("xmre.cli")


class UsageError(Exception):
    """Bad flags or an unresolvable config; maps to exit code 2."""


class PhaseFailure(Exception):
    def __init__(self, module: str, cause: XmreError):
        super().__init__(str(cause))
        self.module = module


@contextlib.contextmanager
def phase(module: str):
    """Tag errors with the module responsible, for the exit-1 message."""

    try:
        yield
    except PhaseFailure:
        raise
    except XmreError as exc:
        raise PhaseFailure(module, exc) from exc


def _resolved_config(args) -> RunConfig:
    try:
        return _resolve_or_raise(args)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _resolve_or_raise(args) -> RunConfig:
    overrides: dict = {}
    for item in args.set or []:
        key, value = cfgmod.parse_set_flag(item)
        overrides[key] = value
    for dotted, attr in (
        ("output", "out"),
        ("store", "store"),
        ("scale", "scale"),
        ("train.max_steps", "max_steps"),
        ("train.epochs", "epochs"),
        ("train.learning_rate", "learning_rate"),
        ("train.batch_size", "batch_size"),
        ("train.k_text", "k_text"),
        ("train.k_image", "k_image"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[dotted] = value
    if getattr(args, "seed", None):
        overrides["seeds"] = list(args.seed)
    for flag in (
        "no_selection",
        "no_consistency",
        "drop_object_evidence",
        "drop_image_evidence",
        "drop_visual_evidence",
    ):
        if getattr(args, flag, False):
            overrides[f"train.{flag}"] = True
    return cfgmod.resolve(args.config, overrides)


def _load_splits(run: RunConfig, names=("train", "dev", "test")):
    with phase("data_model"):
        splits = {}
        train_split = tuple(parse_dataset(run.dataset_path("train")))
        vocab = build_vocabulary(train_split)
        splits["train"] = train_split
        for name in names:
            if name == "train":
                continue
            path = run.dataset_path(name)
            if path.is_file():
                splits[name] = tuple(parse_dataset(path, vocab=vocab))
    return vocab, splits


def _open_store(run: RunConfig) -> EvidenceStore:
    with phase("evidence_retrieval"):
        return EvidenceStore.open(run.store_dir)


def _experiment(run: RunConfig, out_dir: Path) -> tuple[Experiment, LabelVocabulary]:
    vocab, splits = _load_splits(run)
    store = _open_store(run)
    with phase("encoders"):
        text_ff = image_ff = None
        if run.scale == "paper":
            text_path, image_path = run.feature_path("text"), run.feature_path("image")
            if text_path is None or image_path is None:
                raise ConfigError("paper scale requires features.text and features.image")
            text_ff = FeatureFile(text_path)
            image_ff = FeatureFile(image_path)
    with phase("fusion"):
        fusion = run.fusion_config(n_labels=len(vocab))
    experiment = Experiment(
        labels=vocab,
        splits=splits,
        store=store,
        images_dir=run.images_dir,
        fusion=fusion,
        out_dir=out_dir,
        text_features=text_ff,
        image_features=image_ff,
    )
    return experiment, vocab


def cmd_retrieve(args) -> int:
    run = _resolved_config(args)
    vocab, splits = _load_splits(run)
    del vocab
    with phase("evidence_retrieval"):
        retrieval = run.retrieval_config()
        backend_name = run.raw["retrieval"]["backend"]
        if backend_name == "mock":
            fixtures = Path(run.raw["retrieval"]["fixtures"])
            backend = MockBackend(fixtures)
            fetcher = MockFetcher(fixtures)
        elif backend_name == "live":
            from xmre.retrieval.live import LiveBackend, LiveFetcher

            backend = LiveBackend()
            fetcher = LiveFetcher()
        else:
            raise ConfigError(f"unknown retrieval backend {backend_name!r}")
        instances = [inst for split in splits.values() for inst in split]
        store = build_evidence_store(
            instances, run.images_dir, run.store_dir, backend, fetcher, retrieval
        )
    run.echo(run.store_dir)
    print(f"store at {store.root}: {len(store.manifest)} bundles", file=sys.stderr)
    return 0


def cmd_validate_store(args) -> int:
    run = _resolved_config(args)
    with phase("evidence_retrieval"):
        store = EvidenceStore.open(run.store_dir, verify_digests=True)
    print(
        f"store at {store.root} is consistent: {len(store.manifest)} bundles, "
        f"k={store.k}, m={store.m}",
        file=sys.stderr,
    )
    return 0


def cmd_features(args) -> int:
    """Check exported feature files against the dataset and evidence store."""

    run = _resolved_config(args)
    vocab, splits = _load_splits(run)
    del vocab
    store = _open_store(run)
    report: dict = {"files": {}, "missing": {}}
    with phase("encoders"):
        text_path, image_path = run.feature_path("text"), run.feature_path("image")
        if text_path is None and image_path is None:
            raise ConfigError("features needs features.text and/or features.image set")
        missing_text: list[str] = []
        missing_image: list[str] = []
        if text_path is not None:
            ff = FeatureFile(text_path)
            report["files"]["text"] = {"records": len(ff), "path": str(text_path)}
            for split in splits.values():
                for inst in split:
                    key = content_text_key(inst.id)
                    if key not in ff:
                        missing_text.append(key)
            report["missing"]["text"] = missing_text
        if image_path is not None:
            ff = FeatureFile(image_path)
            report["files"]["image"] = {"records": len(ff), "path": str(image_path)}
            seen: set[str] = set()
            for bundle in store.manifest.values():
                for digest in bundle.digests():
                    if digest in seen:
                        continue
                    seen.add(digest)
                    if image_key(digest) not in ff:
                        missing_image.append(image_key(digest))
            report["missing"]["image"] = missing_image
    out_dir = run.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    run.echo(out_dir)
    (out_dir / "features_report.json").write_text(
        json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    n_missing = len(report["missing"].get("text", [])) + len(
        report["missing"].get("image", [])
    )
    print(f"feature coverage: {n_missing} missing keys", file=sys.stderr)
    if n_missing and args.strict:
        raise PhaseFailure("encoders", ConfigError(f"{n_missing} feature keys missing"))
    return 0


def cmd_train(args) -> int:
    run = _resolved_config(args)
    out_dir = run.output_dir
    experiment, vocab = _experiment(run, out_dir)
    seed = run.seeds[0]
    with phase("training_eval"):
        train_cfg = run.train_config(seed=seed)
        model = FusionModel(experiment.model_config(train_cfg), seed=seed)
        train_prep = experiment.prepare(experiment.split("train"), train_cfg, seed)
        dev_prep = (
            experiment.prepare(experiment.split("dev"), train_cfg, seed)
            if "dev" in experiment.splits
            else []
        )
        result = train(model, train_prep, dev_prep, vocab.labels, train_cfg, out_dir)
    run.echo(out_dir)
    vocab.save(out_dir / "labels.txt")
    summary = {
        "seed": seed,
        "steps": result.steps,
        "best_dev_f1": result.best_dev_f1,
        "best_step": result.best_step,
        "checkpoint": result.checkpoint_path.name,
    }
    (out_dir / "train_result.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"seed {seed}: {result.steps} steps, best dev F1 {result.best_dev_f1:.4f} "
        f"at step {result.best_step}",
        file=sys.stderr,
    )
    return 0


def cmd_eval(args) -> int:
    run = _resolved_config(args)
    out_dir = run.output_dir
    with phase("fusion"):
        model = FusionModel.load(args.checkpoint)
    with phase("training_eval"):
        labels_path = Path(args.labels) if args.labels else Path(args.checkpoint).parent / "labels.txt"
        if not labels_path.is_file():
            raise ConfigError(f"label vocabulary not found: {labels_path}")
        vocab = LabelVocabulary.load(labels_path)
        if len(vocab) != model.config.n_labels:
            raise ConfigError(
                f"vocabulary has {len(vocab)} labels, checkpoint expects "
                f"{model.config.n_labels}"
            )
    _, splits = _load_splits(run)
    store = _open_store(run)
    with phase("training_eval"):
        experiment = Experiment(
            labels=vocab,
            splits=splits,
            store=store,
            images_dir=run.images_dir,
            fusion=model.config,
            out_dir=out_dir,
        )
        if run.scale == "paper":
            experiment.text_features = FeatureFile(run.feature_path("text"))
            experiment.image_features = FeatureFile(run.feature_path("image"))
        eval_cfg = run.train_config()
        prepared = experiment.prepare(experiment.split(args.split), eval_cfg, model.seed)
        report = evaluate(model, prepared, vocab.labels)
    out_dir.mkdir(parents=True, exist_ok=True)
    run.echo(out_dir)
    (out_dir / f"eval_{args.split}.json").write_text(
        json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"{args.split}: accuracy {report.accuracy:.4f}, macro F1 {report.macro_f1:.4f}",
        file=sys.stderr,
    )
    return 0


def cmd_ablate(args) -> int:
    run = _resolved_config(args)
    out_dir = run.output_dir
    experiment, _ = _experiment(run, out_dir)
    with phase("training_eval"):
        base = run.train_config()
        rows, table = run_ablation_suite(
            experiment,
            base,
            run.seeds,
            out_dir,
            progress=lambda name, seed: print(f"{name} / seed {seed}", file=sys.stderr),
        )
    run.echo(out_dir)
    print(table, end="")
    return 0


def cmd_sweep(args) -> int:
    run = _resolved_config(args)
    out_dir = run.output_dir
    experiment, _ = _experiment(run, out_dir)
    counts = _parse_counts(args.counts)
    modalities = tuple(m.strip() for m in args.modality.split(",") if m.strip())
    with phase("training_eval"):
        base = run.train_config()
        written = sweep_evidence(
            experiment, base, run.seeds, out_dir, counts=counts, modalities=modalities
        )
    run.echo(out_dir)
    for modality, path in written.items():
        print(f"{modality}: {path}", file=sys.stderr)
    return 0


def _parse_counts(text: str) -> list[int]:
    counts: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part[1:]:
                lo, _, hi = part.partition("-")
                counts.extend(range(int(lo), int(hi) + 1))
            else:
                counts.append(int(part))
    except ValueError:
        raise UsageError(f"--counts expects integers or ranges, got {text!r}") from None
    if not counts:
        raise UsageError(f"no counts parsed from {text!r}")
    return counts


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON run config; flags override its values")
    sub.add_argument("--out", help="output directory (config key: output)")
    sub.add_argument("--store", help="evidence store directory")
    sub.add_argument("--scale", choices=["toy", "paper"])
    sub.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override any config key by dotted path, e.g. train.max_steps=40",
    )
    sub.add_argument(
        "--seed", action="append", type=int, help="seed (repeatable; overrides seeds)"
    )


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--max-steps", type=int, dest="max_steps")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--learning-rate", type=float, dest="learning_rate")
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--k-text", type=int, dest="k_text")
    sub.add_argument("--k-image", type=int, dest="k_image")
    for flag in (
        "no-selection",
        "no-consistency",
        "drop-object-evidence",
        "drop-image-evidence",
        "drop-visual-evidence",
    ):
        sub.add_argument(f"--{flag}", action="store_true", dest=flag.replace("-", "_"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmre",
        description="Retrieval-augmented multimodal relation extraction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("retrieve", help="build the evidence store for a dataset")
    _add_common(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("features", help="check feature files against dataset + store")
    _add_common(p)
    p.add_argument("--strict", action="store_true", help="fail when keys are missing")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train one model (first seed of the seed list)")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--labels", help="label vocabulary file (default: beside checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full model plus five ablations, multi-seed")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-evidence", help="F1 vs. evidence count curves")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--counts", default="1-20", help="counts, e.g. 1-20 or 1,5,10")
    p.add_argument("--modality", default="text,image")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate-store", help="verify store digests and layout")
    _add_common(p)
    p.set_defaults(func=cmd_validate_store)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    np.seterr(all="raise", under="ignore")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"xmre: usage error: {exc}", file=sys.stderr)
        return 2
    except PhaseFailure as exc:
        print(f"xmre: error in {exc.module}: {exc}", file=sys.stderr)
        return 1
    except XmreError as exc:
        print(f"xmre: error in cli: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
