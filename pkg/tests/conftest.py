"""Shared fixtures: one generated toy tree plus its evidence store per session."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import pytest

from xmre import toydata
from xmre.data_model import LabelVocabulary, RelationInstance, build_vocabulary, parse_dataset
from xmre.retrieval.backends import MockBackend, MockFetcher
from xmre.retrieval.store import EvidenceStore, RetrievalConfig, build_evidence_store


@dataclass
class ToyTree:
    root: Path
    config: dict
    labels: LabelVocabulary
    splits: dict[str, tuple[RelationInstance, ...]]

    @property
    def images_dir(self) -> Path:
        return self.root / "data" / "images"

    @property
    def fixtures_dir(self) -> Path:
        return self.root / "fixtures"

    def all_instances(self) -> list[RelationInstance]:
        return [inst for split in ("train", "dev", "test") for inst in self.splits[split]]


@pytest.fixture(scope="session")
def toy_tree(tmp_path_factory) -> ToyTree:
    config_path = toydata.generate(tmp_path_factory.mktemp("toytree"))
    root = config_path.parent
    config = json.loads(config_path.read_text())
    train = parse_dataset(root / "data" / "train.jsonl")
    labels = build_vocabulary(train)
    splits = {"train": train}
    for name in ("dev", "test"):
        splits[name] = parse_dataset(root / "data" / f"{name}.jsonl", vocab=labels)
    return ToyTree(root=root, config=config, labels=labels, splits=splits)


@pytest.fixture(scope="session")
def toy_store(toy_tree, tmp_path_factory) -> EvidenceStore:
    store_dir = tmp_path_factory.mktemp("store") / "evidence"
    retrieval = toy_tree.config["retrieval"]
    return build_evidence_store(
        toy_tree.all_instances(),
        toy_tree.images_dir,
        store_dir,
        MockBackend(toy_tree.fixtures_dir),
        MockFetcher(toy_tree.fixtures_dir),
        RetrievalConfig(k=retrieval["k"], m=retrieval["m"]),
    )


@pytest.fixture(scope="session")
def toy_experiment_factory(toy_tree, toy_store):
    """Build an Experiment over the session tree; out_dir supplied per test."""

    from xmre.fusion import FusionConfig
    from xmre.training import Experiment

    def factory(out_dir: Path, **fusion_overrides) -> Experiment:
        model_cfg = dict(toy_tree.config["model"])
        model_cfg.update(fusion_overrides)
        return Experiment(
            labels=toy_tree.labels,
            splits=toy_tree.splits,
            store=toy_store,
            images_dir=toy_tree.images_dir,
            fusion=FusionConfig(n_labels=len(toy_tree.labels.labels), **model_cfg),
            out_dir=Path(out_dir),
        )

    return factory
