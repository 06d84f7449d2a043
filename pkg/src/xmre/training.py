"""Training loop, evaluation, ablation suite and the evidence-count sweep.

Determinism contract: a fixed seed fixes the parameter init, the per-epoch
shuffle, and the intra-batch accumulation order, so two runs with the same
seed produce bitwise-identical loss traces and checkpoint files. Gradients
are accumulated one instance at a time in dataset order within each batch
and averaged before the optimizer step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from xmre.data_model import LabelVocabulary, RelationInstance
from xmre.encoders import (
    EvidenceSelection,
    PreparedInstance,
    ToyImageEncoder,
    prepare_instance_files,
    prepare_instance_toy,
)
from xmre.errors import ConfigError, TrainingError
from xmre.featfile import FeatureFile
from xmre.fusion import FusionConfig, FusionModel
from xmre.metrics import EvalReport, SeedSummary, compute_report, format_summary_table
from xmre.retrieval.store import EvidenceStore

log = logging.getLogger("xmre.training")

ABLATION_VARIANTS: tuple[tuple[str, dict], ...] = (
    ("Ours", {}),
    ("w/o Object Evidence", {"drop_object_evidence": True}),
    ("w/o Image Evidence", {"drop_image_evidence": True}),
    ("w/o Visual Evidence", {"drop_visual_evidence": True}),
    ("w/o Selection", {"no_selection": True}),
    ("w/o Consistency", {"no_consistency": True}),
)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings plus the run-variant switches."""

    learning_rate: float = 3e-5
    warmup_frac: float = 0.06
    batch_size: int = 16
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 1
    k_text: int = 10
    k_image: int = 10
    no_selection: bool = False
    no_consistency: bool = False
    drop_object_evidence: bool = False
    drop_image_evidence: bool = False
    drop_visual_evidence: bool = False
    scale: str = "toy"
    stop_at_train_accuracy: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup fraction {self.warmup_frac} outside [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.k_text < 0 or self.k_image < 0:
            raise ConfigError("evidence counts must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1 and self.max_steps is None:
            raise ConfigError("need epochs >= 1 or an explicit max_steps")

    def selection(self) -> EvidenceSelection:
        return EvidenceSelection(
            k_text=self.k_text,
            k_image=self.k_image,
            drop_object_evidence=self.drop_object_evidence,
            drop_image_evidence=self.drop_image_evidence,
            drop_visual_evidence=self.drop_visual_evidence,
        )


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Piecewise-linear schedule: 0 at step 0, peak at the warmup boundary,
    0 at the final step. ``step`` counts optimizer updates from 0."""

    if total_steps < 1:
        raise ConfigError("schedule needs at least one step")
    warmup = int(total_steps * warmup_frac)
    if warmup == 0:
        return base_lr * (total_steps - step) / total_steps
    if step <= warmup:
        return base_lr * step / warmup
    return base_lr * (total_steps - step) / (total_steps - warmup)


class Adam:
    """Adaptive-moment optimizer, β=(0.9, 0.999), ε=1e-8, optional decoupled
    weight decay. The learning rate is supplied per step by the schedule."""

    def __init__(
        self,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for name in sorted(params):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correct1
            v_hat = self.v[name] / correct2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * params[name].data
            params[name].data = params[name].data - lr * update


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps: int
    best_dev_f1: float
    best_step: int
    train_accuracy: tuple[tuple[int, float], ...] = ()

    def first_step_at_accuracy(self, threshold: float) -> int | None:
        for step, acc in self.train_accuracy:
            if acc >= threshold:
                return step
        return None


def predict(model: FusionModel, prepared: Sequence[PreparedInstance]) -> list[int]:
    return [int(np.argmax(model.forward(p).probabilities)) for p in prepared]


def evaluate(
    model: FusionModel,
    prepared: Sequence[PreparedInstance],
    labels: Sequence[str],
    workers: int = 1,
) -> EvalReport:
    """Deterministic evaluation; instance order fixes the report exactly."""

    for p in prepared:
        if p.label_id is None:
            raise ConfigError(f"instance {p.id} has no gold label to evaluate against")
    if workers > 1 and len(prepared) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(model.forward, prepared))
        pred = [int(np.argmax(o.probabilities)) for o in outputs]
    else:
        pred = predict(model, prepared)
    gold = [p.label_id for p in prepared]
    return compute_report(gold, pred, labels)


def _train_accuracy(model: FusionModel, prepared: Sequence[PreparedInstance]) -> float:
    pred = predict(model, prepared)
    hits = sum(1 for p, y in zip(pred, (inst.label_id for inst in prepared)) if p == y)
    return hits / len(prepared) if prepared else 0.0


def train(
    model: FusionModel,
    train_set: Sequence[PreparedInstance],
    dev_set: Sequence[PreparedInstance],
    labels: Sequence[str],
    config: TrainConfig,
    out_dir: str | Path,
) -> TrainResult:
    """Optimize cross-entropy; keep the best-dev-F1 parameters.

    After return the model holds the best parameters and the checkpoint on
    disk contains them; the JSON-lines log has one record per step with
    ``step``, ``loss`` and ``lr``.
    """

    if not train_set:
        raise ConfigError("empty training set")
    for p in train_set:
        if p.label_id is None:
            raise ConfigError(f"training instance {p.id} has no gold label")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    checkpoint_path = out_dir / "checkpoint_best.xmrf"

    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    if total_steps < 1:
        raise ConfigError("schedule resolves to zero optimizer steps")

    optimizer = Adam()
    best_f1 = -1.0
    best_step = 0
    best_params: dict[str, np.ndarray] = {
        name: p.data.copy() for name, p in model.parameters().items()
    }
    accuracy_history: list[tuple[int, float]] = []
    step = 0
    stop = False

    def snapshot_if_better(at_step: int) -> None:
        nonlocal best_f1, best_step, best_params
        if dev_set:
            f1 = evaluate(model, dev_set, labels).macro_f1
        else:
            f1 = _train_accuracy(model, train_set)
        if f1 > best_f1:
            best_f1 = f1
            best_step = at_step
            best_params = {
                name: p.data.copy() for name, p in model.parameters().items()
            }

    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(config.epochs):
            if stop:
                break
            order = np.random.default_rng([abs(config.seed), epoch]).permutation(n)
            for start in range(0, n, config.batch_size):
                if step >= total_steps:
                    stop = True
                    break
                batch = [train_set[i] for i in order[start : start + config.batch_size]]
                model.zero_grad()
                losses = []
                for inst in batch:
                    output = model.forward(inst)
                    losses.append(model.loss_and_backward(output, inst.label_id))
                    if not math.isfinite(losses[-1]):
                        raise TrainingError(
                            f"non-finite loss {losses[-1]} at step {step}, "
                            f"instance {inst.id!r}, lr "
                            f"{lr_at(step, total_steps, config.learning_rate, config.warmup_frac)}"
                        )
                grads = {
                    name: g / len(batch) for name, g in model.gradients().items()
                }
                lr = lr_at(step, total_steps, config.learning_rate, config.warmup_frac)
                optimizer.step(model.parameters(), grads, lr)
                mean_loss = sum(losses) / len(losses)
                log_fh.write(
                    json.dumps({"step": step, "loss": mean_loss, "lr": lr}) + "\n"
                )
                step += 1
            acc = _train_accuracy(model, train_set)
            accuracy_history.append((step, acc))
            snapshot_if_better(step)
            if (
                config.stop_at_train_accuracy is not None
                and acc >= config.stop_at_train_accuracy
            ):
                stop = True

    for name, data in best_params.items():
        model.parameters()[name].data = data
    model.save(checkpoint_path)
    log.info(
        "trained %d steps (seed %d); best dev F1 %.4f at step %d",
        step, config.seed, best_f1, best_step,
    )
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        steps=step,
        best_dev_f1=best_f1,
        best_step=best_step,
        train_accuracy=tuple(accuracy_history),
    )


# --- experiment orchestration ------------------------------------------------


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class Experiment:
    """Datasets, evidence store and dimensions for one line of runs.

    ``fusion`` is the full-pipeline template; ablation and sweep variants are
    produced by overriding its flags from a :class:`TrainConfig`.
    """

    labels: LabelVocabulary
    splits: dict[str, tuple[RelationInstance, ...]]
    store: EvidenceStore
    images_dir: Path
    fusion: FusionConfig
    out_dir: Path
    text_features: FeatureFile | None = None
    image_features: FeatureFile | None = None
    _image_cache: dict[str, bytes] = field(default_factory=dict, repr=False)

    def split(self, name: str) -> tuple[RelationInstance, ...]:
        if name not in self.splits:
            raise ConfigError(f"dataset has no {name!r} split")
        return self.splits[name]

    def _content_bytes(self, image_id: str) -> bytes:
        if image_id not in self._image_cache:
            path = self.images_dir / image_id
            if not path.is_file():
                raise ConfigError(f"content image not found: {path}")
            self._image_cache[image_id] = path.read_bytes()
        return self._image_cache[image_id]

    def prepare(
        self, instances: Sequence[RelationInstance], config: TrainConfig, seed: int
    ) -> list[PreparedInstance]:
        selection = config.selection()
        prepared = []
        if config.scale == "toy":
            image_encoder = ToyImageEncoder(self.fusion.d_vis, seed=0)
            for inst in instances:
                prepared.append(
                    prepare_instance_toy(
                        inst,
                        self.store.bundle(inst.id),
                        label_id=self.labels.index(inst.relation),
                        selection=selection,
                        image_encoder=image_encoder,
                        content_image=self._content_bytes(inst.image_id),
                        stored_image=self.store.image_bytes,
                    )
                )
            return prepared
        if self.text_features is None or self.image_features is None:
            raise ConfigError("paper scale requires text and image feature files")
        for inst in instances:
            digest = hashlib.sha256(self._content_bytes(inst.image_id)).hexdigest()
            prepared.append(
                prepare_instance_files(
                    inst,
                    self.store.bundle(inst.id),
                    label_id=self.labels.index(inst.relation),
                    selection=selection,
                    text_ff=self.text_features,
                    image_ff=self.image_features,
                    content_digest=digest,
                    d_text=self.fusion.d_text,
                    d_vis=self.fusion.d_vis,
                )
            )
        return prepared

    def model_config(self, config: TrainConfig) -> FusionConfig:
        return replace(
            self.fusion,
            no_selection=config.no_selection,
            no_consistency=config.no_consistency,
        )

    def run(
        self, config: TrainConfig, seed: int, run_dir: str | Path, eval_split: str = "test"
    ) -> tuple[TrainResult, EvalReport]:
        """Train one model and evaluate its best checkpoint on ``eval_split``."""

        cfg = replace(config, seed=seed)
        model = FusionModel(self.model_config(cfg), seed=seed)
        train_prep = self.prepare(self.split("train"), cfg, seed)
        dev_prep = self.prepare(self.split("dev"), cfg, seed) if "dev" in self.splits else []
        result = train(model, train_prep, dev_prep, self.labels.labels, cfg, run_dir)
        best = FusionModel.load(result.checkpoint_path)
        eval_prep = self.prepare(self.split(eval_split), cfg, seed)
        report = evaluate(best, eval_prep, self.labels.labels)
        return result, report


def run_ablation_suite(
    experiment: Experiment,
    base: TrainConfig,
    seeds: Sequence[int],
    out_dir: str | Path,
    eval_split: str = "test",
    progress: Callable[[str, int], None] | None = None,
) -> tuple[list[tuple[str, SeedSummary]], str]:
    """Full model plus the five ablations, each under the multi-seed protocol.

    Returns (rows, aligned text table); per-variant JSON reports land under
    ``out_dir/<variant-slug>/seed<k>/``.
    """

    out_dir = Path(out_dir)
    rows: list[tuple[str, SeedSummary]] = []
    for name, overrides in ABLATION_VARIANTS:
        slug = name.lower().replace("w/o ", "no-").replace(" ", "-")
        reports = []
        for seed in seeds:
            if progress is not None:
                progress(name, seed)
            run_dir = out_dir / slug / f"seed{seed}"
            variant = replace(base, **overrides)
            _, report = experiment.run(variant, seed, run_dir, eval_split)
            (run_dir / "eval.json").write_text(
                json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n",
                encoding="utf-8",
            )
            reports.append(report)
        rows.append((name, SeedSummary.from_reports(reports)))
    table = format_summary_table(rows)
    (out_dir / "ablation_table.txt").write_text(table, encoding="utf-8")
    (out_dir / "ablation.json").write_text(
        json.dumps({name: s.to_dict() for name, s in rows}, indent=1, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return rows, table


def sweep_evidence(
    experiment: Experiment,
    base: TrainConfig,
    seeds: Sequence[int],
    out_dir: str | Path,
    counts: Sequence[int] = tuple(range(1, 21)),
    modalities: Sequence[str] = ("text", "image"),
    eval_split: str = "test",
    progress: Callable[[str, int, int], None] | None = None,
) -> dict[str, Path]:
    """F1 as a function of evidence count, one CSV per swept modality.

    The store must have been built with k >= max(counts); count 0 is allowed
    and equals the matching evidence ablation.
    """

    counts = list(counts)
    if any(c < 0 for c in counts):
        raise ConfigError("evidence counts must be >= 0")
    if counts and experiment.store.k < max(counts):
        raise ConfigError(
            f"store was built with k={experiment.store.k}, sweep needs k >= {max(counts)}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for modality in modalities:
        if modality not in ("text", "image"):
            raise ConfigError(f"unknown sweep modality {modality!r}")
        lines = ["count,mean_f1,std_f1"]
        for count in counts:
            if modality == "text":
                variant = replace(base, k_text=count)
            else:
                variant = replace(base, k_image=count)
            f1s = []
            for seed in seeds:
                if progress is not None:
                    progress(modality, count, seed)
                run_dir = out_dir / modality / f"count{count}" / f"seed{seed}"
                _, report = experiment.run(variant, seed, run_dir, eval_split)
                f1s.append(report.macro_f1)
            arr = np.asarray(f1s)
            lines.append(f"{count},{arr.mean():.6f},{arr.std():.6f}")
        path = out_dir / f"sweep_{modality}.csv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written[modality] = path
    return written
