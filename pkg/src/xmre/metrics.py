"""Classification metrics: confusion matrix, per-class P/R/F1, macro/micro.

Conventions (both macro variants are reported): zero-division in precision
or recall is defined as 0, and classes with zero support and zero
predictions are excluded from the headline macro averages; ``macro_*_all``
averages over every vocabulary class regardless.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ClassMetrics:
    label: str
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int


@dataclass
class EvalReport:
    accuracy: float
    per_class: tuple[ClassMetrics, ...]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_precision_all: float
    macro_recall_all: float
    macro_f1_all: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    confusion: np.ndarray
    n_instances: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
            },
            "macro_all_labels": {
                "precision": self.macro_precision_all,
                "recall": self.macro_recall_all,
                "f1": self.macro_f1_all,
            },
            "micro": {
                "precision": self.micro_precision,
                "recall": self.micro_recall,
                "f1": self.micro_f1,
            },
            "per_class": [
                {
                    "label": c.label,
                    "precision": c.precision,
                    "recall": c.recall,
                    "f1": c.f1,
                    "support": c.support,
                    "predicted": c.predicted,
                }
                for c in self.per_class
            ],
            "confusion": self.confusion.tolist(),
            "n_instances": self.n_instances,
        }


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def compute_report(
    gold: Sequence[int], pred: Sequence[int], labels: Sequence[str]
) -> EvalReport:
    """Exact counting metrics over integer class ids."""

    gold = np.asarray(gold, dtype=np.intp)
    pred = np.asarray(pred, dtype=np.intp)
    if gold.shape != pred.shape:
        raise ValueError(f"gold/pred length mismatch: {gold.shape} vs {pred.shape}")
    c = len(labels)
    n = len(gold)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (gold, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)

    per_class = []
    for i, label in enumerate(labels):
        p = _safe_div(tp[i], predicted[i])
        r = _safe_div(tp[i], support[i])
        f1 = _safe_div(2 * p * r, p + r)
        per_class.append(
            ClassMetrics(label, p, r, f1, int(support[i]), int(predicted[i]))
        )

    active = [c for c in per_class if c.support > 0 or c.predicted > 0]
    macro_p = float(np.mean([c.precision for c in active])) if active else 0.0
    macro_r = float(np.mean([c.recall for c in active])) if active else 0.0
    macro_f1 = float(np.mean([c.f1 for c in active])) if active else 0.0
    macro_p_all = float(np.mean([c.precision for c in per_class]))
    macro_r_all = float(np.mean([c.recall for c in per_class]))
    macro_f1_all = float(np.mean([c.f1 for c in per_class]))

    # Single-label classification: micro P = micro R = micro F1 = accuracy.
    micro_tp = float(tp.sum())
    micro_p = _safe_div(micro_tp, float(predicted.sum()))
    micro_r = _safe_div(micro_tp, float(support.sum()))
    micro_f1 = _safe_div(2 * micro_p * micro_r, micro_p + micro_r)

    return EvalReport(
        accuracy=_safe_div(micro_tp, n),
        per_class=tuple(per_class),
        macro_precision=macro_p,
        macro_recall=macro_r,
        macro_f1=macro_f1,
        macro_precision_all=macro_p_all,
        macro_recall_all=macro_r_all,
        macro_f1_all=macro_f1_all,
        micro_precision=micro_p,
        micro_recall=micro_r,
        micro_f1=micro_f1,
        confusion=confusion,
        n_instances=n,
    )


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: float
    values: tuple[float, ...]

    def __str__(self) -> str:
        return f"{100 * self.mean:.2f}±{100 * self.std:.2f}"


def mean_std(values: Sequence[float]) -> MeanStd:
    """Population mean and standard deviation over per-seed values."""

    arr = np.asarray(values, dtype=np.float64)
    return MeanStd(float(arr.mean()), float(arr.std()), tuple(float(v) for v in arr))


@dataclass
class SeedSummary:
    """Headline metrics aggregated across seeds: mean±std per column."""

    accuracy: MeanStd
    precision: MeanStd
    recall: MeanStd
    f1: MeanStd
    n_seeds: int

    @classmethod
    def from_reports(cls, reports: Sequence[EvalReport]) -> "SeedSummary":
        return cls(
            accuracy=mean_std([r.accuracy for r in reports]),
            precision=mean_std([r.macro_precision for r in reports]),
            recall=mean_std([r.macro_recall for r in reports]),
            f1=mean_std([r.macro_f1 for r in reports]),
            n_seeds=len(reports),
        )

    def to_dict(self) -> dict:
        out = {}
        for name in ("accuracy", "precision", "recall", "f1"):
            m: MeanStd = getattr(self, name)
            out[name] = {"mean": m.mean, "std": m.std, "values": list(m.values)}
        out["n_seeds"] = self.n_seeds
        return out


def format_summary_table(rows: Sequence[tuple[str, SeedSummary]]) -> str:
    """Aligned text table with Accuracy/Precision/Recall/F1, mean±std."""

    header = ("Method", "Accuracy", "Precision", "Recall", "F1")
    cells = [header]
    for name, summary in rows:
        cells.append(
            (
                name,
                str(summary.accuracy),
                str(summary.precision),
                str(summary.recall),
                str(summary.f1),
            )
        )
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for idx, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
