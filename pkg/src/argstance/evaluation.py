"""Validity metrics, stance collapse, error breakdowns, and run aggregation.

Precision, recall and F1 use the conservative zero convention: a metric
whose denominator is zero is reported as 0 and flagged, which keeps tiny
few-shot test slices comparable. Macro-F1 averages over every class of the
label universe, including zero-support classes.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np

from .corpus import LABEL_ORDER, Label
from .model import ParameterReport

COLLAPSED_ORDER: tuple[str, ...] = ("for", "against", "no_stance")

_COLLAPSE = {
    Label.ARGUMENT_FOR: "for",
    Label.CLAIM_FOR: "for",
    Label.ARGUMENT_AGAINST: "against",
    Label.CLAIM_AGAINST: "against",
    Label.NO_STANCE: "no_stance",
}


@dataclass(frozen=True, eq=False)
class Confusion:
    """Gold x predicted count grid over an explicit label universe."""

    labels: tuple
    counts: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.labels)
        if self.counts.shape != (n, n):
            raise ValueError(f"expected a {n}x{n} grid, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def index(self, label: Hashable) -> int:
        return self.labels.index(label)


def confusion(
    gold: Sequence[Hashable],
    pred: Sequence[Hashable],
    labels: Optional[Sequence[Hashable]] = None,
) -> Confusion:
    """Count grid of gold vs predicted assignments.

    Without an explicit universe, the five sentence codes are used when all
    values are Labels; otherwise the sorted distinct values observed.
    """
    if len(gold) != len(pred):
        raise ValueError(f"gold has {len(gold)} items, pred has {len(pred)}")
    if not gold:
        raise ValueError("cannot build a confusion grid from zero units")
    if labels is None:
        if all(isinstance(v, Label) for v in list(gold) + list(pred)):
            labels = LABEL_ORDER
        else:
            labels = tuple(sorted(set(gold) | set(pred), key=str))
    labels = tuple(labels)
    index = {label: i for i, label in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for g, p in zip(gold, pred):
        if g not in index or p not in index:
            raise ValueError(f"value outside the label universe: {g!r} / {p!r}")
        counts[index[g], index[p]] += 1
    return Confusion(labels=labels, counts=counts)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    undefined_precision: bool = False  # no predictions for the class, value fixed at 0
    undefined_recall: bool = False  # zero support, value fixed at 0


@dataclass(frozen=True, eq=False)
class MetricsTable:
    """Per-class precision/recall/F1 plus accuracy and macro-F1."""

    labels: tuple
    per_class: Mapping
    accuracy: float
    macro_f1: float
    total: int


def metrics(c: Confusion) -> MetricsTable:
    """Per-class and aggregate validity metrics from a confusion grid."""
    if c.total == 0:
        raise ValueError("confusion grid is empty")
    per_class = {}
    f1_values = []
    for i, label in enumerate(c.labels):
        tp = int(c.counts[i, i])
        fp = int(c.counts[:, i].sum()) - tp
        fn = int(c.counts[i, :].sum()) - tp
        undefined_p = tp + fp == 0
        undefined_r = tp + fn == 0
        precision = 0.0 if undefined_p else tp / (tp + fp)
        recall = 0.0 if undefined_r else tp / (tp + fn)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        per_class[label] = ClassMetrics(
            precision=precision,
            recall=recall,
            f1=f1,
            support=tp + fn,
            undefined_precision=undefined_p,
            undefined_recall=undefined_r,
        )
        f1_values.append(f1)
    return MetricsTable(
        labels=c.labels,
        per_class=per_class,
        accuracy=float(np.trace(c.counts)) / c.total,
        macro_f1=sum(f1_values) / len(f1_values),
        total=c.total,
    )


def collapse_stance(label: Label) -> str:
    """Map the five codes onto pure stance: for, against, no_stance."""
    return _COLLAPSE[label]


def collapse_labels(labels: Sequence[Label]) -> list[str]:
    return [collapse_stance(l) for l in labels]


def stance_metrics(gold: Sequence[Label], pred: Sequence[Label]) -> MetricsTable:
    """Three-class metrics computed from collapsed gold and predicted labels."""
    return metrics(
        confusion(collapse_labels(gold), collapse_labels(pred), labels=COLLAPSED_ORDER)
    )


@dataclass(frozen=True)
class ErrorBreakdown:
    """Disjoint bins of the prediction errors; the bins sum to total_errors."""

    concept_only: int  # claim vs argument confused, stance correct
    stance_only: int  # for vs against confused, concept correct
    both_wrong: int
    stance_vs_no_stance: int
    total_errors: int

    def __post_init__(self) -> None:
        bins = (
            self.concept_only + self.stance_only + self.both_wrong
            + self.stance_vs_no_stance
        )
        if bins != self.total_errors:
            raise ValueError("error bins do not sum to the total error count")


def _concept(label: Label) -> str:
    return "argument" if label in (Label.ARGUMENT_FOR, Label.ARGUMENT_AGAINST) else "claim"


def error_breakdown(gold: Sequence[Label], pred: Sequence[Label]) -> ErrorBreakdown:
    """Tally errors into concept-only, stance-only, both-wrong, and no-stance bins."""
    if len(gold) != len(pred):
        raise ValueError(f"gold has {len(gold)} items, pred has {len(pred)}")
    concept_only = stance_only = both_wrong = vs_no_stance = 0
    errors = 0
    for g, p in zip(gold, pred):
        if g is p:
            continue
        errors += 1
        if (g is Label.NO_STANCE) or (p is Label.NO_STANCE):
            vs_no_stance += 1
        else:
            concept_differs = _concept(g) != _concept(p)
            stance_differs = collapse_stance(g) != collapse_stance(p)
            if concept_differs and not stance_differs:
                concept_only += 1
            elif stance_differs and not concept_differs:
                stance_only += 1
            else:
                both_wrong += 1
    return ErrorBreakdown(
        concept_only=concept_only,
        stance_only=stance_only,
        both_wrong=both_wrong,
        stance_vs_no_stance=vs_no_stance,
        total_errors=errors,
    )


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float


@dataclass(frozen=True, eq=False)
class AggregateTable:
    """Mean and sample standard deviation of metrics across repeated runs."""

    n_runs: int
    accuracy: MetricSummary
    macro_f1: MetricSummary
    per_class: Mapping  # label -> {"precision"|"recall"|"f1" -> MetricSummary}


def _summary(values: Sequence[float]) -> MetricSummary:
    return MetricSummary(mean=statistics.fmean(values), std=statistics.stdev(values))


def aggregate_runs(tables: Sequence[MetricsTable]) -> AggregateTable:
    """Elementwise mean and (n-1) standard deviation over at least two runs."""
    if len(tables) < 2:
        raise ValueError("aggregation requires at least two runs")
    universe = tables[0].labels
    if any(t.labels != universe for t in tables[1:]):
        raise ValueError("runs use different label universes")
    per_class = {}
    for label in universe:
        per_class[label] = {
            metric: _summary([getattr(t.per_class[label], metric) for t in tables])
            for metric in ("precision", "recall", "f1")
        }
    return AggregateTable(
        n_runs=len(tables),
        accuracy=_summary([t.accuracy for t in tables]),
        macro_f1=_summary([t.macro_f1 for t in tables]),
        per_class=per_class,
    )


@dataclass(eq=False)
class RunReport:
    """One training run: conditions, validity metrics, timing, model size."""

    variant: str
    persons: str
    labels_condition: str
    mode: str
    proportion: float
    repetition: int
    seed: int
    metrics: MetricsTable
    confusion: Confusion
    stance: MetricsTable
    train_seconds: float
    parameter_report: Optional[ParameterReport] = None

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant,
            "persons": self.persons,
            "labels_condition": self.labels_condition,
            "mode": self.mode,
            "proportion": self.proportion,
            "repetition": self.repetition,
            "seed": self.seed,
            "train_seconds": self.train_seconds,
            "confusion": {
                "labels": [str(getattr(l, "value", l)) for l in self.confusion.labels],
                "counts": self.confusion.counts.tolist(),
            },
            "parameter_report": None
            if self.parameter_report is None
            else {
                "total": self.parameter_report.total,
                "trainable": self.parameter_report.trainable,
                "by_component": dict(self.parameter_report.by_component),
                "serialized_bytes_fp32": self.parameter_report.serialized_bytes_fp32,
            },
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), indent=2, sort_keys=True), encoding="utf-8"
        )


def load_run_report(path: str | Path) -> RunReport:
    """Rebuild a run report (metrics recomputed from the stored confusion)."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    labels = tuple(Label(v) for v in payload["confusion"]["labels"])
    grid = Confusion(labels=labels, counts=np.array(payload["confusion"]["counts"]))
    table = metrics(grid)
    stance_grid_gold = []
    stance_grid_pred = []
    for i, g in enumerate(labels):
        for j, p in enumerate(labels):
            stance_grid_gold.extend([g] * int(grid.counts[i, j]))
            stance_grid_pred.extend([p] * int(grid.counts[i, j]))
    params = payload.get("parameter_report")
    return RunReport(
        variant=payload["variant"],
        persons=payload["persons"],
        labels_condition=payload["labels_condition"],
        mode=payload["mode"],
        proportion=payload["proportion"],
        repetition=payload["repetition"],
        seed=payload["seed"],
        metrics=table,
        confusion=grid,
        stance=stance_metrics(stance_grid_gold, stance_grid_pred),
        train_seconds=payload["train_seconds"],
        parameter_report=None
        if params is None
        else ParameterReport(
            total=params["total"],
            trainable=params["trainable"],
            by_component=params["by_component"],
            serialized_bytes_fp32=params["serialized_bytes_fp32"],
        ),
    )


_RUN_CSV_HEADER = (
    "variant", "persons", "labels", "proportion", "seed",
    "class", "precision", "recall", "f1", "accuracy", "macro_f1", "support",
)


def write_run_metrics_csv(reports: Sequence[RunReport], path: str | Path) -> None:
    """Per-run, per-class metric rows; one block of five rows per run."""
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(_RUN_CSV_HEADER)
        for report in reports:
            for label in report.metrics.labels:
                cm = report.metrics.per_class[label]
                writer.writerow(
                    [
                        report.variant,
                        report.persons,
                        report.labels_condition,
                        f"{report.proportion:g}",
                        report.seed,
                        getattr(label, "value", str(label)),
                        f"{cm.precision:.6f}",
                        f"{cm.recall:.6f}",
                        f"{cm.f1:.6f}",
                        f"{report.metrics.accuracy:.6f}",
                        f"{report.metrics.macro_f1:.6f}",
                        cm.support,
                    ]
                )


def write_aggregate_csv(reports: Sequence[RunReport], path: str | Path) -> None:
    """Mean += std per condition cell, mirroring the per-class metric layout."""
    groups: dict[tuple, list[RunReport]] = {}
    for report in reports:
        key = (report.variant, report.persons, report.labels_condition, report.proportion)
        groups.setdefault(key, []).append(report)
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ("variant", "persons", "labels", "proportion", "metric", "mean", "std", "n_runs")
        )
        for key in sorted(groups, key=str):
            variant, persons, labels_condition, proportion = key
            tables = [r.metrics for r in groups[key]]

            def rows():
                yield "macro_f1", [t.macro_f1 for t in tables]
                yield "accuracy", [t.accuracy for t in tables]
                for label in tables[0].labels:
                    for metric in ("f1", "precision", "recall"):
                        name = f"{getattr(label, 'value', label)}:{metric}"
                        yield name, [getattr(t.per_class[label], metric) for t in tables]

            for metric_name, values in rows():
                std = f"{statistics.stdev(values):.6f}" if len(values) >= 2 else ""
                writer.writerow(
                    [
                        variant, persons, labels_condition, f"{proportion:g}",
                        metric_name, f"{statistics.fmean(values):.6f}", std, len(values),
                    ]
                )


@dataclass(frozen=True)
class FeasibilityRow:
    variant: str
    trainable_parameters: int
    checkpoint_bytes: Optional[int]
    epochs: int
    total_seconds: float
    seconds_per_epoch: float


def feasibility_report(
    entries: Sequence[tuple[str, "object", ParameterReport, Optional[int]]],
) -> list[FeasibilityRow]:
    """Wall-clock and size accounting per variant.

    Each entry is (variant, train log, parameter report, checkpoint bytes);
    the log only needs ``total_seconds`` and ``epoch_count`` attributes.
    """
    rows = []
    for variant, log, params, checkpoint_bytes in entries:
        epochs = log.epoch_count
        rows.append(
            FeasibilityRow(
                variant=variant,
                trainable_parameters=params.trainable,
                checkpoint_bytes=checkpoint_bytes,
                epochs=epochs,
                total_seconds=log.total_seconds,
                seconds_per_epoch=log.total_seconds / epochs if epochs else math.nan,
            )
        )
    return rows


def write_feasibility_csv(rows: Sequence[FeasibilityRow], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ("variant", "trainable_parameters", "checkpoint_bytes",
             "epochs", "total_seconds", "seconds_per_epoch")
        )
        for row in rows:
            writer.writerow(
                [
                    row.variant,
                    row.trainable_parameters,
                    "" if row.checkpoint_bytes is None else row.checkpoint_bytes,
                    row.epochs,
                    f"{row.total_seconds:.3f}",
                    f"{row.seconds_per_epoch:.3f}",
                ]
            )
