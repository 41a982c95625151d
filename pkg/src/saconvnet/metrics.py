"""Classifier evaluation: confusion counts, derived rates, AUC and run aggregation.

Class 1 (extreme day) is the positive class throughout. Ratios whose
denominator is zero are reported as NaN *and* named in an ``undefined``
set, so a degenerate run is never silently averaged in.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import InputError

TABLE_COLUMNS = ("Loss", "Accuracy", "Precision", "Recall", "AUC", "F1_Score")
DEFAULT_THRESHOLDS = (0.91, 0.92, 0.93, 0.94, 0.95)
DECISION_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def as_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}

    def render(self) -> str:
        """2x2 text table, rows = actual class, columns = predicted class."""
        w = max(len(str(v)) for v in (self.tp, self.tn, self.fp, self.fn, "pred 0"))
        return "\n".join(
            [
                f"{'':>10} {'pred 0':>{w}} {'pred 1':>{w}}",
                f"{'actual 0':>10} {self.tn:>{w}} {self.fp:>{w}}",
                f"{'actual 1':>10} {self.fn:>{w}} {self.tp:>{w}}",
            ]
        )


def _binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise InputError(f"{name} must be one-dimensional")
    if not np.isin(arr, (0, 1)).all():
        raise InputError(f"{name} must contain only 0 and 1")
    return arr.astype(np.int64)


def confusion(preds, labels) -> ConfusionMatrix:
    p = _binary(preds, "preds")
    y = _binary(labels, "labels")
    if p.size != y.size:
        raise InputError(f"preds ({p.size}) and labels ({y.size}) differ in length")
    if p.size == 0:
        raise InputError("confusion of empty inputs")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (y == 1))),
        tn=int(np.sum((p == 0) & (y == 0))),
        fp=int(np.sum((p == 1) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
    )


@dataclass(frozen=True)
class DerivedMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: frozenset = frozenset()


def _ratio(num: float, den: float) -> float:
    return num / den if den else math.nan


def derive_metrics(cm: ConfusionMatrix) -> DerivedMetrics:
    if cm.total <= 0:
        raise InputError("confusion matrix is empty")
    accuracy = (cm.tp + cm.tn) / cm.total
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    if math.isnan(precision) or math.isnan(recall):
        f1 = math.nan
    else:
        f1 = _ratio(2.0 * precision * recall, precision + recall)
    undefined = frozenset(k for k, v in (("precision", precision), ("recall", recall), ("f1", f1)) if math.isnan(v))
    return DerivedMetrics(accuracy, precision, recall, f1, undefined)


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise InputError(f"scores {s.shape} and labels {y.shape} differ in shape")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise InputError("roc_auc needs both classes present")
    return kernels.pair_wins(np.ascontiguousarray(pos), np.ascontiguousarray(neg)) / (pos.size * neg.size)


@dataclass
class MetricsReport:
    loss: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    confusion: ConfusionMatrix
    threshold_percentile: float | None = None
    undefined: frozenset = frozenset()

    def table_row(self) -> dict[str, float]:
        return dict(zip(TABLE_COLUMNS, (self.loss, self.accuracy, self.precision, self.recall, self.auc, self.f1)))

    def to_dict(self) -> dict:
        return {
            "threshold_percentile": self.threshold_percentile,
            "metrics": {k: _json_float(v) for k, v in self.table_row().items()},
            "confusion": self.confusion.as_dict(),
            "undefined": sorted(self.undefined),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        w.writerow([_fmt(v) for v in self.table_row().values()])
        return buf.getvalue()


def _json_float(v: float):
    return None if v is None or math.isnan(v) else v


def _fmt(v: float) -> str:
    return "" if v is None or math.isnan(v) else repr(float(v))


def evaluate_probs(probs, labels, threshold_percentile: float | None = None) -> MetricsReport:
    """Metrics from class probabilities ``[N, 2]``.

    Predictions use a 0.5 cut on the class-1 probability; AUC uses the raw
    class-1 probability; loss is the unweighted mean cross-entropy.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = _binary(labels, "labels")
    p1 = probs[:, 1]
    preds = (p1 > DECISION_THRESHOLD).astype(np.int64)
    cm = confusion(preds, y)
    d = derive_metrics(cm)
    picked = np.clip(probs[np.arange(y.size), y], 1e-12, 1.0)
    loss = float(-np.mean(np.log(picked)))
    undefined = set(d.undefined)
    try:
        auc = roc_auc(p1, y)
    except InputError:
        auc = math.nan
        undefined.add("auc")
    return MetricsReport(loss, d.accuracy, d.precision, d.recall, d.f1, auc, cm, threshold_percentile, frozenset(undefined))


# ---------------------------------------------------------------------------
# repeated runs
# ---------------------------------------------------------------------------


@dataclass
class EnsembleReport:
    mean: dict[str, float]
    sem: dict[str, float]
    n: int
    n_defined: dict[str, int]
    threshold_percentile: float | None = None
    single_run: bool = False

    def to_dict(self) -> dict:
        return {
            "threshold_percentile": self.threshold_percentile,
            "n": self.n,
            "single_run": self.single_run,
            "mean": {k: _json_float(self.mean[k]) for k in TABLE_COLUMNS},
            "sem": {k: _json_float(self.sem[k]) for k in TABLE_COLUMNS},
            "n_defined": {k: self.n_defined[k] for k in TABLE_COLUMNS},
        }

    def csv_row(self) -> list[str]:
        row = []
        for k in TABLE_COLUMNS:
            row += [_fmt(self.mean[k]), _fmt(self.sem[k])]
        return row


def ensemble_csv_header() -> list[str]:
    cols = []
    for k in TABLE_COLUMNS:
        cols += [f"{k}_mean", f"{k}_sem"]
    return cols


def mean_sem(values: Sequence[float]) -> tuple[float, float, int]:
    """Mean and standard error (sample sd / sqrt(n)) over the defined values."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan, 0
    if v.size == 1:
        return float(v[0]), 0.0, 1
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)), int(v.size)


def aggregate(runs: Sequence[MetricsReport]) -> EnsembleReport:
    if not runs:
        raise InputError("aggregate needs at least one run")
    thresholds = {r.threshold_percentile for r in runs}
    if len(thresholds) > 1:
        raise InputError(f"runs mix threshold percentiles {sorted(thresholds, key=str)}")
    mean, sem, n_def = {}, {}, {}
    for col in TABLE_COLUMNS:
        mean[col], sem[col], n_def[col] = mean_sem([r.table_row()[col] for r in runs])
    return EnsembleReport(mean, sem, len(runs), n_def, runs[0].threshold_percentile, single_run=len(runs) == 1)


@dataclass
class SweepResult:
    reports: dict[float, EnsembleReport]
    positives: dict[float, int]
    runs: dict[float, list[MetricsReport]] = field(default_factory=dict)
    trainings: int = 0

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold_percentile", "positives", "n"] + ensemble_csv_header())
        for m, rep in self.reports.items():
            w.writerow([repr(m), self.positives[m], rep.n] + rep.csv_row())
        return buf.getvalue()


def run_seeds(master_seed: int, runs: int) -> list[int]:
    return [master_seed + i for i in range(runs)]


def percentile_sweep(
    build: Callable[[float], object],
    fit_and_score: Callable[[object, int], MetricsReport],
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    runs: int = 5,
    master_seed: int = 0,
) -> SweepResult:
    """Relabel at each percentile, train ``runs`` models each, aggregate.

    ``build(m)`` returns a dataset labelled at percentile ``m`` (anything
    with a ``y`` label array); ``fit_and_score(dataset, seed)`` trains one
    model and returns its test :class:`MetricsReport`. Run ``i`` uses seed
    ``master_seed + i`` at every threshold.
    """
    if runs < 1:
        raise InputError(f"runs must be >= 1, got {runs}")
    result = SweepResult({}, {})
    for m in thresholds:
        ds = build(m)
        result.positives[m] = int(np.sum(ds.y))
        reports = []
        for seed in run_seeds(master_seed, runs):
            rep = fit_and_score(ds, seed)
            rep.threshold_percentile = m
            reports.append(rep)
            result.trainings += 1
        result.runs[m] = reports
        result.reports[m] = aggregate(reports)
    return result
