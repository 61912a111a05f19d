"""Frame-level evaluation: confusion matrices and accuracy / precision / recall / F1.

Unsafe is the positive class. Metrics are exact fractions; a metric whose
denominator is zero is ``None`` (undefined) rather than 0. Scenario scores
pool the confusion matrices of all runs before computing metrics
(micro-averaging) unless ``macro=True``.
"""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import EmptyMatrix, KeyMismatch

SAFE, UNSAFE = "Safe", "Unsafe"
METRICS = ("accuracy", "precision", "recall", "f1")

FrameId = tuple  # (scenario, run, frame_index)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.tp, self.tn, self.fp, self.fn)


@dataclass(frozen=True)
class MetricSet:
    accuracy: Fraction | None
    precision: Fraction | None
    recall: Fraction | None
    f1: Fraction | None

    def as_dict(self) -> dict[str, Fraction | None]:
        return {m: getattr(self, m) for m in METRICS}

    def percent(self, digits: int = 1) -> dict[str, float | None]:
        return {m: None if v is None else round(float(v) * 100, digits) for m, v in self.as_dict().items()}


def _norm_label(label: str) -> str:
    value = str(label).strip().capitalize()
    if value not in (SAFE, UNSAFE):
        raise ValueError(f"label must be Safe or Unsafe, got {label!r}")
    return value


def tally(predictions: Mapping[Any, str], truth: Mapping[Any, str]) -> ConfusionMatrix:
    missing_pred = sorted(set(truth) - set(predictions), key=str)
    missing_truth = sorted(set(predictions) - set(truth), key=str)
    if missing_pred or missing_truth:
        raise KeyMismatch(missing_pred, missing_truth)
    tp = tn = fp = fn = 0
    for key, actual in truth.items():
        actual = _norm_label(actual)
        predicted = _norm_label(predictions[key])
        if predicted == UNSAFE:
            if actual == UNSAFE:
                tp += 1
            else:
                fp += 1
        elif actual == SAFE:
            tn += 1
        else:
            fn += 1
    return ConfusionMatrix(tp, tn, fp, fn)


def compute_metrics(cm: ConfusionMatrix) -> MetricSet:
    if cm.total <= 0:
        raise EmptyMatrix("confusion matrix is empty")
    accuracy = Fraction(cm.tp + cm.tn, cm.total)
    precision = Fraction(cm.tp, cm.tp + cm.fp) if cm.tp + cm.fp else None
    recall = Fraction(cm.tp, cm.tp + cm.fn) if cm.tp + cm.fn else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricSet(accuracy, precision, recall, f1)


@dataclass(frozen=True)
class RunResult:
    scenario: str
    run: str
    system: str
    matrix: ConfusionMatrix

    @property
    def metrics(self) -> MetricSet:
        return compute_metrics(self.matrix)


@dataclass(frozen=True)
class TableRow:
    scenario: str
    system: str
    run: str  # "all" for pooled rows
    matrix: ConfusionMatrix
    metrics: MetricSet

    def as_json(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "system": self.system,
            "run": self.run,
            "tp": self.matrix.tp,
            "tn": self.matrix.tn,
            "fp": self.matrix.fp,
            "fn": self.matrix.fn,
            **{m: None if v is None else float(v) for m, v in self.metrics.as_dict().items()},
        }


def _macro(metric_sets: Sequence[MetricSet]) -> MetricSet:
    values = {}
    for m in METRICS:
        defined = [getattr(s, m) for s in metric_sets if getattr(s, m) is not None]
        values[m] = sum(defined, Fraction(0)) / len(defined) if defined else None
    return MetricSet(**values)


def aggregate(results: Iterable[RunResult], macro: bool = False) -> list[TableRow]:
    """One pooled row per (scenario, system), followed by its per-run rows."""
    groups: dict[tuple[str, str], list[RunResult]] = defaultdict(list)
    for r in results:
        groups[(r.scenario, r.system)].append(r)
    rows = []
    for (scenario, system) in sorted(groups):
        members = sorted(groups[(scenario, system)], key=lambda r: str(r.run))
        pooled = ConfusionMatrix()
        for r in members:
            pooled = pooled + r.matrix
        metrics = _macro([r.metrics for r in members]) if macro else compute_metrics(pooled)
        rows.append(TableRow(scenario, system, "all", pooled, metrics))
        rows.extend(TableRow(scenario, system, str(r.run), r.matrix, r.metrics) for r in members)
    return rows


def _pct(v: Fraction | None) -> str:
    return "undef" if v is None else f"{float(v) * 100:.1f}"


def format_table(rows: Sequence[TableRow]) -> str:
    header = ["scenario", "system", "run", "TP", "TN", "FP", "FN", "accuracy", "precision", "recall", "F1"]
    body = [
        [
            r.scenario, r.system, r.run,
            str(r.matrix.tp), str(r.matrix.tn), str(r.matrix.fp), str(r.matrix.fn),
            *(_pct(getattr(r.metrics, m)) for m in METRICS),
        ]
        for r in rows
    ]
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    lines = []
    for row in [header, *body]:
        cells = [c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def table_json(rows: Sequence[TableRow], macro: bool = False) -> dict[str, Any]:
    return {"averaging": "macro" if macro else "micro", "rows": [r.as_json() for r in rows]}


# file loading

def _read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_truth(path: str | os.PathLike) -> dict[FrameId, str]:
    truth: dict[FrameId, str] = {}
    for rec in _read_jsonl(path):
        key = (str(rec["scenario"]), str(rec["run"]), int(rec["frame_index"]))
        if key in truth:
            raise ValueError(f"{path}: duplicate truth label for {key}")
        truth[key] = _norm_label(rec["label"])
    return truth


def load_predictions(
    path: str | os.PathLike,
    default_scenario: str | None = None,
    default_run: str | None = None,
    default_system: str | None = None,
) -> dict[str, dict[FrameId, str]]:
    """Predictions grouped by system.

    Accepts bare ``{scenario, run, frame_index, label[, system]}`` records or a
    run's ``assessments.jsonl``, whose records lack scenario and run; those are
    filled from the defaults.
    """
    system_default = default_system or Path(path).stem
    out: dict[str, dict[FrameId, str]] = defaultdict(dict)
    for rec in _read_jsonl(path):
        scenario = rec.get("scenario", default_scenario)
        run = rec.get("run", default_run)
        if scenario is None or run is None:
            raise ValueError(f"{path}: record for frame {rec.get('frame_index')} has no scenario/run")
        system = rec.get("system", system_default)
        key = (str(scenario), str(run), int(rec["frame_index"]))
        if key in out[system]:
            raise ValueError(f"{path}: duplicate prediction for {key} ({system})")
        out[system][key] = _norm_label(rec["label"])
    return dict(out)


def evaluate(truth: Mapping[FrameId, str], predictions: Mapping[str, Mapping[FrameId, str]]) -> list[RunResult]:
    """Tally each system's predictions per (scenario, run) against the truth."""
    by_run: dict[tuple[str, str], dict[FrameId, str]] = defaultdict(dict)
    for key, label in truth.items():
        by_run[key[:2]][key] = label
    results = []
    for system, preds in sorted(predictions.items()):
        extra = sorted((k for k in preds if k not in truth), key=str)
        if extra:
            raise KeyMismatch([], extra)
        for (scenario, run), run_truth in sorted(by_run.items()):
            run_preds = {k: v for k, v in preds.items() if k[:2] == (scenario, run)}
            results.append(RunResult(scenario, run, system, tally(run_preds, run_truth)))
    return results
