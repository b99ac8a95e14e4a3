"""Detection metrics with faulty as the positive class."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Label


def to_binary(labels) -> np.ndarray:
    """Map labels (Label, "Faulty"/"Normal", "F"/"N", bool or 0/1) to 1 = faulty."""
    out = []
    for lab in labels:
        if isinstance(lab, Label):
            out.append(lab is Label.FAULTY)
        elif isinstance(lab, str):
            key = lab.strip().lower()
            if key in ("faulty", "f"):
                out.append(True)
            elif key in ("normal", "n"):
                out.append(False)
            else:
                raise ValueError(f"unknown label {lab!r}")
        else:
            if lab not in (0, 1):
                raise ValueError(f"unknown label {lab!r}")
            out.append(bool(lab))
    return np.array(out, dtype=bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(scores: Sequence[float], labels, threshold: float = 0.5) -> ConfusionCounts:
    """Predict faulty iff score >= threshold and count outcomes."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = to_binary(labels)
    if scores.shape != truth.shape:
        raise ValueError(f"{scores.size} scores but {truth.size} labels")
    pred = scores >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & truth)),
        fp=int(np.sum(pred & ~truth)),
        tn=int(np.sum(~pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
    )


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    undefined: tuple[str, ...] = ()


def metrics(counts: ConfusionCounts) -> Metrics:
    """Precision, recall, F1 and accuracy.

    A metric with a zero denominator is reported as 0 and its name is listed
    in ``undefined``.
    """
    if counts.total == 0:
        raise ValueError("no evaluated items")
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    precision = ratio(counts.tp, counts.tp + counts.fp, "precision")
    recall = ratio(counts.tp, counts.tp + counts.fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    accuracy = (counts.tp + counts.tn) / counts.total
    return Metrics(precision, recall, f1, accuracy, tuple(undefined))


@dataclass(frozen=True)
class RocCurve:
    points: list[tuple[float, float]]
    thresholds: list[float]
    auc: float = field(default=0.0)


def roc_auc(scores: Sequence[float], labels) -> RocCurve:
    """ROC over every distinct score threshold, AUC by the trapezoidal rule.

    Points run from (0, 0) at threshold +inf to (1, 1) at the lowest score.
    Tied scores move the curve diagonally, which counts ties as one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = to_binary(labels)
    if scores.shape != truth.shape:
        raise ValueError(f"{scores.size} scores but {truth.size} labels")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one faulty and one normal item")
    order = np.argsort(-scores, kind="mergesort")
    s_sorted, t_sorted = scores[order], truth[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tps = np.cumsum(t_sorted)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    thresholds = [math.inf] + [float(s) for s in s_sorted[ends]]
    return RocCurve([(float(x), float(y)) for x, y in zip(fpr, tpr)], thresholds, auc)


def _fmt(x: float) -> str:
    return repr(float(x))


METRICS_HEADER = ["model", "backbone", "classifier", "seed", "precision", "recall", "f1_score", "accuracy", "auc",
                  "tp", "fp", "tn", "fn"]


def metrics_row(model: str, backbone: str, head: str, seed: int, counts: ConfusionCounts, m: Metrics,
                auc: float) -> dict:
    return {
        "model": model, "backbone": backbone, "classifier": head, "seed": seed,
        "precision": _fmt(m.precision), "recall": _fmt(m.recall), "f1_score": _fmt(m.f1),
        "accuracy": _fmt(m.accuracy), "auc": _fmt(auc),
        "tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn,
    }


def write_metrics_csv(path: str | Path, rows: Sequence[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_roc_csv(path: str | Path, curve: RocCurve):
    """Columns threshold,fpr,tpr,log10_fpr; log10_fpr is blank where fpr = 0."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "fpr", "tpr", "log10_fpr"])
        for thr, (fpr, tpr) in zip(curve.thresholds, curve.points):
            writer.writerow([_fmt(thr), _fmt(fpr), _fmt(tpr), _fmt(math.log10(fpr)) if fpr > 0 else ""])
