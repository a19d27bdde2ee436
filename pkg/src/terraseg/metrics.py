"""Confusion counts, threshold scores, AUC and the per-class error table."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import CLASS_NAMES, Raster, ValidationError

THRESHOLD = 0.5


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_arrays(probs, labels, threshold: float = THRESHOLD) -> Counts:
    """Counts for flat arrays; probability >= threshold is positive."""
    pred = np.asarray(probs) >= threshold
    lab = np.asarray(labels) > 0.5
    return Counts(int((pred & lab).sum()), int((pred & ~lab).sum()),
                  int((~pred & ~lab).sum()), int((~pred & lab).sum()))


def _aligned_valid(pred: Raster, labels: Raster, pred_ch="prob", label_ch="label"):
    if not pred.aligned_with(labels):
        raise ValidationError("prediction and label rasters are not aligned")
    return pred.valid(pred_ch) & labels.valid(label_ch)


def confusion(pred: Raster, labels: Raster, threshold: float = THRESHOLD) -> Counts:
    ok = _aligned_valid(pred, labels)
    return confusion_arrays(pred.channels["prob"][ok], labels.channels["label"][ok], threshold)


def scores(c: Counts) -> dict:
    """precision, recall, f1, accuracy, mcc; a 0 denominator yields 0 and a flag."""
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    precision = ratio(c.tp, c.tp + c.fp, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1")
    accuracy = ratio(c.tp + c.tn, c.total, "accuracy")
    den = math.sqrt(float(c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn))
    mcc = ratio(c.tp * c.tn - c.fp * c.fn, den, "mcc")
    return {"precision": precision, "recall": recall, "f1": f1, "accuracy": accuracy, "mcc": mcc,
            "zero_denominator": flags}


def auc(score_values, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    s = np.asarray(score_values, dtype=np.float64)
    y = np.asarray(labels) > 0.5
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    # average rank over runs of ties
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ClassRow:
    name: str
    area: float
    accuracy: float
    error_part: float


def per_class_report(pred: Raster, labels: Raster, classes: Raster, threshold: float = THRESHOLD,
                     class_channel: str = "class_tag") -> tuple[list[ClassRow], bool]:
    """Rows for rest, road, sidewalk, terrace, unpaved-road.

    Returns ``(rows, defined)``; when there are no errors at all the error
    parts are reported as 0 and ``defined`` is False.
    """
    ok = _aligned_valid(pred, labels)
    if not classes.aligned_with(pred):
        raise ValidationError("class raster is not aligned")
    ok &= classes.valid(class_channel)
    code = classes.channels[class_channel][ok].astype(np.int64)
    wrong = (pred.channels["prob"][ok] >= threshold) != (labels.channels["label"][ok] > 0.5)
    n, n_err = int(ok.sum()), int(wrong.sum())
    rows = []
    for c in (1, 2, 3, 4, 0):
        sel = code == c
        k = int(sel.sum())
        e = int(wrong[sel].sum())
        rows.append(ClassRow(CLASS_NAMES[c], k / n if n else 0.0, 1 - e / k if k else 0.0,
                             e / n_err if n_err else 0.0))
    return rows, n_err > 0


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float
    auc: float | None
    zero_denominator: list = field(default_factory=list)
    per_class: list = field(default_factory=list)
    error_parts_defined: bool = True

    def to_dict(self) -> dict:
        """Flat mapping; per-class values appear as ``<class>.<field>``."""
        d = asdict(self)
        rows = d.pop("per_class")
        for row in rows:
            for key in ("area", "accuracy", "error_part"):
                d[f"{row['name']}.{key}"] = row[key]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(pred: Raster, labels: Raster, classes: Raster | None = None,
             threshold: float = THRESHOLD) -> EvalReport:
    ok = _aligned_valid(pred, labels)
    p = pred.channels["prob"][ok]
    y = labels.channels["label"][ok]
    c = confusion_arrays(p, y, threshold)
    s = scores(c)
    try:
        a = auc(p, y)
    except ValueError:
        a = None
    rows, defined = ([], True) if classes is None else per_class_report(pred, labels, classes, threshold)
    return EvalReport(c.tp, c.fp, c.tn, c.fn, s["accuracy"], s["precision"], s["recall"], s["f1"], s["mcc"],
                      a, s["zero_denominator"], [asdict(r) for r in rows], defined)
