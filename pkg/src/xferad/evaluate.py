"""Anomaly scoring, ROC/AUC (two independent routes), confusion matrices,
derived metrics, and report serialization.

Score orientation: higher = more anomalous (the anomalous-neuron softmax
probability, i.e. 1 - the normal-neuron probability). Undefined metrics
(zero denominators) are reported as None / "undefined", never coerced
to 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError, UndefinedMetricError

SCORE_CONVENTION = "anomalous_neuron_probability"

LABEL_NORMAL = 0
LABEL_ANOMALOUS = 1


@dataclass
class ScoredSet:
    """Per-sample anomaly scores with ground-truth labels (0 normal, 1 anomalous)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ShapeError(
                f"scores {self.scores.shape} and labels {self.labels.shape} must be equal-length 1-d"
            )

    def require_both_labels(self):
        if not ((self.labels == LABEL_ANOMALOUS).any() and (self.labels == LABEL_NORMAL).any()):
            raise UndefinedMetricError("AUC needs at least one sample of each label")


@dataclass
class RocCurve:
    """Threshold sweep points, (fpr, tpr) pairs from (0,0) to (1,1)."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


@dataclass
class ConfusionMatrix:
    """Counts at a fixed threshold; positive class = anomalous."""

    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fn + self.fp + self.tn


@dataclass
class ClassMetrics:
    precision: float | None
    recall: float | None
    f1: float | None


@dataclass
class EvalReport:
    auc: float
    roc: RocCurve
    confusion: ConfusionMatrix
    metrics_anomalous: ClassMetrics
    metrics_normal: ClassMetrics
    threshold: float
    score_convention: str = SCORE_CONVENTION


# ---------------------------------------------------------------------------
# scoring


def anomaly_scores(model, samples, batch_size=64):
    """Softmax probability of the anomalous-class neuron, per sample.

    Pure inference (no tape); the model must have exactly 2 outputs.
    AUC under this orientation equals AUC under the complementary
    normal-neuron scoring.
    """
    if model.num_classes != 2:
        raise ContractError(f"anomaly scoring needs a 2-class model, got {model.num_classes}")
    samples = np.asarray(samples, dtype=np.float32)
    out = np.empty(len(samples), dtype=np.float64)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        logits = model.forward(T.Tensor(chunk)).data
        out[start:start + len(chunk)] = T.softmax(logits)[:, LABEL_ANOMALOUS]
    return out


# ---------------------------------------------------------------------------
# ROC / AUC


def roc_curve(scored):
    """Threshold sweep over the distinct scores, descending; tied scores
    share one threshold point."""
    scored.require_both_labels()
    order = np.argsort(-scored.scores, kind="stable")
    s = scored.scores[order]
    y = scored.labels[order]
    pos = int((y == LABEL_ANOMALOUS).sum())
    neg = int(y.size - pos)

    # positions where a score group ends (last index of each distinct value)
    last_of_group = np.flatnonzero(np.diff(s) != 0)
    group_ends = np.concatenate([last_of_group, [s.size - 1]])

    tp_cum = np.cumsum(y == LABEL_ANOMALOUS)
    fp_cum = np.cumsum(y == LABEL_NORMAL)
    tpr = np.concatenate([[0.0], tp_cum[group_ends] / pos])
    fpr = np.concatenate([[0.0], fp_cum[group_ends] / neg])
    thresholds = np.concatenate([[np.inf], s[group_ends]])
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def auc_trapezoid(scored):
    """Area under the ROC curve by trapezoidal integration."""
    roc = roc_curve(scored)
    return float(np.sum(np.diff(roc.fpr) * (roc.tpr[1:] + roc.tpr[:-1]) * 0.5))


def auc_pairwise_oracle(scored):
    """AUC by exhaustive pair enumeration (Mann-Whitney), independent of
    the threshold-sweep implementation; ties count half."""
    scored.require_both_labels()
    a = scored.scores[scored.labels == LABEL_ANOMALOUS][:, None]
    n = scored.scores[scored.labels == LABEL_NORMAL][None, :]
    wins = np.count_nonzero(a > n)
    ties = np.count_nonzero(a == n)
    return (wins + 0.5 * ties) / (a.shape[0] * n.shape[1])


# ---------------------------------------------------------------------------
# confusion matrix and derived metrics


def confusion_at(scored, threshold=0.5):
    """Counts with 'predict anomalous iff score >= threshold'."""
    pred = scored.scores >= threshold
    actual = scored.labels == LABEL_ANOMALOUS
    return ConfusionMatrix(
        tp=int(np.count_nonzero(pred & actual)),
        fn=int(np.count_nonzero(~pred & actual)),
        fp=int(np.count_nonzero(pred & ~actual)),
        tn=int(np.count_nonzero(~pred & ~actual)),
    )


def _prf(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return ClassMetrics(precision=precision, recall=recall, f1=f1)


def metrics(m):
    """Precision/recall/F1 for both classes; None where undefined."""
    return {
        "anomalous": _prf(m.tp, m.fp, m.fn),
        "normal": _prf(m.tn, m.fn, m.fp),
    }


def evaluate_scores(scored, threshold=0.5):
    """Full EvalReport for a ScoredSet at the given decision threshold."""
    auc = auc_trapezoid(scored)
    roc = roc_curve(scored)
    conf = confusion_at(scored, threshold)
    per_class = metrics(conf)
    return EvalReport(
        auc=auc,
        roc=roc,
        confusion=conf,
        metrics_anomalous=per_class["anomalous"],
        metrics_normal=per_class["normal"],
        threshold=float(threshold),
    )


# ---------------------------------------------------------------------------
# serialization
#
# JSON schema (informal): see REPORT_SCHEMA. Non-finite thresholds are
# stored as null in JSON ("+inf" start of the sweep) to stay strict-JSON
# parseable, and restored to inf on load.

REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "auc", "threshold", "score_convention", "confusion", "metrics", "roc",
    ],
    "properties": {
        "auc": {"type": "number", "minimum": 0.0, "maximum": 1.0},
        "threshold": {"type": "number"},
        "score_convention": {"type": "string"},
        "confusion": {
            "type": "object",
            "required": ["tp", "fn", "fp", "tn"],
            "properties": {k: {"type": "integer", "minimum": 0} for k in ("tp", "fn", "fp", "tn")},
        },
        "metrics": {
            "type": "object",
            "required": ["anomalous", "normal"],
            "patternProperties": {
                ".*": {
                    "type": "object",
                    "required": ["precision", "recall", "f1"],
                    "properties": {
                        k: {"type": ["number", "null"]} for k in ("precision", "recall", "f1")
                    },
                },
            },
        },
        "roc": {
            "type": "object",
            "required": ["fpr", "tpr", "thresholds"],
            "properties": {
                "fpr": {"type": "array", "items": {"type": "number"}},
                "tpr": {"type": "array", "items": {"type": "number"}},
                "thresholds": {"type": "array", "items": {"type": ["number", "null"]}},
            },
        },
    },
}


def report_to_dict(report):
    def cm(c):
        return {"precision": c.precision, "recall": c.recall, "f1": c.f1}

    return {
        "auc": report.auc,
        "threshold": report.threshold,
        "score_convention": report.score_convention,
        "confusion": {
            "tp": report.confusion.tp, "fn": report.confusion.fn,
            "fp": report.confusion.fp, "tn": report.confusion.tn,
        },
        "metrics": {
            "anomalous": cm(report.metrics_anomalous),
            "normal": cm(report.metrics_normal),
        },
        "roc": {
            "fpr": report.roc.fpr.tolist(),
            "tpr": report.roc.tpr.tolist(),
            "thresholds": [t if math.isfinite(t) else None for t in report.roc.thresholds],
        },
    }


def report_from_dict(d):
    def cm(dd):
        return ClassMetrics(precision=dd["precision"], recall=dd["recall"], f1=dd["f1"])

    return EvalReport(
        auc=d["auc"],
        threshold=d["threshold"],
        score_convention=d["score_convention"],
        confusion=ConfusionMatrix(**d["confusion"]),
        metrics_anomalous=cm(d["metrics"]["anomalous"]),
        metrics_normal=cm(d["metrics"]["normal"]),
        roc=RocCurve(
            fpr=np.asarray(d["roc"]["fpr"], dtype=np.float64),
            tpr=np.asarray(d["roc"]["tpr"], dtype=np.float64),
            thresholds=np.asarray(
                [np.inf if t is None else t for t in d["roc"]["thresholds"]],
                dtype=np.float64,
            ),
        ),
    )


def emit_report(report, path, format="json"):
    """Write a report as JSON (all fields) or CSV (ROC points only)."""
    if format == "json":
        with open(path, "w") as f:
            json.dump(report_to_dict(report), f, indent=2, allow_nan=False)
            f.write("\n")
    elif format == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "fpr", "tpr"])
            for t, fp_, tp_ in zip(report.roc.thresholds, report.roc.fpr, report.roc.tpr):
                w.writerow([repr(float(t)), repr(float(fp_)), repr(float(tp_))])
    else:
        raise ContractError(f"unknown report format {format!r}")


def load_report(path):
    with open(path) as f:
        return report_from_dict(json.load(f))


def write_scores_csv(scored, path, sample_ids=None):
    """Score dump: sample_id,label,score rows for external tools."""
    ids = sample_ids if sample_ids is not None else range(len(scored.labels))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "label", "score"])
        for i, (y, s) in zip(ids, zip(scored.labels, scored.scores)):
            w.writerow([i, int(y), repr(float(s))])
