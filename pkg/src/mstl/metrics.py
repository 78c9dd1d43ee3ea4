"""Binary evaluation battery: confusion matrix, scalar metrics, ROC / AUC,
and baseline-relative comparison tables.

The positive class is label 1 and is never inferred from the data.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ComparisonError, InputError

REPORT_SCHEMA = "mstl.eval_report/1"
METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auc")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _binary_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0:
        raise InputError("empty scores")
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores vs {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Predict positive iff score >= threshold."""
    s, y = _binary_inputs(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def metrics(cm: ConfusionMatrix) -> dict:
    """Accuracy, precision, recall and F1. Ratios with a zero denominator
    are reported as 0.0 and listed under ``undefined``."""
    if cm.total <= 0:
        raise InputError("metrics() of an empty confusion matrix")
    undefined = []
    precision, bad = _ratio(cm.tp, cm.tp + cm.fp)
    if bad:
        undefined.append("precision")
    recall, bad = _ratio(cm.tp, cm.tp + cm.fn)
    if bad:
        undefined.append("recall")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        undefined.append("f1")
    return {
        "accuracy": (cm.tp + cm.tn) / cm.total,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "undefined": undefined,
    }


def roc_auc(scores, labels) -> tuple[list[tuple[float, float]], float]:
    """ROC points swept over distinct scores (descending, ties grouped) and
    the trapezoidal area under them."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("roc_auc needs both classes present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.nonzero(np.diff(s))[0]
    ends = np.append(ends, s.size - 1)
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.concatenate([[0], tps]) / n_pos
    fpr = np.concatenate([[0], fps]) / n_neg
    points = [(float(a), float(b)) for a, b in zip(fpr, tpr)]
    # exact integer trapezoid sum, then one division
    area2 = np.sum((fps[1:] - fps[:-1]) * (tps[1:] + tps[:-1])) + fps[0] * tps[0]
    auc = float(area2) / (2.0 * n_pos * n_neg)
    return points, auc


def pairwise_auc(scores, labels) -> float:
    """Brute-force AUC: fraction of (positive, negative) pairs ranked
    correctly, ties counted half. Quadratic; for checking only."""
    s, y = _binary_inputs(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return float(wins / (len(pos) * len(neg)))


@dataclass
class EvalReport:
    model_id: str
    stage: str
    split: str
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc: list[tuple[float, float]]
    auc: float
    threshold: float = 0.5
    undefined: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    n_samples: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = REPORT_SCHEMA
        d["roc"] = [list(p) for p in self.roc]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise InputError(f"unsupported report schema {d.get('schema')!r} (expected {REPORT_SCHEMA})")
        d = dict(d)
        d.pop("schema")
        d["confusion"] = ConfusionMatrix(**d["confusion"])
        d["roc"] = [tuple(p) for p in d["roc"]]
        return cls(**d)


def evaluate(scores, labels, model_id: str, stage: str, split: str, threshold: float = 0.5,
             provenance: dict | None = None) -> EvalReport:
    s, y = _binary_inputs(scores, labels)
    cm = confusion(s, y, threshold)
    m = metrics(cm)
    roc, auc = roc_auc(s, y)
    return EvalReport(model_id, stage, split, cm, m["accuracy"], m["precision"], m["recall"], m["f1"],
                      roc, auc, threshold, m["undefined"], dict(provenance or {}), int(s.size))


def compare_arms(reports: Sequence[EvalReport], baseline: int | str = 0) -> dict:
    """Per-metric deltas (candidate − baseline) for every non-baseline report.

    ``baseline`` is an index or a model id. All reports must come from the
    same split of the same manifest.
    """
    if len(reports) < 2:
        raise ComparisonError("compare_arms needs at least two reports")
    if isinstance(baseline, str):
        ids = [r.model_id for r in reports]
        if baseline not in ids:
            raise ComparisonError(f"baseline {baseline!r} not among reports {ids}")
        baseline = ids.index(baseline)
    base = reports[baseline]
    key = (base.split, base.provenance.get("manifest_hash"))
    for r in reports:
        other = (r.split, r.provenance.get("manifest_hash"))
        if other != key:
            raise ComparisonError(f"report {r.model_id} is on split/manifest {other}, baseline on {key}")
    rows = []
    for i, r in enumerate(reports):
        if i == baseline:
            continue
        rows.append({
            "model_id": r.model_id,
            "values": {m: getattr(r, m) for m in METRIC_NAMES},
            "deltas": {m: getattr(r, m) - getattr(base, m) for m in METRIC_NAMES},
        })
    return {
        "baseline": base.model_id,
        "baseline_values": {m: getattr(base, m) for m in METRIC_NAMES},
        "split": base.split,
        "manifest_hash": base.provenance.get("manifest_hash"),
        "rows": rows,
    }
