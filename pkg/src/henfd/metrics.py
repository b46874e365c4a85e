"""ROC curves, standardized partial AUC and trial aggregation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

DEFAULT_MAXFPR = 0.01


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray

    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


@dataclass
class MetricReport:
    spauc: float
    auc: float
    maxfpr: float
    trials: list = field(default_factory=list)
    mean: float | None = None
    half_width: float | None = None

    def to_dict(self):
        return asdict(self)


def _check_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0/1")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("ROC needs at least one positive and one negative sample")
    return scores, labels


def roc_points(scores, labels) -> RocCurve:
    """ROC from a descending sweep over unique scores.

    Tied scores form one step, so FPR and TPR move together there.
    """
    scores, labels = _check_inputs(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last index of each block of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    return RocCurve(fpr=fpr, tpr=tpr)


def partial_auc(curve: RocCurve, maxfpr: float) -> float:
    """Trapezoidal area under the curve for FPR <= maxfpr."""
    fpr, tpr = curve.fpr, curve.tpr
    stop = np.searchsorted(fpr, maxfpr, side="right")
    x = fpr[:stop]
    y = tpr[:stop]
    if stop < len(fpr) and x[-1] < maxfpr:
        x0, x1 = fpr[stop - 1], fpr[stop]
        y0, y1 = tpr[stop - 1], tpr[stop]
        y_cut = y0 + (y1 - y0) * (maxfpr - x0) / (x1 - x0)
        x = np.r_[x, maxfpr]
        y = np.r_[y, y_cut]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def standardize(pauc: float, maxfpr: float) -> float:
    min_area = 0.5 * maxfpr ** 2
    max_area = maxfpr
    return 0.5 * (1.0 + (pauc - min_area) / (max_area - min_area))


def spauc(scores, labels, maxfpr: float = DEFAULT_MAXFPR) -> float:
    if not 0.0 < maxfpr <= 1.0:
        raise ValueError(f"maxfpr must lie in (0, 1], got {maxfpr}")
    curve = roc_points(scores, labels)
    return standardize(partial_auc(curve, maxfpr), maxfpr)


def auc(scores, labels) -> float:
    return partial_auc(roc_points(scores, labels), 1.0)


def mean_ci(values, confidence: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width with n-1 degrees of freedom."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("need at least two values for a confidence interval")
    n = values.size
    sd = values.std(ddof=1)
    t = stats.t.ppf(0.5 + confidence / 2.0, df=n - 1)
    return float(values.mean()), float(t * sd / np.sqrt(n))


def report(scores, labels, maxfpr: float = DEFAULT_MAXFPR) -> MetricReport:
    return MetricReport(spauc=spauc(scores, labels, maxfpr), auc=auc(scores, labels), maxfpr=maxfpr)


def aggregate(per_trial: list[MetricReport], confidence: float = 0.95) -> MetricReport:
    values = [r.spauc for r in per_trial]
    mean, hw = mean_ci(values, confidence)
    return MetricReport(
        spauc=mean,
        auc=float(np.mean([r.auc for r in per_trial])),
        maxfpr=per_trial[0].maxfpr,
        trials=[{"trial": i, "spauc": r.spauc, "auc": r.auc} for i, r in enumerate(per_trial)],
        mean=mean,
        half_width=hw,
    )


def write_metrics(report_: MetricReport, json_path, csv_path=None):
    Path(json_path).write_text(json.dumps(report_.to_dict(), indent=2))
    if csv_path is not None:
        rows = report_.trials or [{"trial": 0, "spauc": report_.spauc, "auc": report_.auc}]
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["trial", "spauc", "auc"])
            w.writeheader()
            w.writerows(rows)
