"""Classification metrics, coverage curves, OOD detection, and the
high-uncertainty vs. misclassification association.

Everything operates on plain arrays and returns JSON-serializable reports.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings

import numpy as np
from scipy.stats import rankdata


@dataclasses.dataclass
class ClassMetrics:
    label: str
    support: int
    predicted: int
    tp: int
    precision: float
    sensitivity: float
    f1: float
    auc: float
    precision_defined: bool

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["auc"] = None if math.isnan(self.auc) else self.auc
        return d


@dataclasses.dataclass
class EvaluationReport:
    n: int
    accuracy: float
    per_class: list
    macro_precision: float
    macro_sensitivity: float
    macro_f1: float
    macro_auc: float
    confusion: np.ndarray

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "per_class": [c.to_json() for c in self.per_class],
            "macro_precision": self.macro_precision,
            "macro_sensitivity": self.macro_sensitivity,
            "macro_f1": self.macro_f1,
            "macro_auc": None if math.isnan(self.macro_auc) else self.macro_auc,
            "confusion": self.confusion.tolist(),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def binary_auc(scores, positives) -> float:
    """Rank-statistic ROC-AUC with half credit for ties.

    NaN when either class is empty (undefined).
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores)
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(predictions, labels, belief_scores=None, class_names=None) -> EvaluationReport:
    """Per-class precision/sensitivity/F1, macro averages, accuracy, one-vs-rest
    ROC-AUC from belief scores, and the confusion matrix.

    Precision with no predicted positives is reported as 0 and flagged so the
    macro average stays defined.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ValueError("predictions and labels must be equal-length 1-D arrays")
    if len(predictions) == 0:
        raise ValueError("cannot compute metrics on an empty sample")
    if belief_scores is not None:
        belief_scores = np.asarray(belief_scores, dtype=np.float64)
        if belief_scores.shape[0] != len(labels):
            raise ValueError("belief_scores length mismatch")
        k = belief_scores.shape[1]
    else:
        k = int(max(predictions.max(), labels.max())) + 1
    if labels.min() < 0 or labels.max() >= k or predictions.min() < 0 or predictions.max() >= k:
        raise ValueError(f"class indices must lie in [0, {k})")
    if class_names is None:
        class_names = [str(i) for i in range(k)]

    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(labels, predictions):
        confusion[t, p] += 1

    per_class = []
    for c in range(k):
        tp = int(confusion[c, c])
        support = int(confusion[c, :].sum())
        predicted = int(confusion[:, c].sum())
        precision_defined = predicted > 0
        precision = tp / predicted if predicted > 0 else 0.0
        sensitivity = tp / support if support > 0 else 0.0
        f1 = (
            2 * precision * sensitivity / (precision + sensitivity)
            if precision + sensitivity > 0
            else 0.0
        )
        auc = (
            binary_auc(belief_scores[:, c], labels == c)
            if belief_scores is not None
            else math.nan
        )
        per_class.append(
            ClassMetrics(
                label=class_names[c],
                support=support,
                predicted=predicted,
                tp=tp,
                precision=precision,
                sensitivity=sensitivity,
                f1=f1,
                auc=auc,
                precision_defined=precision_defined,
            )
        )

    aucs = [c.auc for c in per_class if not math.isnan(c.auc)]
    return EvaluationReport(
        n=len(labels),
        accuracy=float(np.trace(confusion) / len(labels)),
        per_class=per_class,
        macro_precision=float(np.mean([c.precision for c in per_class])),
        macro_sensitivity=float(np.mean([c.sensitivity for c in per_class])),
        macro_f1=float(np.mean([c.f1 for c in per_class])),
        macro_auc=float(np.mean(aucs)) if aucs else math.nan,
        confusion=confusion,
    )


@dataclasses.dataclass
class CoverageCurve:
    points: list  # (retained_fraction, accuracy), retained_fraction decreasing
    auc: float

    def to_json(self) -> dict:
        return {
            "points": [[rf, acc] for rf, acc in self.points],
            "auc": self.auc,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def coverage_curve(uncertainties, correctness) -> CoverageCurve:
    """Accuracy as the most-uncertain samples are removed (ties as a block).

    Points run from full retention down to 10% retained; the AUC is the
    trapezoidal integral over retained fraction normalized by the width of
    the recorded range.
    """
    u = np.asarray(uncertainties, dtype=np.float64)
    correct = np.asarray(correctness, dtype=bool)
    if u.ndim != 1 or len(u) != len(correct):
        raise ValueError("uncertainties and correctness must be equal-length 1-D arrays")
    n = len(u)
    if n < 2:
        raise ValueError("need at least two samples")

    order = sorted(range(n), key=lambda i: (-u[i], i))
    remaining = n
    correct_left = int(correct.sum())
    points = [(1.0, correct_left / n)]
    i = 0
    while i < n:
        j = i
        while j < n and u[order[j]] == u[order[i]]:
            j += 1
        block = order[i:j]
        remaining -= len(block)
        correct_left -= int(correct[block].sum())
        if remaining * 10 < n or remaining < 1:
            break
        points.append((remaining / n, correct_left / remaining))
        i = j

    if len(points) == 1:
        auc = points[0][1]
    else:
        rf = np.array([p[0] for p in points])
        acc = np.array([p[1] for p in points])
        width = rf[0] - rf[-1]
        auc = float(np.trapezoid(acc[::-1], rf[::-1]) / width)
    return CoverageCurve(points=points, auc=auc)


@dataclasses.dataclass
class OODReport:
    detection_rate: float
    theta: float
    n: int
    bin_edges: list
    densities: list

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def ood_detection_rate(uncertainties, theta: float, bins: int = 50) -> OODReport:
    """Fraction of samples flagged by u >= theta, plus a density histogram
    over [0, 1]."""
    u = np.asarray(uncertainties, dtype=np.float64)
    if u.ndim != 1 or len(u) == 0:
        raise ValueError("need at least one uncertainty value")
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    rate = float((u >= theta).sum() / len(u))
    densities, edges = np.histogram(u, bins=bins, range=(0.0, 1.0), density=True)
    return OODReport(
        detection_rate=rate,
        theta=float(theta),
        n=len(u),
        bin_edges=edges.tolist(),
        densities=densities.tolist(),
    )


@dataclasses.dataclass
class AssociationReport:
    a: int  # high uncertainty and wrong
    b: int  # high uncertainty and right
    c: int  # low uncertainty and wrong
    d: int  # low uncertainty and right
    n: int
    odds_ratio: float
    ci_low: float
    ci_high: float
    p_value: float
    corrected: bool
    degenerate: bool

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def misclassification_association(high_flags, wrong_flags) -> AssociationReport:
    """2x2 odds ratio of being wrong given high uncertainty, with a Wald CI.

    Applies the Haldane-Anscombe +0.5 correction to every cell when any cell
    is zero. Equivalent to a single-binary-covariate logistic regression.
    """
    high = np.asarray(high_flags, dtype=bool)
    wrong = np.asarray(wrong_flags, dtype=bool)
    if high.ndim != 1 or high.shape != wrong.shape:
        raise ValueError("high_flags and wrong_flags must be equal-length 1-D arrays")
    if len(high) == 0:
        raise ValueError("need at least one sample")

    a = int((high & wrong).sum())
    b = int((high & ~wrong).sum())
    c = int((~high & wrong).sum())
    d = int((~high & ~wrong).sum())

    degenerate = high.all() or (~high).all() or wrong.all() or (~wrong).all()
    if degenerate:
        warnings.warn("degenerate 2x2 table: a flag column is constant; estimate is corrected")

    corrected = min(a, b, c, d) == 0
    shift = 0.5 if corrected else 0.0
    aa, bb, cc, dd = a + shift, b + shift, c + shift, d + shift
    odds_ratio = (aa * dd) / (bb * cc)
    se = math.sqrt(1 / aa + 1 / bb + 1 / cc + 1 / dd)
    log_or = math.log(odds_ratio)
    ci_low = math.exp(log_or - 1.96 * se)
    ci_high = math.exp(log_or + 1.96 * se)
    z = log_or / se
    p_value = math.erfc(abs(z) / math.sqrt(2.0))
    return AssociationReport(
        a=a,
        b=b,
        c=c,
        d=d,
        n=len(high),
        odds_ratio=float(odds_ratio),
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        p_value=float(p_value),
        corrected=corrected,
        degenerate=degenerate,
    )
