"""Classification metrics, macro averaging and subgroup fairness ratios.

All metrics are implemented directly on numpy arrays.  Degenerate 0/0 cases
return 0.0 and set a flag instead of producing NaN.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .core_types import AgeGroup, DemographicRecord, RaceEthnicity, Sex
from .errors import DegenerateLabels, EmptyGroup, NoPositives, NonBinaryLabels


class _Undefined:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNDEFINED"

    __str__ = __repr__

    def __bool__(self):
        return False


UNDEFINED = _Undefined()


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def matrix(self) -> np.ndarray:
        """2x2 matrix indexed [true, predicted] with class 1 = positive."""
        return np.array([[self.tn, self.fp], [self.fn, self.tp]])


@dataclass
class PredictionSet:
    scores: np.ndarray  # (n, num_classes) probabilities
    labels: np.ndarray  # (n,)
    patient_ids: Sequence[str] = ()
    demographics: Sequence[DemographicRecord] = ()

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim == 1:
            self.scores = np.stack([1.0 - self.scores, self.scores], axis=1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape[0] != self.labels.shape[0]:
            raise ValueError("scores and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.scores.shape[1]):
            raise ValueError("label outside score vector range")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def subset(self, mask) -> "PredictionSet":
        mask = np.asarray(mask, dtype=bool)
        pids = [p for p, keep in zip(self.patient_ids, mask) if keep] if len(self.patient_ids) else ()
        demo = [d for d, keep in zip(self.demographics, mask) if keep] if len(self.demographics) else ()
        return PredictionSet(self.scores[mask], self.labels[mask], pids, demo)


def _binary(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.all(np.isin(labels, (0, 1))):
        raise NonBinaryLabels("expected labels in {0, 1}")
    return labels.astype(np.int64)


def confusion_at_threshold(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Counts for ``score >= threshold`` predicted positive."""
    y = _binary(labels)
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & (y == 1))),
        fp=int(np.sum(pred & (y == 0))),
        tn=int(np.sum(~pred & (y == 0))),
        fn=int(np.sum(~pred & (y == 1))),
    )


def _auroc_binary(scores, y) -> float:
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUROC needs both classes")
    ranks = rankdata(scores)  # average ranks => ties count one half
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; 2-D scores with >2 columns give one-vs-rest macro."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 2 and scores.shape[1] == 2:
        scores = scores[:, 1]
    if scores.ndim == 1:
        return _auroc_binary(scores, _binary(labels))
    per_class = [
        _auroc_binary(scores[:, c], (labels == c).astype(np.int64))
        for c in range(scores.shape[1])
        if 0 < np.sum(labels == c) < labels.size
    ]
    if not per_class:
        raise DegenerateLabels("no class has both positives and negatives")
    return macro_average(per_class)


def _average_precision(scores, y) -> float:
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], y[order]
    tp = np.cumsum(t)
    fp = np.cumsum(1 - t)
    # one operating point per distinct score (last index of each tie block)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def auprc(scores, labels) -> float:
    """Average precision (step integration of the precision-recall curve)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 2 and scores.shape[1] == 2:
        scores = scores[:, 1]
    if scores.ndim == 1:
        return _average_precision(scores, _binary(labels))
    per_class = [
        _average_precision(scores[:, c], (labels == c).astype(np.int64))
        for c in range(scores.shape[1])
        if np.any(labels == c)
    ]
    return macro_average(per_class)


@dataclass
class Metric:
    value: float
    degenerate: bool = False

    def __float__(self):
        return float(self.value)


def _ratio(num, den) -> Metric:
    if den == 0:
        return Metric(0.0, True)
    return Metric(num / den)


def classification_metrics(cc: ConfusionCounts) -> dict:
    precision = _ratio(cc.tp, cc.tp + cc.fp)
    recall = _ratio(cc.tp, cc.tp + cc.fn)
    accuracy = _ratio(cc.tp + cc.tn, cc.total)
    f1 = f1_from(precision.value, recall.value)
    f1.degenerate = f1.degenerate or precision.degenerate or recall.degenerate
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}


def f1_from(precision: float, recall: float) -> Metric:
    if precision + recall == 0:
        return Metric(0.0, True)
    return Metric(2 * precision * recall / (precision + recall))


def mcc(cc) -> float:
    """Matthews correlation; accepts ConfusionCounts or a KxK [true, pred] matrix."""
    if isinstance(cc, ConfusionCounts):
        den = (cc.tp + cc.fp) * (cc.tp + cc.fn) * (cc.tn + cc.fp) * (cc.tn + cc.fn)
        if den == 0:
            return 0.0
        return float((cc.tp * cc.tn - cc.fp * cc.fn) / math.sqrt(den))
    m = np.asarray(cc, dtype=np.float64)
    n = m.sum()
    correct = np.trace(m)
    t = m.sum(axis=1)
    p = m.sum(axis=0)
    den = math.sqrt((n * n - p @ p) * (n * n - t @ t))
    if den == 0:
        return 0.0
    return float((correct * n - t @ p) / den)


def cohen_kappa(cc, return_flag: bool = False):
    m = cc.matrix() if isinstance(cc, ConfusionCounts) else np.asarray(cc, dtype=np.float64)
    m = m.astype(np.float64)
    n = m.sum()
    if n == 0:
        return (0.0, True) if return_flag else 0.0
    p_o = np.trace(m) / n
    p_e = float(m.sum(axis=1) @ m.sum(axis=0)) / (n * n)
    if p_e == 1.0:
        return (0.0, True) if return_flag else 0.0
    k = float((p_o - p_e) / (1.0 - p_e))
    return (k, False) if return_flag else k


def macro_average(per_class) -> float:
    vals = [float(v) for v in per_class]
    if not vals:
        raise ValueError("nothing to average")
    return float(np.mean(vals))


def multiclass_confusion(labels, preds, num_classes: int) -> np.ndarray:
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels), np.asarray(preds)), 1)
    return m


def one_vs_rest_counts(matrix: np.ndarray, cls: int) -> ConfusionCounts:
    m = np.asarray(matrix)
    tp = int(m[cls, cls])
    fp = int(m[:, cls].sum() - tp)
    fn = int(m[cls, :].sum() - tp)
    return ConfusionCounts(tp, fp, int(m.sum() - tp - fp - fn), fn)


def evaluate_predictions(preds: PredictionSet, threshold: float = 0.5) -> dict:
    """Full metric set: binary tasks threshold the positive-class score, multiclass
    tasks use argmax with macro-averaged precision/recall/F1."""
    out = {}
    k = preds.num_classes
    y = preds.labels
    try:
        out["auroc"] = auroc(preds.scores, y)
    except DegenerateLabels:
        out["auroc"] = float("nan")
    try:
        out["auprc"] = auprc(preds.scores, y)
    except NoPositives:
        out["auprc"] = float("nan")
    if k == 2:
        cc = confusion_at_threshold(preds.scores[:, 1], y, threshold)
        cm = classification_metrics(cc)
        out.update({name: m.value for name, m in cm.items()})
        out["mcc"] = mcc(cc)
        out["kappa"] = cohen_kappa(cc)
    else:
        matrix = multiclass_confusion(y, preds.scores.argmax(axis=1), k)
        per = [classification_metrics(one_vs_rest_counts(matrix, c)) for c in range(k)]
        out["accuracy"] = float(np.trace(matrix) / max(matrix.sum(), 1))
        for name in ("precision", "recall", "f1"):
            out[name] = macro_average(p[name].value for p in per)
        out["mcc"] = mcc(matrix)
        out["kappa"] = cohen_kappa(matrix)
    return out


def mean_ci(values, z: float = 1.96) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval mean +/- z * sd / sqrt(n)."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if v.size < 2:
        return mean, mean, mean
    half = z * float(v.std(ddof=1)) / math.sqrt(v.size)
    return mean, mean - half, mean + half


# -- fairness -----------------------------------------------------------------------

def _rate(num, den):
    return UNDEFINED if den == 0 else num / den


def _counts(p: PredictionSet, threshold: float) -> ConfusionCounts:
    if p.num_classes != 2:
        raise NonBinaryLabels("fairness ratios are defined for binary tasks")
    return confusion_at_threshold(p.scores[:, 1], p.labels, threshold)


def _auroc_or_undefined(p: PredictionSet, threshold: float):
    try:
        return auroc(p.scores[:, 1], p.labels)
    except DegenerateLabels:
        return UNDEFINED


FAIRNESS_METRICS: dict[str, Callable] = {
    "PPV": lambda p, t: (lambda c: _rate(c.tp, c.tp + c.fp))(_counts(p, t)),
    "FPR": lambda p, t: (lambda c: _rate(c.fp, c.fp + c.tn))(_counts(p, t)),
    "TPR": lambda p, t: (lambda c: _rate(c.tp, c.tp + c.fn))(_counts(p, t)),
    "NPV": lambda p, t: (lambda c: _rate(c.tn, c.tn + c.fn))(_counts(p, t)),
    "FN/FP": lambda p, t: (lambda c: _rate(c.fn, c.fp))(_counts(p, t)),
    "FNR": lambda p, t: (lambda c: _rate(c.fn, c.fn + c.tp))(_counts(p, t)),
    "ACC": lambda p, t: (lambda c: _rate(c.tp + c.tn, c.total))(_counts(p, t)),
    "AUROC": _auroc_or_undefined,
}

# attribute -> (accessor, protected value, privileged value)
GROUP_DEFINITIONS = {
    "age": (lambda d: d.age_group, AgeGroup.GE75, AgeGroup.A45_64),
    "sex": (lambda d: d.sex, Sex.FEMALE, Sex.MALE),
    "race": (lambda d: d.race_ethnicity, RaceEthnicity.NHB, RaceEthnicity.NHW),
}


def subgroup_ratio(metric_fn, predictions: PredictionSet, protected_def, privileged_def, threshold: float = 0.5):
    """Metric on the protected subset divided by the metric on the privileged subset.

    ``protected_def`` / ``privileged_def`` are boolean masks or predicates over
    DemographicRecord.  ``metric_fn`` is a name from FAIRNESS_METRICS or a
    callable (PredictionSet, threshold) -> value.  Returns UNDEFINED when the
    privileged value is 0 or either value is undefined.
    """
    fn = FAIRNESS_METRICS[metric_fn] if isinstance(metric_fn, str) else metric_fn
    prot = _select(predictions, protected_def)
    priv = _select(predictions, privileged_def)
    if not prot.any() or not priv.any():
        raise EmptyGroup("protected or privileged group is empty")
    a = fn(predictions.subset(prot), threshold)
    b = fn(predictions.subset(priv), threshold)
    return _divide(a, b)


def _divide(a, b):
    if a is UNDEFINED or b is UNDEFINED or b == 0:
        return UNDEFINED
    return a / b


def _select(predictions, definition) -> np.ndarray:
    if callable(definition):
        return np.array([bool(definition(d)) for d in predictions.demographics], dtype=bool)
    return np.asarray(definition, dtype=bool)


@dataclass
class FairnessCell:
    protected: object
    privileged: object
    ratio: object
    status: str = "OK"  # OK | UNDEFINED | EMPTY_GROUP


@dataclass
class FairnessReport:
    cells: dict = field(default_factory=dict)  # (attribute, metric) -> FairnessCell

    def ratio(self, attribute: str, metric: str):
        return self.cells[(attribute, metric)].ratio

    def rows(self):
        for (attr, metric), cell in self.cells.items():
            yield {
                "attribute": attr,
                "metric": metric,
                "protected": _fmt(cell.protected),
                "privileged": _fmt(cell.privileged),
                "ratio": _fmt(cell.ratio),
                "status": cell.status,
            }


def _fmt(v):
    if v is UNDEFINED or v is None:
        return "UNDEFINED" if v is UNDEFINED else ""
    return repr(float(v))


def fairness_report(predictions: PredictionSet, threshold: float = 0.5, groups=None) -> FairnessReport:
    """Protected/privileged ratio grid over the three demographic attributes.

    UNKNOWN demographics never match either group definition and so drop out.
    """
    groups = GROUP_DEFINITIONS if groups is None else groups
    report = FairnessReport()
    demo = list(predictions.demographics)
    for attr, (get, prot_val, priv_val) in groups.items():
        prot = np.array([get(d) == prot_val for d in demo], dtype=bool)
        priv = np.array([get(d) == priv_val for d in demo], dtype=bool)
        for name, fn in FAIRNESS_METRICS.items():
            if not prot.any() or not priv.any():
                report.cells[(attr, name)] = FairnessCell(None, None, UNDEFINED, "EMPTY_GROUP")
                continue
            a = fn(predictions.subset(prot), threshold)
            b = fn(predictions.subset(priv), threshold)
            r = _divide(a, b)
            report.cells[(attr, name)] = FairnessCell(a, b, r, "UNDEFINED" if r is UNDEFINED else "OK")
    return report
