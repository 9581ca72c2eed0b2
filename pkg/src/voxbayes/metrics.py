"""Binary classification metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeError, UndefinedMetric


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ConfigError(f"confusion counts must be non-negative: {self}")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    threshold: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    kappa: float
    auc: float

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(probs, labels):
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ShapeError(f"{p.size} scores but {y.size} labels")
    if y.size and not np.all((y == 0) | (y == 1)):
        raise ConfigError("labels must be 0 or 1")
    return p, y.astype(np.int64)


def predict_labels(probs, threshold: float) -> np.ndarray:
    """Positive iff prob >= threshold."""
    return (np.asarray(probs, dtype=np.float64) >= threshold).astype(np.int64)


def confusion_counts(probs, labels, threshold: float = 0.5) -> ConfusionCounts:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    p, y = _pair(probs, labels)
    pred = predict_labels(p, threshold)
    return ConfusionCounts(int(np.sum((pred == 1) & (y == 1))), int(np.sum((pred == 1) & (y == 0))),
                           int(np.sum((pred == 0) & (y == 0))), int(np.sum((pred == 0) & (y == 1))))


def _ratio(a, b) -> float:
    return a / b if b else 0.0


def classification_metrics(c: ConfusionCounts) -> tuple[float, float, float, float]:
    """(accuracy, precision, recall, f1); zero denominators give 0."""
    if c.n < 1:
        raise UndefinedMetric("no samples")
    acc = (c.tp + c.tn) / c.n
    prec = _ratio(c.tp, c.tp + c.fp)
    rec = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * prec * rec, prec + rec)
    return acc, prec, rec, f1


def cohens_kappa(preds, labels) -> float:
    a, b = _pair(preds, labels)
    if a.size < 1:
        raise UndefinedMetric("kappa needs at least one sample")
    a = a.astype(np.int64)
    p_o = float(np.mean(a == b))
    pa, pb = float(np.mean(a)), float(np.mean(b))
    p_e = pa * pb + (1 - pa) * (1 - pb)
    if p_e == 1.0:
        return 0.0
    return (p_o - p_e) / (1.0 - p_e)


def roc_auc(probs, labels) -> float:
    """Mann-Whitney estimate: P(score+ > score-) with ties counted as one half."""
    p, y = _pair(probs, labels)
    pos, neg = p[y == 1], p[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetric("AUC needs at least one positive and one negative label")
    # average ranks handle ties exactly
    order = np.argsort(p, kind="mergesort")
    sorted_p = p[order]
    ranks = np.empty(p.size, dtype=np.float64)
    i = 0
    while i < p.size:
        j = i
        while j + 1 < p.size and sorted_p[j + 1] == sorted_p[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y == 1].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def metrics_report(probs, labels, threshold: float = 0.5) -> MetricsReport:
    p, y = _pair(probs, labels)
    acc, prec, rec, f1 = classification_metrics(confusion_counts(p, y, threshold))
    kappa = cohens_kappa(predict_labels(p, threshold), y)
    try:
        auc = roc_auc(p, y)
    except UndefinedMetric:
        auc = float("nan")
    return MetricsReport(threshold, acc, prec, rec, f1, kappa, auc)
