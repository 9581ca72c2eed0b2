"""Reliability bins, expected calibration error, reliability diagrams and threshold sweeps.

A binary prediction's confidence is ``max(p, 1 - p)`` and it is correct
when the thresholded label (positive iff ``p >= threshold``) matches.
Bin ``m`` of ``M`` covers ``((m - 1)/M, m/M]``; confidence 0 goes to bin 1.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .errors import ConfigError, UndefinedMetric
from .metrics import MetricsReport, _pair, metrics_report, predict_labels

DEFAULT_BINS = 10
DEFAULT_THRESHOLDS = (0.4, 0.5, 0.6, 0.7, 0.8)
SWEEP_COLUMNS = ("threshold", "accuracy", "precision", "recall", "f1", "kappa", "auc", "ece")


@dataclass(frozen=True)
class CalibrationBin:
    index: int
    lower: float
    upper: float
    count: int
    acc: float
    conf: float


@dataclass(frozen=True)
class CalibrationReport:
    bins: tuple[CalibrationBin, ...]
    ece: float
    n: int
    threshold: float


def confidence_and_correct(probs, labels, threshold: float):
    p, y = _pair(probs, labels)
    conf = np.maximum(p, 1.0 - p)
    correct = (predict_labels(p, threshold) == y).astype(np.float64)
    return conf, correct


def bin_index(conf: np.ndarray, M: int) -> np.ndarray:
    """Zero-based bin of each confidence, compared against the edges m/M."""
    edges = np.arange(1, M + 1) / M
    return np.minimum(np.searchsorted(edges, conf, side="left"), M - 1)


def bin_predictions(probs, labels, threshold: float = 0.5, M: int = DEFAULT_BINS) -> list[CalibrationBin]:
    if M < 2:
        raise ConfigError(f"need at least 2 bins, got {M}")
    conf, correct = confidence_and_correct(probs, labels, threshold)
    idx = bin_index(conf, M)
    out = []
    for m in range(M):
        sel = idx == m
        k = int(sel.sum())
        acc = float(correct[sel].mean()) if k else 0.0
        cf = float(conf[sel].mean()) if k else 0.0
        out.append(CalibrationBin(m + 1, m / M, (m + 1) / M, k, acc, cf))
    return out


def expected_calibration_error(bins, n: int) -> float:
    if n == 0:
        raise UndefinedMetric("ECE of an empty dataset")
    if sum(b.count for b in bins) != n:
        raise ConfigError("bin counts do not sum to n")
    return float(sum(b.count / n * abs(b.acc - b.conf) for b in bins if b.count))


def calibration_report(probs, labels, threshold: float = 0.5, M: int = DEFAULT_BINS) -> CalibrationReport:
    bins = bin_predictions(probs, labels, threshold, M)
    n = sum(b.count for b in bins)
    return CalibrationReport(tuple(bins), expected_calibration_error(bins, n), n, threshold)


def threshold_sweep(probs, labels, thresholds=DEFAULT_THRESHOLDS, M: int = DEFAULT_BINS):
    """One (threshold, MetricsReport, ece) row per threshold."""
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ConfigError("threshold list is empty")
    if any(not 0 < t < 1 for t in thresholds) or any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError(f"thresholds must be strictly increasing within (0, 1): {thresholds}")
    return [(t, metrics_report(probs, labels, t), calibration_report(probs, labels, t, M).ece)
            for t in thresholds]


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(SWEEP_COLUMNS) + "\n")
    for t, rep, ece in rows:
        r: MetricsReport = rep
        vals = (t, r.accuracy, r.precision, r.recall, r.f1, r.kappa, r.auc, ece)
        buf.write(",".join(_fmt(v) for v in vals) + "\n")
    return buf.getvalue()


def bins_csv(report: CalibrationReport) -> str:
    lines = ["bin,lower,upper,count,accuracy,confidence"]
    for b in report.bins:
        lines.append(",".join([str(b.index), _fmt(b.lower), _fmt(b.upper), str(b.count),
                               _fmt(b.acc), _fmt(b.conf)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- diagram

_W, _H = 420, 480
_PX, _PY, _PS = 60, 30, 320  # plot origin (top-left) and side
_HIST_Y, _HIST_H = 370, 50


def _x(v):
    return _PX + v * _PS


def _y(v):
    return _PY + (1.0 - v) * _PS


def _n(v):
    return f"{v:.2f}"


def reliability_diagram(report: CalibrationReport, title: str = "Reliability diagram") -> str:
    """Standalone SVG: accuracy bars, gap overlays, the diagonal and a confidence histogram."""
    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
           f'<title>{escape(title)}</title>',
           f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
           f'<rect x="{_PX}" y="{_PY}" width="{_PS}" height="{_PS}" fill="none" stroke="black"/>']
    for b in report.bins:
        if b.count == 0:
            continue
        x0, w = _x(b.lower), _PS * (b.upper - b.lower)
        out.append(f'<rect class="acc" x="{_n(x0)}" y="{_n(_y(b.acc))}" width="{_n(w)}" '
                   f'height="{_n(_PS * b.acc)}" fill="#3b6fb6" stroke="#1d3f73"/>')
        lo, hi = sorted((b.acc, b.conf))
        out.append(f'<rect class="gap" x="{_n(x0)}" y="{_n(_y(hi))}" width="{_n(w)}" '
                   f'height="{_n(_PS * (hi - lo))}" fill="#d62728" fill-opacity="0.45" '
                   f'stroke="#d62728"/>')
    out.append(f'<line x1="{_x(0)}" y1="{_y(0)}" x2="{_x(1)}" y2="{_y(1)}" stroke="gray" '
               f'stroke-dasharray="4 3"/>')
    for t in range(0, 11, 2):
        v = t / 10
        out.append(f'<text x="{_n(_x(v))}" y="{_PY + _PS + 14}" text-anchor="middle">{v:.1f}</text>')
        out.append(f'<text x="{_PX - 6}" y="{_n(_y(v) + 4)}" text-anchor="end">{v:.1f}</text>')
    out.append(f'<text x="{_PX + _PS / 2:.0f}" y="{_PY + _PS + 30}" text-anchor="middle">confidence</text>')
    out.append(f'<text x="16" y="{_PY + _PS / 2:.0f}" transform="rotate(-90 16 {_PY + _PS / 2:.0f})" '
               f'text-anchor="middle">accuracy</text>')
    peak = max((b.count for b in report.bins), default=0) or 1
    out.append(f'<line x1="{_PX}" y1="{_HIST_Y + _HIST_H}" x2="{_PX + _PS}" y2="{_HIST_Y + _HIST_H}" '
               f'stroke="black"/>')
    for b in report.bins:
        if b.count == 0:
            continue
        h = _HIST_H * b.count / peak
        out.append(f'<rect class="hist" x="{_n(_x(b.lower))}" y="{_n(_HIST_Y + _HIST_H - h)}" '
                   f'width="{_n(_PS * (b.upper - b.lower))}" height="{_n(h)}" fill="#888888"/>')
    out.append(f'<text class="caption" x="{_W / 2:.0f}" y="{_H - 20}" text-anchor="middle">'
               f'ECE = {report.ece:.3f} (n = {report.n}, threshold = {report.threshold:g})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
