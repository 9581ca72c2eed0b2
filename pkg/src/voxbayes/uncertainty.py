"""Monte-Carlo predictive samples, percentile intervals and review flags."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

DEFAULT_T = 200
DEFAULT_WIDTH_THRESHOLD = 0.3


@dataclass
class PredictiveSamples:
    samples: np.ndarray
    seed: int = 0
    model_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size < 1:
            raise ConfigError("need at least one predictive sample")
        if np.any(self.samples < 0) or np.any(self.samples > 1) or not np.all(np.isfinite(self.samples)):
            raise ConfigError("predictive samples must be probabilities in [0, 1]")

    @property
    def T(self) -> int:
        return int(self.samples.size)

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples))


@dataclass(frozen=True)
class PredictiveInterval:
    level: float
    lo: float
    hi: float
    mean: float

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def class0(self) -> tuple[float, float]:
        return 1.0 - self.hi, 1.0 - self.lo

    @property
    def class1(self) -> tuple[float, float]:
        return self.lo, self.hi

    def for_class(self, k: int) -> tuple[float, float]:
        return self.class1 if k == 1 else self.class0


def percentile(sorted_x: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics at rank q (T - 1)."""
    r = q * (sorted_x.size - 1)
    lo = math.floor(r)
    hi = min(lo + 1, sorted_x.size - 1)
    frac = r - lo
    return float(sorted_x[lo] + (sorted_x[hi] - sorted_x[lo]) * frac)


def predictive_interval(samples: PredictiveSamples | np.ndarray, level: float = 0.95) -> PredictiveInterval:
    if not 0.0 < level < 1.0:
        raise ConfigError(f"level must lie in (0, 1), got {level}")
    if not isinstance(samples, PredictiveSamples):
        samples = PredictiveSamples(samples)
    xs = np.sort(samples.samples)
    tail = (1.0 - level) / 2.0
    lo, hi = percentile(xs, tail), percentile(xs, 1.0 - tail)
    return PredictiveInterval(level, lo, max(lo, hi), samples.mean)


def flag_high_uncertainty(interval: PredictiveInterval, width_threshold: float = DEFAULT_WIDTH_THRESHOLD) -> bool:
    """True means flagged for review; the rule is a strict width > threshold."""
    return interval.width > width_threshold


def mc_predictive(model, volume, T: int = DEFAULT_T, seed: int = 0, model_id: str = "") -> PredictiveSamples:
    """T stochastic forward passes; pass t draws from stream (seed, t)."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not model.is_stochastic:
        raise ConfigError("model has neither Bayesian layers nor dropout; MC sampling is meaningless")
    return PredictiveSamples(model.mc_samples(volume, T, seed), seed, model_id)


# ---------------------------------------------------------------- prediction log


def log_record(sample_id: str, samples: PredictiveSamples, label: int | None = None) -> dict:
    rec = {"id": sample_id}
    if label is not None:
        rec["label"] = int(label)
    rec.update(samples=[float(s) for s in samples.samples], seed=samples.seed,
               model_id=samples.model_id)
    return rec


def dump_prediction_log(records) -> str:
    return json.dumps(list(records), indent=1, sort_keys=True) + "\n"


def load_prediction_log(text: str) -> list[tuple[dict, PredictiveSamples]]:
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"prediction log is not JSON: {exc}") from None
    if isinstance(records, dict):
        records = [records]
    out = []
    for rec in records:
        if "id" not in rec or "samples" not in rec:
            raise FormatError(f"prediction record lacks id/samples: {sorted(rec)}")
        out.append((rec, PredictiveSamples(rec["samples"], rec.get("seed", 0), rec.get("model_id", ""))))
    return out
