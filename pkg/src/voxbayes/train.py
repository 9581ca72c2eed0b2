"""Negative-ELBO objective, Adam, the training loop and prediction."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ops
from .bayes import KlLedger
from .errors import ConfigError, ShapeError, VoxBayesError
from .layers import NetworkSpec
from .model import Checkpoint, Model
from .nifti import AugmentPolicy, Volume, augment
from .rng import Rng
from .uncertainty import DEFAULT_T, PredictiveSamples

PROB_CLAMP = 1e-7
KL_WEIGHT_MODES = ("one_over_n_train",)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 2
    kl_weight_mode: str = "one_over_n_train"
    seed: int = 0
    early_stop_patience: int = 15
    augment: bool = False
    augment_policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    eval_batch: int = 4
    val_samples: int = 8  # MC passes per validation volume for the Bernoulli-mean head

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.kl_weight_mode not in KL_WEIGHT_MODES:
            raise ConfigError(f"unknown kl_weight_mode {self.kl_weight_mode!r}")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment_policy"] = asdict(self.augment_policy)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("augment_policy"), dict):
            d["augment_policy"] = AugmentPolicy(**d["augment_policy"])
        return cls(**d)


def elbo_loss(probs, labels, ledger: KlLedger | None, n_train: int):
    """Mean binary cross-entropy plus the summed KL scaled by 1/n_train."""
    if n_train <= 0:
        raise ConfigError("n_train must be positive")
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    p = ops.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} and labels {y.shape} differ in shape")
    bce = -ops.mean(y * ops.log(p) + (1.0 - y) * ops.log(1.0 - p))
    if ledger is None or len(ledger) == 0:
        return bce
    return bce + ledger.total() / float(n_train)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = dict(params)
    for k, g in grads.items():
        p = params[k]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(k)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = state.v.get(k)
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


def batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    """Consecutive slices of ``order``; a trailing single sample joins the previous batch."""
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def _as_arrays(data):
    x, y = data
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"{x.shape[0]} volumes but {y.shape[0]} labels")
    bad = np.flatnonzero((y != 0) & (y != 1))
    if bad.size:
        raise ConfigError(f"sample {int(bad[0])}: label {y[bad[0]]} is not 0 or 1")
    return x, y


def predict_batch(model: Model, x: np.ndarray, seed: int = 0, chunk: int = 4,
                  T: int = DEFAULT_T) -> np.ndarray:
    """Point predictions for many volumes; see :func:`predict` for the mode rules."""
    x = np.asarray(x, dtype=np.float64)
    if model.spec.variant == "none":
        return np.concatenate([model.predict_proba(x[i:i + chunk], Rng(seed), stochastic=False)
                               for i in range(0, len(x), chunk)])
    if model.spec.head == "bernoulli_mean":
        return np.array([model.mc_samples(v, T, seed).mean() for v in x])
    # one pass per volume on the same stream as predict(), independent of chunking
    return np.array([model.predict_proba(v[None], Rng(seed))[0] for v in x])


def train(spec: NetworkSpec, data, config: TrainConfig = TrainConfig(), model: Model | None = None,
          log=None):
    """Fit ``spec`` on ``data = ((x_train, y_train), (x_val, y_val))``.

    Returns the checkpoint with the best validation accuracy (first epoch on
    ties) and a per-epoch history. ``log`` receives each epoch's record plus
    its wall-clock seconds, which stay out of the history so it is reproducible.
    """
    (xt, yt), (xv, yv) = (_as_arrays(d) for d in data)
    if len(xt) == 0 or len(xv) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    model = model or Model(spec, seed=config.seed)
    bayesian = spec.variant != "none"
    n = len(xt)
    needs_pairs = any(layer.kind == "batchnorm" for layer in spec.layers)
    if needs_pairs and n < 2:
        raise ConfigError("batch normalization needs at least 2 training samples")
    base = Rng(config.seed, (0x7A1,))
    state = AdamState()
    best = Checkpoint.from_model(model, epoch=0, metrics={}, seed=config.seed)
    best_acc, since_best = -1.0, 0
    history = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        er = base.child(epoch)
        order = er.child(0).permutation(n)
        bs = batches(n, config.batch_size, order)
        if needs_pairs:
            bs = [b for b in bs if len(b) >= 2] or [order]
        losses, kls = [], []
        for bi, idx in enumerate(bs):
            br = er.child(1 + bi)
            xb = xt[idx]
            if config.augment:
                xb = np.stack([augment(Volume(v), br.child(1000 + j), config.augment_policy).voxels
                               for j, v in enumerate(xb)])
            ledger = KlLedger() if bayesian else None
            try:
                probs, _, leaves = model.forward(xb, br, training=True, ledger=ledger, trainable=True)
                loss = elbo_loss(probs, yt[idx], ledger, n)
                grads = ad.backward(loss)
            except VoxBayesError as exc:
                raise type(exc)(f"epoch {epoch}, training samples {idx.tolist()}: {exc}") from exc
            g = {k: grads[leaf] for k, leaf in leaves.items() if leaf in grads}
            model.params = adam_step(model.params, g, state, config.learning_rate)
            losses.append(float(loss.value))
            if ledger is not None:
                kls.append(float(ledger.total().value))
        pv = predict_batch(model, xv, seed=config.seed, chunk=config.eval_batch, T=config.val_samples)
        acc = float(np.mean((pv >= 0.5) == (yv == 1)))
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_accuracy": acc}
        if kls:
            rec["kl"] = float(np.mean(kls))
        history.append(rec)
        if log is not None:
            log(dict(rec, seconds=round(time.perf_counter() - t0, 3)))
        if not math.isfinite(rec["train_loss"]):
            raise ConfigError(f"epoch {epoch}: training loss became non-finite")
        if acc > best_acc:
            best_acc, since_best = acc, 0
            best = Checkpoint.from_model(model, epoch=epoch, seed=config.seed,
                                         metrics={"val_accuracy": acc, "train_loss": rec["train_loss"]})
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                break
    return best, history


def predict(source, volume, mode: str = "deterministic", T: int = DEFAULT_T, seed: int = 0):
    """Class-1 probability (deterministic) or :class:`PredictiveSamples` (``mc``).

    Deterministic mode on a Bayesian model is one pass on a fixed stream for
    the sigmoid head, or the mean of ``T`` passes for the Bernoulli-mean head.
    """
    model = source.to_model() if isinstance(source, Checkpoint) else source
    v = np.asarray(volume.voxels if isinstance(volume, Volume) else volume, dtype=np.float64)
    if v.shape != tuple(model.spec.input_shape):
        raise ShapeError(f"volume shape {v.shape} does not match model input {tuple(model.spec.input_shape)}")
    if mode == "deterministic":
        if model.spec.variant != "none" and model.spec.head == "bernoulli_mean":
            return float(model.mc_samples(v, T, seed).mean())
        return float(model.predict_proba(v[None], Rng(seed), stochastic=model.spec.variant != "none")[0])
    if mode == "mc":
        if not model.is_stochastic:
            raise ConfigError("mc prediction needs Bayesian layers or dropout")
        if T < 1:
            raise ConfigError(f"T must be >= 1, got {T}")
        return PredictiveSamples(model.mc_samples(v, T, seed), seed, model.spec.digest()[:12])
    raise ConfigError(f"unknown prediction mode {mode!r}")
