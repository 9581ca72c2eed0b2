"""Deterministic layers, network specs and the tuned reference architecture."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.core import Node
from .autodiff.ops import conv_output_shape
from .errors import ConfigError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

BAYES_VARIANTS = ("none", "reparam", "local_reparam", "flipout", "mnf")
HEADS = ("sigmoid", "bernoulli_mean")
BASE_KINDS = ("conv3d", "maxpool3d", "batchnorm", "relu", "dense", "dropout",
              "global_maxpool", "sigmoid_head")
BAYES_KINDS = tuple(f"{v}_{k}" for v in BAYES_VARIANTS[1:] for k in ("conv3d", "dense"))


@dataclass
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BASE_KINDS + BAYES_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        rate = self.hyper.get("rate")
        if self.kind == "dropout" and not (0.0 <= rate < 1.0):
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")

    @property
    def base_kind(self) -> str:
        return _split_kind(self.kind)[1]

    @property
    def variant(self) -> str:
        return _split_kind(self.kind)[0]


def _split_kind(kind: str) -> tuple[str, str]:
    for base in ("conv3d", "dense"):
        prefix = kind[: -len(base) - 1]
        if kind.endswith("_" + base) and prefix in BAYES_VARIANTS[1:]:
            return prefix, base
    return "none", kind


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    head: str = "sigmoid"

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "head": self.head,
                "layers": [asdict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = [LayerSpec(x["kind"], _tuplify(x["hyper"])) for x in d["layers"]]
        return cls(layers, tuple(d["input_shape"]), d.get("head", "sigmoid"))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def variant(self) -> str:
        for layer in self.layers:
            if layer.variant != "none":
                return layer.variant
        return "none"

    @property
    def has_dropout(self) -> bool:
        return any(layer.kind == "dropout" and layer.hyper["rate"] > 0 for layer in self.layers)

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape after every layer (input first)."""
        return infer_shapes(self)


def _tuplify(hyper):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in hyper.items()}


def infer_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    shape: tuple[int, ...] = (1,) + tuple(spec.input_shape)
    out = [shape]
    for i, layer in enumerate(spec.layers):
        kind, h = layer.base_kind, layer.hyper
        if kind == "conv3d":
            if len(shape) != 4:
                raise ShapeError(f"layer {i} conv3d: needs (C, X, Y, Z) input, got {shape}")
            spatial = conv_output_shape(shape[1:], h["kernel"], h.get("stride", 1), h["padding"])
            shape = (h["filters"],) + spatial
        elif kind == "maxpool3d":
            w = h["window"]
            if any(w > n for n in shape[1:]):
                raise ShapeError(f"layer {i} maxpool3d: window {w} exceeds extents {shape[1:]}")
            shape = (shape[0],) + tuple(n // w for n in shape[1:])
        elif kind == "global_maxpool":
            shape = (shape[0],)
        elif kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"layer {i} dense: needs a flat input, got {shape}")
            shape = (h["units"],)
        out.append(shape)
    if out[-1] != (1,):
        raise ShapeError(f"network must end in a single unit, got {out[-1]}")
    return out


def build_reference_model(input_shape=(32, 32, 16), bayes_variant: str = "none",
                          head: str = "sigmoid", filters: int = 128,
                          dense_units: int = 256, dropout: float = 0.2) -> NetworkSpec:
    """Three conv blocks, global max pooling, a dense layer, dropout and a sigmoid unit.

    Each block is conv3d (3x3x3, same padding, ReLU) -> maxpool3d(2) ->
    batchnorm. Non-``none`` variants swap conv3d/dense for their Bayesian
    counterparts; the layer count never changes.
    """
    if bayes_variant not in BAYES_VARIANTS:
        raise ConfigError(f"unknown bayes variant {bayes_variant!r}")
    if head not in HEADS:
        raise ConfigError(f"unknown head {head!r}")
    input_shape = tuple(int(n) for n in input_shape)
    if len(input_shape) != 3:
        raise ShapeError(f"input shape must have 3 extents, got {input_shape}")
    if min(input_shape) < 8:
        raise ShapeError(f"input extents {input_shape} too small for three 2x pooling stages")

    def swap(kind):
        return kind if bayes_variant == "none" else f"{bayes_variant}_{kind}"

    layers = []
    for _ in range(3):
        layers += [
            LayerSpec(swap("conv3d"), {"filters": filters, "kernel": (3, 3, 3), "stride": 1,
                                       "padding": "same", "activation": "relu"}),
            LayerSpec("maxpool3d", {"window": 2}),
            LayerSpec("batchnorm", {}),
        ]
    layers += [
        LayerSpec("global_maxpool", {}),
        LayerSpec(swap("dense"), {"units": dense_units, "activation": "relu"}),
        LayerSpec("dropout", {"rate": dropout}),
        LayerSpec(swap("dense"), {"units": 1, "activation": None}),
        LayerSpec("sigmoid_head", {"mode": head}),
    ]
    spec = NetworkSpec(layers, input_shape, head)
    infer_shapes(spec)
    return spec


# ---------------------------------------------------------------- layer functions


def conv3d(x, kernels, bias=None, stride=1, padding="same") -> Node:
    """Batched 3D cross-correlation plus optional per-filter bias."""
    out = ops.conv3d(x, kernels, stride, padding)
    if bias is not None:
        out = out + ops.reshape(bias, (1, -1, 1, 1, 1) if out.value.ndim == 5 else (-1, 1, 1, 1))
    return out


def maxpool3d(x, window=2) -> Node:
    return ops.maxpool3d(x, window)


def dense(x, weights, bias=None) -> Node:
    out = ops.matmul(x, weights)
    return out if bias is None else out + bias


def batchnorm(x, gamma, beta, state: dict, mode: str) -> Node:
    """Per-channel normalization over every axis except axis 1.

    ``state`` holds ``running_mean`` and ``running_var`` and is updated in
    place in train mode.
    """
    xv = x.value if isinstance(x, Node) else np.asarray(x)
    axes = (0,) + tuple(range(2, xv.ndim))
    bshape = (1, -1) + (1,) * (xv.ndim - 2)
    g = ops.reshape(gamma, bshape)
    b = ops.reshape(beta, bshape)
    if mode == "train":
        if xv.shape[0] < 2:
            raise ConfigError("batchnorm in train mode needs a batch of at least 2")
        mu = ops.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = ops.mean(ops.square(centered), axis=axes, keepdims=True)
        out = centered / ops.sqrt(var + BN_EPS) * g + b
        state["running_mean"] = BN_MOMENTUM * state["running_mean"] + (1 - BN_MOMENTUM) * mu.value.reshape(-1)
        state["running_var"] = BN_MOMENTUM * state["running_var"] + (1 - BN_MOMENTUM) * var.value.reshape(-1)
        return out
    if mode != "infer":
        raise ConfigError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    mean = state["running_mean"].reshape(bshape)
    scale = 1.0 / np.sqrt(state["running_var"].reshape(bshape) + BN_EPS)
    return (x - mean) * scale * g + b


def dropout(x, rate: float, rng, active: bool) -> Node:
    """Inverted dropout; the identity when inactive or ``rate`` is 0."""
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    shape = x.value.shape if isinstance(x, Node) else np.shape(x)
    keep = rng.bernoulli(1.0 - rate, shape) / (1.0 - rate)
    return x * keep


def global_maxpool(x) -> Node:
    return ops.max(x, axis=(2, 3, 4))
