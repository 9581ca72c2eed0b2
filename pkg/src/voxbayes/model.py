"""Parameter storage, forward execution and checkpoint files for a NetworkSpec."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import bayes
from .autodiff import ops
from .bayes import KlLedger, MnfLayerParams
from .errors import ConfigError, FormatError, ShapeError
from .flows import alternating_mask
from .layers import NetworkSpec, batchnorm, dropout, global_maxpool
from .rng import Rng

FORMAT_VERSION = 1
_BIN_MAGIC = b"VXBW"


def layer_id(index: int, kind: str) -> str:
    return f"{index:02d}.{kind}"


class Model:
    """Trainable parameters plus batch-norm running statistics for one spec."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, flow_steps: int = 2):
        self.spec = spec
        self.flow_steps = flow_steps
        self.params: dict[str, np.ndarray] = {}
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self._init(Rng(seed, (0xC0FFEE,)))

    # ------------------------------------------------------------ init

    def _init(self, rng: Rng):
        shapes = self.spec.shapes()
        for i, layer in enumerate(self.spec.layers):
            lid = layer_id(i, layer.kind)
            r = rng.child(i)
            in_shape = shapes[i]
            base, variant, h = layer.base_kind, layer.variant, layer.hyper
            if base == "conv3d":
                wshape = (h["filters"], in_shape[0]) + tuple(h["kernel"])
                self._init_weights(lid, variant, "conv3d", wshape, int(np.prod(wshape[1:])), r)
                self.params[f"{lid}/bias"] = np.zeros(h["filters"])
            elif base == "dense":
                wshape = (in_shape[0], h["units"])
                self._init_weights(lid, variant, "dense", wshape, in_shape[0], r)
                self.params[f"{lid}/bias"] = np.zeros(h["units"])
            elif base == "batchnorm":
                c = in_shape[0]
                self.params[f"{lid}/gamma"] = np.ones(c)
                self.params[f"{lid}/beta"] = np.zeros(c)
                self.state[lid] = {"running_mean": np.zeros(c), "running_var": np.ones(c)}

    def _init_weights(self, lid, variant, kind, wshape, fan_in, r):
        if variant == "none":
            self.params[f"{lid}/w"] = r.normal(wshape) * math.sqrt(2.0 / fan_in)
        elif variant == "mnf":
            mp = MnfLayerParams.init(kind, wshape, r, self.flow_steps)
            for k, v in mp.arrays().items():
                self.params[f"{lid}/{k}"] = v
        else:
            post = bayes.GaussianPosterior.init(wshape, fan_in, r)
            self.params[f"{lid}/mu"] = post.mu
            self.params[f"{lid}/rho"] = post.rho

    # ------------------------------------------------------------ introspection

    @property
    def is_stochastic(self) -> bool:
        """True when repeated inference passes can differ."""
        return self.spec.variant != "none" or self.spec.has_dropout

    def layer_params(self, lid: str) -> dict[str, np.ndarray]:
        pre = lid + "/"
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def mnf_params(self, index: int) -> MnfLayerParams:
        layer = self.spec.layers[index]
        lid = layer_id(index, layer.kind)
        arrays = self.layer_params(lid)
        kind = layer.base_kind
        mp = MnfLayerParams.init(kind, arrays["mu"].shape, Rng(0), self.flow_steps)
        mp.load(arrays)
        return mp

    # ------------------------------------------------------------ forward

    def forward(self, x, rng: Rng, training: bool = False, stochastic: bool = True,
                ledger: KlLedger | None = None, trainable: bool = False,
                z_override: dict | None = None):
        """Class-1 probabilities for a batch (B, X, Y, Z) or (B, 1, X, Y, Z).

        Returns ``(probs, logits, leaves)`` where ``leaves`` maps parameter
        keys to graph leaves (trainable only when ``trainable``). Bayesian
        layers always sample from ``rng``; dropout is active in training and,
        for models without Bayesian layers, in stochastic inference.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 4:
            x = x[:, None]
        if x.shape[1:] != (1,) + tuple(self.spec.input_shape):
            raise ShapeError(f"input shape {x.shape[2:]} does not match model input "
                             f"{tuple(self.spec.input_shape)}")
        make = ad.leaf if trainable else ad.const
        leaves = {k: make(v, name=k) for k, v in self.params.items()}
        need_kl = ledger is not None
        mc_dropout = self.spec.variant == "none"
        h = ad.const(x)
        logits = None
        for i, layer in enumerate(self.spec.layers):
            lid = layer_id(i, layer.kind)
            r = rng.child(i)
            base, variant, hy = layer.base_kind, layer.variant, layer.hyper
            p = {k[len(lid) + 1:]: v for k, v in leaves.items() if k.startswith(lid + "/")}
            if base in ("conv3d", "dense"):
                h, kl = self._weighted(h, base, variant, hy, p, r, need_kl,
                                       None if z_override is None else z_override.get(i))
                if kl is not None:
                    ledger.record(lid, kl)
                if hy.get("activation") == "relu":
                    h = ops.relu(h)
            elif base == "maxpool3d":
                h = ops.maxpool3d(h, hy["window"])
            elif base == "batchnorm":
                h = batchnorm(h, p["gamma"], p["beta"], self.state[lid],
                              "train" if training else "infer")
            elif base == "relu":
                h = ops.relu(h)
            elif base == "global_maxpool":
                h = global_maxpool(h)
            elif base == "dropout":
                h = dropout(h, hy["rate"], r, active=training or (stochastic and mc_dropout))
            elif base == "sigmoid_head":
                logits = ops.reshape(h, (h.shape[0],))
                h = ops.sigmoid(logits)
            else:
                raise ConfigError(f"unsupported layer kind {layer.kind!r}")
        return h, logits, leaves

    def _weighted(self, h, base, variant, hy, p, r, need_kl, z_override):
        conv = base == "conv3d"
        stride, padding = hy.get("stride", 1), hy.get("padding", "same")
        if variant == "none":
            if conv:
                out = ops.conv3d(h, p["w"], stride, padding) + ops.reshape(p["bias"], (1, -1, 1, 1, 1))
            else:
                out = h @ p["w"] + p["bias"]
            return out, None
        if variant == "mnf":
            fm = [alternating_mask(p["z_mu"].shape[0], k) for k in range(self.flow_steps)]
            p = dict(p)
            p["flow"] = _flow_nodes(p, "flow.", self.flow_steps)
            p["aux_flow"] = _flow_nodes(p, "aux_flow.", self.flow_steps)
            masks = (fm, fm)
            if conv:
                out, kl, _ = bayes.mnf_conv3d_nodes(h, p, masks, p["bias"], r, stride, padding,
                                                    z_override=z_override, need_kl=need_kl)
            else:
                out, kl, _ = bayes.mnf_dense_nodes(h, p, masks, p["bias"], r,
                                                   z_override=z_override, need_kl=need_kl)
            return out, kl
        fn = {
            ("reparam", True): bayes.reparam_conv3d_nodes,
            ("reparam", False): bayes.reparam_dense_nodes,
            ("flipout", True): bayes.flipout_conv3d_nodes,
            ("flipout", False): bayes.flipout_dense_nodes,
            ("local_reparam", True): bayes.local_reparam_conv3d_nodes,
            ("local_reparam", False): bayes.local_reparam_dense_nodes,
        }[(variant, conv)]
        extra = {"stride": stride, "padding": padding} if conv else {}
        return fn(h, p["mu"], p["rho"], p["bias"], r, need_kl=need_kl, **extra)

    def predict_proba(self, x, rng: Rng, stochastic: bool = True) -> np.ndarray:
        probs, _, _ = self.forward(x, rng, training=False, stochastic=stochastic)
        return probs.value

    def mc_samples(self, volume, T: int, seed: int) -> np.ndarray:
        """T independent stochastic passes; pass ``t`` uses stream (seed, t)."""
        x = np.asarray(volume, dtype=np.float64)[None]
        base = Rng(seed)
        return np.array([self.predict_proba(x, base.child(t))[0] for t in range(T)])

    # ------------------------------------------------------------ persistence

    def arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        for lid, st in self.state.items():
            for k, v in st.items():
                out[f"state:{lid}/{k}"] = v
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k.startswith("state:"):
                lid, name = k[len("state:"):].split("/", 1)
                self.state.setdefault(lid, {})[name] = v
            else:
                if k in self.params and self.params[k].shape != v.shape:
                    raise ShapeError(f"parameter {k}: stored shape {v.shape} != {self.params[k].shape}")
                self.params[k] = v

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays().items()}


def _flow_nodes(p, prefix, n_steps):
    return [{name: p[f"{prefix}{k}.{name}"] for name in
             ("s_w1", "s_b1", "s_w2", "s_b2", "t_w1", "t_b1", "t_w2", "t_b2")}
            for k in range(n_steps)]


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    """A model snapshot plus its versioned manifest."""

    spec: NetworkSpec
    arrays: dict[str, np.ndarray]
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    seed: int = 0
    flow_steps: int = 2
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, **kw) -> "Checkpoint":
        return cls(model.spec, model.copy_arrays(), flow_steps=model.flow_steps, **kw)

    def to_model(self) -> Model:
        model = Model(self.spec, seed=self.seed, flow_steps=self.flow_steps)
        model.load_arrays({k: v.copy() for k, v in self.arrays.items()})
        return model

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "voxbayes_version": __version__,
            "spec": self.spec.to_dict(),
            "spec_hash": self.spec.digest(),
            "epoch": self.epoch,
            "metrics": self.metrics,
            "seed": self.seed,
            "flow_steps": self.flow_steps,
            "extra": self.extra,
            "arrays_file": "checkpoint.bin",
        }

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "checkpoint.json").write_text(
            json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (directory / "checkpoint.bin").write_bytes(pack_arrays(self.arrays))
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        manifest = json.loads((directory / "checkpoint.json").read_text(encoding="utf-8"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
        spec = NetworkSpec.from_dict(manifest["spec"])
        if spec.digest() != manifest["spec_hash"]:
            raise FormatError("checkpoint spec hash mismatch")
        arrays = unpack_arrays((directory / manifest["arrays_file"]).read_bytes())
        return cls(spec, arrays, manifest["epoch"], manifest["metrics"], manifest["seed"],
                   manifest.get("flow_steps", 2), manifest.get("extra", {}))


def pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    """Length-prefixed key index followed by little-endian float64 payloads."""
    parts = [_BIN_MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for key in sorted(arrays):
        arr = np.asarray(arrays[key], dtype="<f8", order="C")
        kb = key.encode("utf-8")
        parts.append(struct.pack("<I", len(kb)) + kb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def unpack_arrays(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != _BIN_MAGIC:
        raise FormatError("not a voxbayes array file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported array file version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            key = blob[pos:pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 8 * n > len(blob):
                raise FormatError(f"array {key!r} is truncated")
            out[key] = np.frombuffer(blob, "<f8", n, pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise FormatError(f"array file is truncated: {exc}") from None
    return out
