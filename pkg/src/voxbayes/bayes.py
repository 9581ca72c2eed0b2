"""Variational layers and their KL contributions.

Each layer has a graph-level implementation (``*_nodes``) used by the model
runtime and for gradient checks, plus a plain-array entry point for direct
use. The weight prior is a standard normal throughout.

MNF layers draw a latent ``z0`` from a learnable diagonal Gaussian, push it
through a RealNVP flow to ``zK`` and scale the weight means by it (per input
unit for dense layers, per filter for conv layers). Their KL term is the
auxiliary bound

    KL(q(w|zK) || p(w)) + log q(zK) - log r(zK | w)

where ``r`` is a Gaussian over ``z0' = g(zK)`` with ``g`` a second flow and
mean/variance computed from the sampled weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ops
from .autodiff.core import Node, lift
from .errors import ConfigError, NumericalError, ShapeError
from .flows import FlowStack, flow_forward_nodes, gaussian_logpdf_nodes
from .layers import dropout

SIGMA_INIT = 0.01
LOCAL_REPARAM_VAR_FLOOR = 1e-30


def rho_for_sigma(sigma: float) -> float:
    """Inverse softplus."""
    return float(np.log(np.expm1(sigma)))


@dataclass
class GaussianPosterior:
    mu: np.ndarray
    rho: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return ops.softplus(ad.const(self.rho)).value

    @classmethod
    def init(cls, shape, fan_in: int, rng, sigma: float = SIGMA_INIT) -> "GaussianPosterior":
        mu = rng.normal(shape) * math.sqrt(2.0 / fan_in)
        return cls(mu, np.full(shape, rho_for_sigma(sigma)))


@dataclass
class AuxPosterior:
    c: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    inverse_flow: FlowStack


@dataclass
class MnfLayerParams:
    """Posterior, latent-flow and auxiliary parameters for one MNF layer.

    ``kind`` is ``"dense"`` (weights (din, dout), z over inputs) or
    ``"conv3d"`` (kernels (F, C, kx, ky, kz), z over filters).
    """

    kind: str
    posterior: GaussianPosterior
    z_mu: np.ndarray
    z_rho: np.ndarray
    flow: FlowStack
    aux: AuxPosterior

    @property
    def z_dim(self) -> int:
        return self.flow.dim

    @classmethod
    def init(cls, kind: str, shape, rng, flow_steps: int = 2,
             sigma: float = SIGMA_INIT) -> "MnfLayerParams":
        shape = tuple(shape)
        if kind == "dense":
            z_dim, other = shape[0], shape[1]
            fan_in = shape[0]
        elif kind == "conv3d":
            z_dim, other = shape[0], shape[1]
            fan_in = int(np.prod(shape[1:]))
        else:
            raise ConfigError(f"MNF layers are dense or conv3d, got {kind!r}")
        post = GaussianPosterior.init(shape, fan_in, rng.child(0), sigma)
        aux = AuxPosterior(c=rng.child(1).normal(other), b1=np.zeros(z_dim), b2=np.zeros(z_dim),
                           inverse_flow=FlowStack.init(z_dim, flow_steps, rng.child(2)))
        return cls(kind, post, np.ones(z_dim), np.full(z_dim, rho_for_sigma(sigma)),
                   FlowStack.init(z_dim, flow_steps, rng.child(3)), aux)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"mu": self.posterior.mu, "rho": self.posterior.rho,
               "z_mu": self.z_mu, "z_rho": self.z_rho,
               "aux_c": self.aux.c, "aux_b1": self.aux.b1, "aux_b2": self.aux.b2}
        out.update(self.flow.param_items("flow."))
        out.update(self.aux.inverse_flow.param_items("aux_flow."))
        return out

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        self.posterior = GaussianPosterior(arrays["mu"], arrays["rho"])
        self.z_mu, self.z_rho = arrays["z_mu"], arrays["z_rho"]
        self.aux.c, self.aux.b1, self.aux.b2 = arrays["aux_c"], arrays["aux_b1"], arrays["aux_b2"]
        self.flow.load_params(arrays, "flow.")
        self.aux.inverse_flow.load_params(arrays, "aux_flow.")

    def masks(self):
        return [s.mask for s in self.flow.steps], [s.mask for s in self.aux.inverse_flow.steps]


class KlLedger:
    """Per-pass record of each Bayesian layer's KL contribution."""

    def __init__(self):
        self.entries: dict[str, Node] = {}

    def record(self, layer_id: str, kl) -> None:
        if layer_id in self.entries:
            raise ConfigError(f"layer {layer_id!r} already recorded a KL term in this pass")
        self.entries[layer_id] = lift(kl)

    def total(self) -> Node:
        nodes = list(self.entries.values())
        if not nodes:
            return ad.const(0.0)
        out = nodes[0]
        for n in nodes[1:]:
            out = out + n
        return out

    def values(self) -> dict[str, float]:
        return {k: float(v.value) for k, v in self.entries.items()}

    def __len__(self):
        return len(self.entries)


# ---------------------------------------------------------------- mean-field Gaussian


def sample_weights_nodes(mu, rho, eps) -> Node:
    """w = mu + softplus(rho) * eps."""
    return mu + ops.softplus(rho) * eps


def kl_standard_normal_nodes(mean, sigma) -> Node:
    """Sum of 0.5 (m^2 + s^2 - 1 - ln s^2) over every weight."""
    return 0.5 * ops.sum(ops.square(mean) + ops.square(sigma) - 1.0 - 2.0 * ops.log(sigma))


def sample_reparameterized(post: GaussianPosterior, rng, eps=None) -> np.ndarray:
    eps = rng.normal(post.mu.shape) if eps is None else np.asarray(eps, dtype=np.float64)
    return post.mu + post.sigma * eps


def kl_gaussian_vs_standard_normal(post: GaussianPosterior) -> float:
    return float(kl_standard_normal_nodes(ad.const(post.mu), ops.softplus(ad.const(post.rho))).value)


def reparam_dense_nodes(x, mu, rho, bias, rng, need_kl=True):
    """Fresh weights per pass; returns (output, kl)."""
    sigma = ops.softplus(rho)
    w = mu + sigma * rng.normal(mu.shape)
    out = x @ w
    if bias is not None:
        out = out + bias
    return out, kl_standard_normal_nodes(mu, sigma) if need_kl else None


def reparam_conv3d_nodes(x, mu, rho, bias, rng, stride=1, padding="same", need_kl=True):
    sigma = ops.softplus(rho)
    w = mu + sigma * rng.normal(mu.shape)
    out = ops.conv3d(x, w, stride, padding)
    if bias is not None:
        out = out + ops.reshape(bias, (1, -1, 1, 1, 1))
    return out, kl_standard_normal_nodes(mu, sigma) if need_kl else None


# ---------------------------------------------------------------- Flipout


def _check_dense(x, mu):
    if x.shape[-1] != mu.shape[0] or len(x.shape) != 2:
        raise ShapeError(f"dense: incompatible shapes {x.shape} and {mu.shape}")


def flipout_dense_nodes(x, mu, rho, bias, rng, need_kl=True):
    """x mu + ((x * s) dW) * r with a shared dW and per-example Rademacher s, r."""
    x, mu, rho = lift(x), lift(mu), lift(rho)
    _check_dense(x, mu)
    batch = x.shape[0]
    sigma = ops.softplus(rho)
    delta = sigma * rng.normal(mu.shape)
    sign_in = rng.rademacher((batch, mu.shape[0]))
    sign_out = rng.rademacher((batch, mu.shape[1]))
    out = x @ mu + ((x * sign_in) @ delta) * sign_out
    if bias is not None:
        out = out + bias
    return out, kl_standard_normal_nodes(mu, sigma) if need_kl else None


def flipout_conv3d_nodes(x, mu, rho, bias, rng, stride=1, padding="same", need_kl=True):
    """Flipout with signs per example and per channel, shared across voxels."""
    x, mu, rho = lift(x), lift(mu), lift(rho)
    batch = x.shape[0]
    sigma = ops.softplus(rho)
    delta = sigma * rng.normal(mu.shape)
    sign_in = rng.rademacher((batch, mu.shape[1], 1, 1, 1))
    sign_out = rng.rademacher((batch, mu.shape[0], 1, 1, 1))
    out = ops.conv3d(x, mu, stride, padding) + ops.conv3d(x * sign_in, delta, stride, padding) * sign_out
    if bias is not None:
        out = out + ops.reshape(bias, (1, -1, 1, 1, 1))
    return out, kl_standard_normal_nodes(mu, sigma) if need_kl else None


def flipout_dense_forward(x, post: GaussianPosterior, rng) -> np.ndarray:
    out, _ = flipout_dense_nodes(ad.const(x), ad.const(post.mu), ad.const(post.rho), None, rng,
                                need_kl=False)
    return out.value


# ---------------------------------------------------------------- local reparameterization


def _masked_noise(var, rng):
    # the floor keeps sqrt differentiable; zero-variance units stay noise-free
    return rng.normal(var.shape) * (var.value > 0.0)


def local_reparam_dense_nodes(x, mu, rho, bias, rng, need_kl=True):
    """Sample activations from N(x mu, x^2 sigma^2) directly."""
    x, mu, rho = lift(x), lift(mu), lift(rho)
    _check_dense(x, mu)
    sigma = ops.softplus(rho)
    mean = x @ mu
    var = ops.square(x) @ ops.square(sigma)
    out = mean + ops.sqrt(var + LOCAL_REPARAM_VAR_FLOOR) * _masked_noise(var, rng)
    if bias is not None:
        out = out + bias
    return out, kl_standard_normal_nodes(mu, sigma) if need_kl else None


def local_reparam_conv3d_nodes(x, mu, rho, bias, rng, stride=1, padding="same", need_kl=True):
    x, mu, rho = lift(x), lift(mu), lift(rho)
    sigma = ops.softplus(rho)
    mean = ops.conv3d(x, mu, stride, padding)
    var = ops.conv3d(ops.square(x), ops.square(sigma), stride, padding)
    out = mean + ops.sqrt(var + LOCAL_REPARAM_VAR_FLOOR) * _masked_noise(var, rng)
    if bias is not None:
        out = out + ops.reshape(bias, (1, -1, 1, 1, 1))
    return out, kl_standard_normal_nodes(mu, sigma) if need_kl else None


def local_reparam_dense_forward(x, post: GaussianPosterior, rng) -> np.ndarray:
    out, _ = local_reparam_dense_nodes(ad.const(x), ad.const(post.mu), ad.const(post.rho), None, rng,
                                      need_kl=False)
    return out.value


# ---------------------------------------------------------------- MC dropout


def mc_dropout_forward(x, rate: float, rng, mode: str = "always_on"):
    """Inverted dropout that stays active outside training."""
    if mode != "always_on":
        raise ConfigError(f"MC dropout only supports mode 'always_on', got {mode!r}")
    out = dropout(lift(x), rate, rng, active=True)
    return out.value if not isinstance(x, Node) else out


# ---------------------------------------------------------------- MNF


def _z_view(z, kind):
    # dense weights are (din, dout) with z over rows; conv kernels have z over filters
    return ops.reshape(z, (-1, 1)) if kind == "dense" else ops.reshape(z, (-1, 1, 1, 1, 1))


def _aux_features(w, c, kind):
    """tanh of the c-weighted average of the sampled weights, one per z coordinate."""
    if kind == "dense":
        return ops.tanh((w @ ops.reshape(c, (-1, 1))) / float(w.shape[1]))
    n_other = float(np.prod(w.shape[1:]))
    weighted = w * ops.reshape(c, (1, -1, 1, 1, 1))
    return ops.tanh(ops.sum(weighted, axis=(1, 2, 3, 4)) / n_other)


def mnf_sample_nodes(p: dict, kind: str, flow_masks, rng, z_override=None):
    """Draw (w, z0, zK, log_det_fwd) for one pass."""
    dim = p["z_mu"].shape[0]
    if z_override is not None:
        zk = lift(np.asarray(z_override, dtype=np.float64))
        z0, log_det = zk, ad.const(0.0)
    else:
        z0 = p["z_mu"] + ops.softplus(p["z_rho"]) * rng.normal(dim)
        zk, log_det = flow_forward_nodes(z0, flow_masks, p["flow"])
    sigma = ops.softplus(p["rho"])
    w = _z_view(zk, kind) * p["mu"] + sigma * rng.normal(p["mu"].shape)
    return w, z0, zk, log_det


def kl_mnf_bound_nodes(p: dict, kind: str, aux_masks, w, z0, zk, log_det_fwd) -> Node:
    """Single-sample KL(q(w|zK)||p(w)) + log q(zK) - log r(zK|w)."""
    sigma = ops.softplus(p["rho"])
    kl_w = kl_standard_normal_nodes(_z_view(zk, kind) * p["mu"], sigma)
    log_q0 = gaussian_logpdf_nodes(z0, p["z_mu"], ops.square(ops.softplus(p["z_rho"])))
    log_q_zk = log_q0 - log_det_fwd
    h = _aux_features(w, p["aux_c"], kind)
    h = ops.reshape(h, (-1,))
    mean_r = p["aux_b1"] * h
    var_r = 2.0 * ops.sigmoid(p["aux_b2"] * h)
    z0_r, log_det_r = flow_forward_nodes(zk, aux_masks, p["aux_flow"])
    log_r = gaussian_logpdf_nodes(z0_r, mean_r, var_r) + log_det_r
    bound = kl_w + log_q_zk - log_r
    if not np.isfinite(bound.value).all():
        raise NumericalError("MNF KL bound is not finite")
    return bound


def mnf_param_nodes(params: MnfLayerParams, leaf_fn=ad.const) -> dict:
    """Wrap every MNF array as a node; flows become lists of per-step dicts."""
    arr = params.arrays()
    nodes = {k: leaf_fn(v) for k, v in arr.items() if "flow." not in k}
    nodes["flow"] = [{n: leaf_fn(v) for n, v in s.params.items()} for s in params.flow.steps]
    nodes["aux_flow"] = [{n: leaf_fn(v) for n, v in s.params.items()}
                         for s in params.aux.inverse_flow.steps]
    return nodes


def mnf_dense_nodes(x, p: dict, masks, bias, rng, z_override=None, need_kl=True):
    """Returns (output, kl_bound, sample) with sample = (w, z0, zK, log_det)."""
    x = lift(x)
    flow_masks, aux_masks = masks
    if p["z_mu"].shape[0] != p["mu"].shape[0]:
        raise ConfigError(f"MNF dense: flow dim {p['z_mu'].shape[0]} != input width {p['mu'].shape[0]}")
    _check_dense(x, p["mu"])
    sample = mnf_sample_nodes(p, "dense", flow_masks, rng, z_override)
    out = x @ sample[0]
    if bias is not None:
        out = out + bias
    kl = kl_mnf_bound_nodes(p, "dense", aux_masks, *sample) if need_kl else None
    return out, kl, sample


def mnf_conv3d_nodes(x, p: dict, masks, bias, rng, stride=1, padding="same", z_override=None,
                     need_kl=True):
    flow_masks, aux_masks = masks
    if p["z_mu"].shape[0] != p["mu"].shape[0]:
        raise ConfigError(f"MNF conv3d: flow dim {p['z_mu'].shape[0]} != filter count {p['mu'].shape[0]}")
    sample = mnf_sample_nodes(p, "conv3d", flow_masks, rng, z_override)
    out = ops.conv3d(x, sample[0], stride, padding)
    if bias is not None:
        out = out + ops.reshape(bias, (1, -1, 1, 1, 1))
    kl = kl_mnf_bound_nodes(p, "conv3d", aux_masks, *sample) if need_kl else None
    return out, kl, sample


def mnf_dense_forward(x, params: MnfLayerParams, rng, ledger: KlLedger | None = None,
                      layer_id: str = "mnf_dense", z_override=None) -> np.ndarray:
    if params.z_dim != np.shape(x)[-1]:
        raise ConfigError(f"MNF dense: flow dim {params.z_dim} != input width {np.shape(x)[-1]}")
    out, kl, _ = mnf_dense_nodes(ad.const(x), mnf_param_nodes(params), params.masks(), None,
                                 rng, z_override, need_kl=ledger is not None)
    if ledger is not None:
        ledger.record(layer_id, kl)
    return out.value


def mnf_conv3d_forward(x, params: MnfLayerParams, rng, ledger: KlLedger | None = None,
                       layer_id: str = "mnf_conv3d", z_override=None, padding="same") -> np.ndarray:
    out, kl, _ = mnf_conv3d_nodes(ad.const(x), mnf_param_nodes(params), params.masks(), None,
                                  rng, padding=padding, z_override=z_override,
                                  need_kl=ledger is not None)
    if ledger is not None:
        ledger.record(layer_id, kl)
    return out.value


def kl_mnf_bound(params: MnfLayerParams, w_sample, z0, zk, log_det_fwd) -> float:
    p = mnf_param_nodes(params)
    return float(kl_mnf_bound_nodes(p, params.kind, params.masks()[1], ad.const(w_sample),
                                    ad.const(z0), ad.const(zk), ad.const(log_det_fwd)).value)
