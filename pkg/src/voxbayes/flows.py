"""RealNVP affine coupling flows over a latent vector.

Each coupling step keeps the coordinates where its binary mask is 1 and
transforms the rest as ``z * exp(s) + t``, with ``s`` and ``t`` produced by
small tanh networks fed the kept coordinates. Log-scales are squashed by a
further tanh so every step's Jacobian stays within ``exp(+-1)`` per axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ops
from .errors import ShapeError

HIDDEN = 16
NET_KEYS = ("s_w1", "s_b1", "s_w2", "s_b2", "t_w1", "t_b1", "t_w2", "t_b2")


def alternating_mask(dim: int, step: int) -> np.ndarray:
    """Mask for coupling step ``step``: (1, 0, 1, ...) flipped on odd steps.

    A one-dimensional flow has nothing to condition on, so every step's mask
    is all zeros and the step reduces to a learned affine map.
    """
    if dim == 1:
        return np.zeros(1)
    return ((np.arange(dim) + step + 1) % 2).astype(np.float64)


@dataclass
class CouplingStep:
    mask: np.ndarray
    params: dict[str, np.ndarray]

    @property
    def dim(self) -> int:
        return self.mask.shape[0]


@dataclass
class FlowStack:
    dim: int
    steps: list[CouplingStep] = field(default_factory=list)

    @classmethod
    def init(cls, dim: int, n_steps: int = 2, rng=None, hidden: int = HIDDEN,
             identity: bool = True) -> "FlowStack":
        """Fresh flow. With ``identity`` the output layers start at zero."""
        steps = []
        for k in range(n_steps):
            p = {}
            for head in ("s", "t"):
                w1 = (rng.normal((dim, hidden)) / math.sqrt(dim)) if rng is not None \
                    else np.zeros((dim, hidden))
                p[f"{head}_w1"] = w1
                p[f"{head}_b1"] = np.zeros(hidden)
                if identity or rng is None:
                    p[f"{head}_w2"] = np.zeros((hidden, dim))
                    p[f"{head}_b2"] = np.zeros(dim)
                else:
                    p[f"{head}_w2"] = rng.normal((hidden, dim)) * 0.3
                    p[f"{head}_b2"] = rng.normal(dim) * 0.3
            steps.append(CouplingStep(alternating_mask(dim, k), p))
        return cls(dim, steps)

    def param_items(self, prefix: str = ""):
        for k, step in enumerate(self.steps):
            for name in NET_KEYS:
                yield f"{prefix}{k}.{name}", step.params[name]

    def load_params(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, step in enumerate(self.steps):
            for name in NET_KEYS:
                step.params[name] = arrays[f"{prefix}{k}.{name}"]


def _check_dim(z, dim):
    n = z.shape[-1] if z.ndim else 0
    if z.ndim != 1 or n != dim:
        raise ShapeError(f"flow: expected a vector of length {dim}, got shape {z.shape}")


def _coupling_terms(z_kept, mask, p):
    """Log-scale and shift for the transformed coordinates (row vector input)."""
    free = 1.0 - mask
    hs = ops.tanh(z_kept @ p["s_w1"] + p["s_b1"])
    s = ops.tanh(hs @ p["s_w2"] + p["s_b2"]) * free
    ht = ops.tanh(z_kept @ p["t_w1"] + p["t_b1"])
    t = (ht @ p["t_w2"] + p["t_b2"]) * free
    return s, t


def coupling_forward(z, mask, p):
    """One coupling step on graph nodes. Returns (z', log|det|)."""
    z2 = ops.reshape(z, (1, mask.shape[0]))
    kept = z2 * mask
    s, t = _coupling_terms(kept, mask, p)
    out = kept + (z2 * ops.exp(s) + t) * (1.0 - mask)
    return ops.reshape(out, (mask.shape[0],)), ops.sum(s)


def coupling_inverse(z, mask, p):
    z2 = ops.reshape(z, (1, mask.shape[0]))
    kept = z2 * mask
    s, t = _coupling_terms(kept, mask, p)
    out = kept + ((z2 - t) * ops.exp(-s)) * (1.0 - mask)
    return ops.reshape(out, (mask.shape[0],)), -ops.sum(s)


def flow_forward_nodes(z0, masks, step_params):
    """Push ``z0`` through every step; ``step_params`` are dicts of nodes."""
    z, log_det = z0, None
    for mask, p in zip(masks, step_params):
        z, ld = coupling_forward(z, mask, p)
        log_det = ld if log_det is None else log_det + ld
    if log_det is None:
        log_det = ad.const(0.0)
    return z, log_det


def flow_inverse_nodes(zk, masks, step_params):
    z, log_det = zk, None
    for mask, p in zip(reversed(masks), reversed(step_params)):
        z, ld = coupling_inverse(z, mask, p)
        log_det = ld if log_det is None else log_det + ld
    if log_det is None:
        log_det = ad.const(0.0)
    return z, log_det


def _const_params(flow: FlowStack):
    return [{k: ad.const(v) for k, v in s.params.items()} for s in flow.steps]


def flow_forward(z0, flow: FlowStack):
    """zK = f_K(...f_1(z0)) and the summed log-determinant of the Jacobians."""
    z0 = np.asarray(z0, dtype=np.float64)
    _check_dim(z0, flow.dim)
    zk, ld = flow_forward_nodes(ad.const(z0), [s.mask for s in flow.steps], _const_params(flow))
    return zk.value, float(ld.value)


def flow_inverse(zk, flow: FlowStack):
    """Exact inverse of :func:`flow_forward`; log_det is that of the inverse map."""
    zk = np.asarray(zk, dtype=np.float64)
    _check_dim(zk, flow.dim)
    z0, ld = flow_inverse_nodes(ad.const(zk), [s.mask for s in flow.steps], _const_params(flow))
    return z0.value, float(ld.value)


def standard_normal_logpdf(z) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float(-0.5 * np.sum(z * z) - 0.5 * z.size * math.log(2.0 * math.pi))


def flow_log_density(zk, flow: FlowStack) -> float:
    """log q(zK) for a standard-normal base pushed through ``flow``."""
    z0, ld_inv = flow_inverse(zk, flow)
    # the forward log-det at z0 is the negation of the inverse log-det at zK
    return standard_normal_logpdf(z0) + ld_inv


def gaussian_logpdf_nodes(z, mean, var):
    """Diagonal Gaussian log-density as a graph node."""
    diff = z - mean
    n = z.shape[-1]
    return (-0.5 * ops.sum(ops.square(diff) / var) - 0.5 * ops.sum(ops.log(var))
            - 0.5 * n * math.log(2.0 * math.pi))
