import math

import numpy as np
import pytest

from gradutil import grad_error
from voxbayes import autodiff as ad
from voxbayes import bayes
from voxbayes.autodiff import ops
from voxbayes.bayes import (GaussianPosterior, KlLedger, MnfLayerParams, flipout_dense_forward,
                            kl_gaussian_vs_standard_normal, kl_mnf_bound, local_reparam_dense_forward,
                            mc_dropout_forward, mnf_conv3d_forward, mnf_dense_forward,
                            mnf_param_nodes, sample_reparameterized)
from voxbayes.errors import ConfigError, ShapeError
from voxbayes.flows import FlowStack, flow_inverse
from voxbayes.rng import Rng


def _post(shape, seed, sigma=None):
    r = np.random.default_rng(seed)
    mu = r.normal(size=shape)
    rho = r.uniform(-2.0, 0.5, size=shape) if sigma is None else np.full(shape, bayes.rho_for_sigma(sigma))
    return GaussianPosterior(mu, rho)


def _random_mnf(kind, shape, seed, steps=2):
    p = MnfLayerParams.init(kind, shape, Rng(seed), steps, sigma=0.3)
    r = np.random.default_rng(seed + 1)
    p.z_mu = 1.0 + 0.2 * r.normal(size=p.z_mu.shape)
    p.z_rho = np.full(p.z_mu.shape, bayes.rho_for_sigma(0.2))
    p.aux.b1 = r.normal(size=p.aux.b1.shape)
    p.aux.b2 = r.normal(size=p.aux.b2.shape)
    p.flow = FlowStack.init(p.z_dim, steps, Rng(seed, (5,)), identity=False)
    p.aux.inverse_flow = FlowStack.init(p.z_dim, steps, Rng(seed, (6,)), identity=False)
    return p


# ---------------------------------------------------------------- sampling examples


def test_zero_sigma_sample_is_the_mean():
    post = _post((3, 2), 0)
    post.rho[:] = -1000.0
    np.testing.assert_array_equal(sample_reparameterized(post, Rng(1)), post.mu)


def test_forced_epsilon():
    post = GaussianPosterior(np.array([1.0, 2.0]), np.full(2, bayes.rho_for_sigma(0.5)))
    w = sample_reparameterized(post, Rng(0), eps=np.array([1.0, -2.0]))
    np.testing.assert_allclose(w, [1.5, 1.0], atol=1e-12)


def test_sampling_is_reproducible():
    post = _post((4, 3), 2)
    np.testing.assert_array_equal(sample_reparameterized(post, Rng(9)), sample_reparameterized(post, Rng(9)))


def test_kl_standard_posterior_is_zero():
    post = GaussianPosterior(np.zeros(5), np.full(5, bayes.rho_for_sigma(1.0)))
    assert kl_gaussian_vs_standard_normal(post) == pytest.approx(0.0, abs=1e-12)


def test_kl_closed_form_single_weight():
    # mu = 1, sigma = 1: KL = 0.5 (1 + 1 - 1 - 0) = 0.5
    post = GaussianPosterior(np.array([1.0]), np.array([bayes.rho_for_sigma(1.0)]))
    assert kl_gaussian_vs_standard_normal(post) == pytest.approx(0.5, abs=1e-12)


def test_kl_matches_monte_carlo_on_random_posteriors():
    n = 100_000
    for seed in range(20):
        post = _post(5, seed)
        sigma = post.sigma
        eps = np.random.default_rng(1000 + seed).normal(size=(n, 5))
        w = post.mu + sigma * eps
        log_q = np.sum(-0.5 * eps ** 2 - np.log(sigma), axis=1)
        log_p = np.sum(-0.5 * w ** 2, axis=1)
        est = log_q - log_p
        se = est.std(ddof=1) / math.sqrt(n)
        assert abs(est.mean() - kl_gaussian_vs_standard_normal(post)) < 3 * se + 1e-12, seed


def test_flipout_zero_sigma_equals_deterministic_matmul():
    x = np.random.default_rng(0).normal(size=(4, 3))
    post = _post((3, 2), 1)
    post.rho[:] = -1000.0
    np.testing.assert_allclose(flipout_dense_forward(x, post, Rng(3)), x @ post.mu, atol=1e-12)


def test_flipout_shape_errors():
    post = _post((3, 2), 1)
    with pytest.raises(ShapeError):
        flipout_dense_forward(np.ones((4, 5)), post, Rng(0))


def test_flipout_matches_weight_sampling_moments():
    # mean and per-output variance of a single example equal those of w ~ q
    x = np.array([[0.5, -1.0, 2.0]])
    post = _post((3, 2), 4)
    outs = np.array([flipout_dense_forward(x, post, Rng(7, (i,)))[0] for i in range(4000)])
    exp_mean = (x @ post.mu)[0]
    exp_var = (x ** 2 @ post.sigma ** 2)[0]
    se = np.sqrt(exp_var / 4000)
    assert np.all(np.abs(outs.mean(0) - exp_mean) < 4 * se)
    assert np.all(np.abs(outs.var(0) / exp_var - 1) < 0.1)


def test_local_reparam_moments_and_determinism():
    x = np.array([[1.0, 2.0, -1.0]])
    post = _post((3, 1), 5)
    a = local_reparam_dense_forward(x, post, Rng(1))
    np.testing.assert_array_equal(a, local_reparam_dense_forward(x, post, Rng(1)))
    outs = np.array([local_reparam_dense_forward(x, post, Rng(2, (i,)))[0, 0] for i in range(4000)])
    mean, var = float((x @ post.mu)[0, 0]), float((x ** 2 @ post.sigma ** 2)[0, 0])
    assert abs(outs.mean() - mean) < 4 * math.sqrt(var / 4000)


def test_local_reparam_zero_input_is_finite():
    post = _post((3, 2), 5)
    out = local_reparam_dense_forward(np.zeros((2, 3)), post, Rng(0))
    assert np.all(np.isfinite(out))


def test_mc_dropout_rate_zero_and_stochasticity():
    x = np.ones((2, 50))
    np.testing.assert_array_equal(mc_dropout_forward(x, 0.0, Rng(0)), x)
    a, b = mc_dropout_forward(x, 0.5, Rng(1)), mc_dropout_forward(x, 0.5, Rng(2))
    assert not np.array_equal(a, b)
    with pytest.raises(ConfigError):
        mc_dropout_forward(x, 1.0, Rng(0))
    with pytest.raises(ConfigError):
        mc_dropout_forward(x, 0.5, Rng(0), mode="train_only")


def test_mc_dropout_mean_is_preserved():
    x = np.ones((1, 20000))
    assert mc_dropout_forward(x, 0.2, Rng(3)).mean() == pytest.approx(1.0, abs=0.02)


def test_ledger_rejects_duplicate_layer():
    led = KlLedger()
    led.record("a", 1.0)
    with pytest.raises(ConfigError):
        led.record("a", 2.0)
    led.record("b", 2.5)
    assert float(led.total().value) == 3.5


# ---------------------------------------------------------------- MNF behaviour


def test_mnf_dense_forced_unit_z_matches_reparameterized_layer():
    p = _random_mnf("dense", (3, 2), 0)
    x = np.random.default_rng(1).normal(size=(4, 3))
    out = mnf_dense_forward(x, p, Rng(5), z_override=np.ones(3))
    nodes = mnf_param_nodes(p)
    ref, _ = bayes.reparam_dense_nodes(ad.const(x), nodes["mu"], nodes["rho"], None, Rng(5))
    # same epsilon stream: the MNF layer draws z0 first, so compare against w directly
    rng = Rng(5)
    w = p.posterior.mu + p.posterior.sigma * rng.normal(p.posterior.mu.shape)
    np.testing.assert_allclose(out, x @ w, atol=1e-12)
    assert ref.shape == out.shape


def test_mnf_conv_output_mean_scales_with_forced_filter_z():
    p = _random_mnf("conv3d", (2, 1, 3, 3, 3), 3)
    p.posterior.rho[:] = -1000.0  # no weight noise: output is linear in z
    x = np.random.default_rng(0).normal(size=(1, 1, 5, 5, 4))
    base = mnf_conv3d_forward(x, p, Rng(0), z_override=np.ones(2))
    scaled = mnf_conv3d_forward(x, p, Rng(0), z_override=np.array([2.0, 1.0]))
    np.testing.assert_allclose(scaled[:, 0], 2 * base[:, 0], atol=1e-12)
    np.testing.assert_allclose(scaled[:, 1], base[:, 1], atol=1e-12)


def test_mnf_records_kl_in_ledger():
    p = _random_mnf("dense", (3, 2), 0)
    led = KlLedger()
    mnf_dense_forward(np.ones((2, 3)), p, Rng(0), ledger=led, layer_id="d")
    assert list(led.values()) == ["d"] and np.isfinite(led.values()["d"])


def test_mnf_dimension_mismatch():
    p = _random_mnf("dense", (3, 2), 0)
    with pytest.raises(ConfigError):
        mnf_dense_forward(np.ones((2, 4)), p, Rng(0))


def test_mnf_identity_flows_reduce_to_gaussian_kl_plus_density_gap():
    # identity flows, z fixed at the base mean and an r that matches q(z0): the
    # bound is the Gaussian KL of the z-scaled means plus log q(z) - log r(z) = 0
    p = MnfLayerParams.init("dense", (2, 3), Rng(0), 2, sigma=0.4)
    p.z_mu = np.zeros(2)
    p.z_rho = np.full(2, bayes.rho_for_sigma(1.0))
    p.aux.b1[:] = 0.0
    p.aux.b2[:] = 0.0  # variance 2 sigmoid(0) = 1: r is the standard normal
    z = np.array([0.3, -0.4])
    w = z[:, None] * p.posterior.mu + 0.1
    bound = kl_mnf_bound(p, w, z, z, 0.0)
    gaussian = kl_gaussian_vs_standard_normal(GaussianPosterior(z[:, None] * p.posterior.mu, p.posterior.rho))
    assert bound == pytest.approx(gaussian, abs=1e-12)


def _toy_bound_samples(p, n, seed):
    nodes = mnf_param_nodes(p)
    fm, am = p.masks()
    out = np.empty(n)
    for i in range(n):
        sample = bayes.mnf_sample_nodes(nodes, "dense", fm, Rng(seed, (i,)))
        out[i] = float(bayes.kl_mnf_bound_nodes(nodes, "dense", am, *sample).value)
    return out


def _toy_true_kl(p):
    """KL(q(w) || N(0, I)) for a 1x2 dense MNF layer by grid quadrature."""
    mu, sigma = p.posterior.mu[0], p.posterior.sigma[0]
    s0 = float(np.log1p(np.exp(p.z_rho[0])))
    zg = np.linspace(-3.0, 5.0, 801)
    # density of zK: push the grid back through the flow
    log_qz = np.empty_like(zg)
    for i, z in enumerate(zg):
        z0, ld = flow_inverse(np.array([z]), p.flow)
        log_qz[i] = -0.5 * ((z0[0] - p.z_mu[0]) / s0) ** 2 - math.log(s0 * math.sqrt(2 * math.pi)) + ld
    qz = np.exp(log_qz)
    dz = zg[1] - zg[0]
    assert abs(qz.sum() * dz - 1.0) < 1e-4
    w1 = np.linspace(mu[0] * -3 - 5 * sigma[0] - 2, mu[0] * 5 + 5 * sigma[0] + 2, 241) if mu[0] > 0 else None
    lo = np.minimum(mu * -3.0, mu * 5.0) - 6 * sigma
    hi = np.maximum(mu * -3.0, mu * 5.0) + 6 * sigma
    g1, g2 = np.linspace(lo[0], hi[0], 241), np.linspace(lo[1], hi[1], 241)
    W1, W2 = np.meshgrid(g1, g2, indexing="ij")
    qw = np.zeros_like(W1)
    for zi, qi in zip(zg, qz):
        if qi < 1e-14:
            continue
        qw += qi * dz * np.exp(-0.5 * (((W1 - zi * mu[0]) / sigma[0]) ** 2 + ((W2 - zi * mu[1]) / sigma[1]) ** 2)) \
            / (2 * math.pi * sigma[0] * sigma[1])
    del w1
    cell = (g1[1] - g1[0]) * (g2[1] - g2[0])
    assert abs(qw.sum() * cell - 1.0) < 1e-3
    log_p = -0.5 * (W1 ** 2 + W2 ** 2) - math.log(2 * math.pi)
    mask = qw > 1e-300
    return float(np.sum(qw[mask] * (np.log(qw[mask]) - log_p[mask])) * cell)


def test_mnf_bound_upper_bounds_true_kl_on_two_weight_toy():
    p = MnfLayerParams.init("dense", (1, 2), Rng(3), 2, sigma=0.3)
    p.posterior.mu = np.array([[0.8, -0.5]])
    p.z_mu = np.array([1.0])
    p.z_rho = np.array([bayes.rho_for_sigma(0.4)])
    p.flow = FlowStack.init(1, 2, Rng(4), identity=False)
    p.aux.b1 = np.array([0.5])
    p.aux.b2 = np.array([-0.3])
    samples = _toy_bound_samples(p, 10_000, 11)
    se = samples.std(ddof=1) / math.sqrt(samples.size)
    true_kl = _toy_true_kl(p)
    assert samples.mean() >= true_kl - 3 * se, (samples.mean(), true_kl, se)


# ---------------------------------------------------------------- gradients


DENSE_LAYERS = {
    "reparam": bayes.reparam_dense_nodes,
    "flipout": bayes.flipout_dense_nodes,
    "local_reparam": bayes.local_reparam_dense_nodes,
}
CONV_LAYERS = {
    "reparam": bayes.reparam_conv3d_nodes,
    "flipout": bayes.flipout_conv3d_nodes,
    "local_reparam": bayes.local_reparam_conv3d_nodes,
}


def _mixed_objective(layer, seed, conv):
    # output sum-of-squares plus KL exercises every parameter path
    def fn(x, mu, rho, bias):
        out, kl = layer(x, mu, rho, bias, Rng(seed), **({"padding": "same"} if conv else {}))
        return ops.sum(ops.square(out)) * 0.1 + kl * 0.01
    return fn


@pytest.mark.parametrize("name", sorted(DENSE_LAYERS))
def test_dense_layer_gradients(name):
    worst = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        arrays = [r.normal(size=(3, 4)), r.normal(size=(4, 2)), r.uniform(-2, 0, size=(4, 2)), r.normal(size=2)]
        worst = max(worst, grad_error(_mixed_objective(DENSE_LAYERS[name], seed, False), arrays))
    assert worst < 1e-4


@pytest.mark.parametrize("name", sorted(CONV_LAYERS))
def test_conv_layer_gradients(name):
    worst = 0.0
    for seed in range(6):
        r = np.random.default_rng(100 + seed)
        arrays = [r.normal(size=(2, 2, 4, 3, 3)), r.normal(size=(2, 2, 2, 2, 2)) * 0.5,
                  r.uniform(-2, 0, size=(2, 2, 2, 2, 2)), r.normal(size=2)]
        worst = max(worst, grad_error(_mixed_objective(CONV_LAYERS[name], seed, True), arrays))
    assert worst < 1e-4


def _mnf_flat(p):
    arr = p.arrays()
    keys = sorted(arr)
    return keys, [arr[k] for k in keys]


def _mnf_objective(kind, keys, masks, seed, x):
    def fn(*nodes):
        named = dict(zip(keys, nodes))
        d = {k: v for k, v in named.items() if "flow." not in k}
        for prefix, name in (("flow.", "flow"), ("aux_flow.", "aux_flow")):
            steps = sorted({int(k[len(prefix):].split(".")[0]) for k in named if k.startswith(prefix)})
            d[name] = [{k.split(".")[-1]: v for k, v in named.items()
                        if k.startswith(f"{prefix}{s}.")} for s in steps]
        layer = bayes.mnf_dense_nodes if kind == "dense" else bayes.mnf_conv3d_nodes
        out, kl, _ = layer(ad.const(x), d, masks, None, Rng(seed))
        return ops.sum(ops.square(out)) * 0.1 + kl
    return fn


@pytest.mark.parametrize("kind", ["dense", "conv3d"])
def test_mnf_layer_and_bound_gradients(kind):
    worst = 0.0
    configs = range(4) if kind == "dense" else range(2)
    for seed in configs:
        shape = (3, 2) if kind == "dense" else (2, 1, 2, 2, 2)
        p = _random_mnf(kind, shape, 50 + seed)
        keys, arrays = _mnf_flat(p)
        x = np.random.default_rng(seed).normal(size=(2, 3) if kind == "dense" else (1, 1, 3, 3, 2))
        fn = _mnf_objective(kind, keys, p.masks(), seed, x)
        worst = max(worst, grad_error(fn, arrays))
    assert worst < 1e-3
