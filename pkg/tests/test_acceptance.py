"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py``; the terminal summary lists one
PASS/FAIL line per criterion. The two training criteria take roughly fifteen
minutes on a single core and carry the ``slow`` marker.
"""

import json
import math
import time

import numpy as np
import pytest

from gradutil import grad_error
from test_bayes import (CONV_LAYERS, DENSE_LAYERS, _mixed_objective, _mnf_flat, _mnf_objective,
                        _random_mnf, _toy_bound_samples, _toy_true_kl)
from test_calibration import ece_brute
from test_flows import random_flow
from test_metrics import auc_pairs, kappa_table
from test_nifti import fixture_bytes
from test_shap import patch_means, permutation_oracle, random_game
from voxbayes import autodiff as ad
from voxbayes import bayes
from voxbayes.autodiff import ops
from voxbayes.bayes import GaussianPosterior, MnfLayerParams, kl_gaussian_vs_standard_normal
from voxbayes.calibration import CalibrationBin, calibration_report, expected_calibration_error
from voxbayes.cli import run
from voxbayes.errors import (FormatError, TruncatedFile, UnsupportedDatatype, UnsupportedRank)
from voxbayes.flows import FlowStack, flow_forward, flow_inverse, flow_log_density
from voxbayes.layers import build_reference_model
from voxbayes.metrics import ConfusionCounts, classification_metrics, cohens_kappa, roc_auc
from voxbayes.model import Model
from voxbayes.nifti import parse_nifti, serialize
from voxbayes.rng import Rng
from voxbayes.shap import exact_shapley, partition_volume, sampled_shapley
from voxbayes.synth import blob_dataset
from voxbayes.train import TrainConfig, predict_batch, train
from voxbayes.uncertainty import mc_predictive, predictive_interval

BUDGET_S = 600.0
EPOCHS = 2
_scores = {}


@pytest.fixture(scope="module")
def blob_task():
    return blob_dataset(200, seed=7), blob_dataset(20, seed=8), blob_dataset(60, seed=9)


def fit_and_score(task, variant):
    if variant in _scores:
        return _scores[variant]
    train_set, val_set, (xs, ys) = task
    start = time.perf_counter()
    ck, _ = train(build_reference_model(bayes_variant=variant), (train_set, val_set),
                  TrainConfig(epochs=EPOCHS, seed=0))
    acc = float(np.mean((predict_batch(ck.to_model(), xs) >= 0.5) == ys))
    _scores[variant] = (acc, time.perf_counter() - start)
    print(f"{variant}: test accuracy {acc:.3f} in {_scores[variant][1]:.0f} s")
    return _scores[variant]


@pytest.mark.slow
@pytest.mark.criterion(1, "deterministic model >= 0.95 test accuracy on the blob task within 10 min")
def test_deterministic_blob_accuracy(blob_task):
    acc, seconds = fit_and_score(blob_task, "none")
    assert seconds < BUDGET_S
    assert acc >= 0.95


@pytest.mark.slow
@pytest.mark.criterion(2, "MNF within 5 points, Flipout/reparam within 10 points of deterministic")
def test_bayesian_parity(blob_task):
    ref, _ = fit_and_score(blob_task, "none")
    for variant, slack in (("mnf", 0.05), ("flipout", 0.10), ("reparam", 0.10)):
        acc, seconds = fit_and_score(blob_task, variant)
        assert seconds < BUDGET_S, variant
        assert acc >= ref - slack - 1e-12, (variant, acc, ref)


# ---------------------------------------------------------------- gradients


def _primitive_configs(rng):
    """(name, objective, arrays) triples, three random draws per primitive."""
    unary = {"sigmoid": ops.sigmoid, "tanh": ops.tanh, "softplus": ops.softplus, "exp": ops.exp,
             "neg": ops.neg, "square": ops.square,
             "log": lambda a: ops.log(ops.square(a) + 0.5),
             "sqrt": lambda a: ops.sqrt(ops.square(a) + 0.5),
             "relu": lambda a: ops.relu(a * 1.0),
             "clip": lambda a: ops.clip(a, -0.5, 0.5),
             "sum": lambda a: ops.sum(a, axis=0), "mean": lambda a: ops.mean(a, axis=1),
             "reshape": lambda a: ops.reshape(a, (2, 6)), "transpose": lambda a: ops.transpose(a),
             "getitem": lambda a: ops.getitem(a, (slice(1, None), slice(None, None, 2))), "max": lambda a: ops.max(a, axis=1)}
    for _ in range(3):
        for name, fn in unary.items():
            x = rng.normal(size=(3, 4))
            if name in ("relu", "clip"):
                x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.2, x)  # away from kinks
                x = np.where(np.abs(x) < 0.05, 0.2, x)
            if name == "max":
                x = rng.permutation(12).reshape(3, 4) / 3.0
            w = rng.normal(size=ad.forward(fn(ad.const(x))).shape)
            yield name, (lambda a, fn=fn, w=w: ops.sum(fn(a) * w)), [x]
        a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), rng.normal(size=(4, 2))
        w = rng.normal(size=(3, 4))
        yield "add", (lambda p, q: ops.sum(ops.add(p, q) * w)), [a, b]
        yield "sub", (lambda p, q: ops.sum(ops.sub(p, q) * w)), [a, b]
        yield "mul", (lambda p, q: ops.sum(ops.mul(p, q) * w)), [a, b]
        yield "div", (lambda p, q: ops.sum(ops.div(p, ops.square(q) + 0.5) * w)), [a, b]
        yield "broadcast_to", (lambda q: ops.sum(ops.broadcast_to(q, (3, 4)) * w)), [b]
        yield "concat", (lambda p, q: ops.sum(ops.getitem(ops.concat([p, q], 0), slice(0, 3)) * w + ops.square(q))), [a, b]
        w2 = rng.normal(size=(3, 2))
        yield "matmul", (lambda p, q: ops.sum(ops.matmul(p, q) * w2)), [a, c]
        for padding, stride in (("same", 1), ("valid", 2)):
            x, k = rng.normal(size=(2, 2, 4, 3, 3)), rng.normal(size=(2, 2, 2, 2, 3))
            wc = rng.normal(size=ops.conv3d(ad.const(x), ad.const(k), stride, padding).shape)
            yield f"conv3d/{padding}", (lambda p, q, s=stride, pd=padding, wc=wc:
                                        ops.sum(ops.conv3d(p, q, s, pd) * wc)), [x, k]
        x = rng.permutation(64).reshape(1, 1, 4, 4, 4) / 7.0
        wp = rng.normal(size=(1, 1, 2, 2, 2))
        yield "maxpool3d", (lambda p, wp=wp: ops.sum(ops.maxpool3d(p, 2) * wp)), [x]


def _bayes_configs():
    for name, layer in DENSE_LAYERS.items():
        for seed in range(4):
            r = np.random.default_rng(seed)
            arrays = [r.normal(size=(3, 4)), r.normal(size=(4, 2)), r.uniform(-2, 0, size=(4, 2)),
                      r.normal(size=2)]
            yield f"{name}_dense", _mixed_objective(layer, seed, False), arrays, 1e-4
    for name, layer in CONV_LAYERS.items():
        for seed in range(3):
            r = np.random.default_rng(100 + seed)
            arrays = [r.normal(size=(2, 2, 4, 3, 3)), r.normal(size=(2, 2, 2, 2, 2)) * 0.5,
                      r.uniform(-2, 0, size=(2, 2, 2, 2, 2)), r.normal(size=2)]
            yield f"{name}_conv3d", _mixed_objective(layer, seed, True), arrays, 1e-4
    for kind, seeds in (("dense", range(3)), ("conv3d", range(2))):
        for seed in seeds:
            p = _random_mnf(kind, (3, 2) if kind == "dense" else (2, 1, 2, 2, 2), 50 + seed)
            keys, arrays = _mnf_flat(p)
            x = np.random.default_rng(seed).normal(size=(2, 3) if kind == "dense" else (1, 1, 3, 3, 2))
            yield f"mnf_{kind}", _mnf_objective(kind, keys, p.masks(), seed, x), arrays, 1e-3


@pytest.mark.criterion(3, "gradients match central differences on >= 100 configs in < 2 min")
def test_gradient_correctness():
    start = time.perf_counter()
    configs = [(n, f, a, 1e-4) for n, f, a in _primitive_configs(np.random.default_rng(2024))]
    configs += list(_bayes_configs())
    failures = [(name, err) for name, fn, arrays, tol in configs
                if (err := grad_error(fn, arrays)) >= tol]
    elapsed = time.perf_counter() - start
    print(f"{len(configs)} configurations in {elapsed:.1f} s")
    assert len(configs) >= 100
    assert not failures, failures
    assert elapsed < 120.0


# ---------------------------------------------------------------- flows and KL


@pytest.mark.criterion(4, "flow round trip and log-det antisymmetry < 1e-10, 1-D density integrates to 1")
def test_flow_correctness():
    rng = np.random.default_rng(1)
    for i in range(100):
        dim = int(rng.integers(1, 8))
        flow = random_flow(dim, 500 + i, steps=int(rng.integers(1, 4)))
        z = rng.normal(size=dim) * 2
        zk, ld_f = flow_forward(z, flow)
        z0, ld_i = flow_inverse(zk, flow)
        assert np.max(np.abs(z0 - z)) < 1e-10
        assert abs(ld_f + ld_i) < 1e-10
    for seed in range(5):
        flow = random_flow(1, seed, steps=3)
        grid = np.linspace(-15, 15, 6001)
        dens = np.exp([flow_log_density(np.array([g]), flow) for g in grid])
        assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-3


@pytest.mark.criterion(5, "Gaussian KL within 3 SE of MC on 20 posteriors; MNF bound >= true KL")
def test_kl_correctness():
    n = 100_000
    for seed in range(20):
        r = np.random.default_rng(300 + seed)
        post = GaussianPosterior(r.normal(size=6), r.uniform(-3.0, 1.0, size=6))
        sigma = post.sigma
        eps = np.random.default_rng(seed).normal(size=(n, 6))
        w = post.mu + sigma * eps
        est = np.sum(-0.5 * eps ** 2 - np.log(sigma) + 0.5 * w ** 2, axis=1)
        se = est.std(ddof=1) / math.sqrt(n)
        assert abs(est.mean() - kl_gaussian_vs_standard_normal(post)) < 3 * se, seed
    p = MnfLayerParams.init("dense", (1, 2), Rng(8), 2, sigma=0.25)
    p.posterior.mu = np.array([[-0.6, 0.9]])
    p.z_mu = np.array([0.9])
    p.z_rho = np.array([bayes.rho_for_sigma(0.35)])
    p.flow = FlowStack.init(1, 2, Rng(9), identity=False)
    p.aux.b1 = np.array([0.2])
    p.aux.b2 = np.array([0.4])
    samples = _toy_bound_samples(p, 10_000, 21)
    se = samples.std(ddof=1) / math.sqrt(samples.size)
    assert samples.mean() >= _toy_true_kl(p) - 3 * se


# ---------------------------------------------------------------- reports


@pytest.mark.criterion(6, "ECE matches brute force (<= 1e-12) on 100 datasets; hand example gives 0.11")
def test_calibration_math():
    rng = np.random.default_rng(17)
    for _ in range(100):
        n, M = int(rng.integers(1, 120)), int(rng.integers(2, 20))
        t = float(rng.choice([0.4, 0.5, 0.6, 0.7, 0.8]))
        probs = rng.random(n)
        hit = rng.random(n) < 0.25
        probs[hit] = rng.integers(0, M + 1, int(hit.sum())) / M
        labels = rng.integers(0, 2, n)
        rep = calibration_report(probs, labels, t, M)
        assert abs(rep.ece - ece_brute(probs.tolist(), labels.tolist(), t, M)) <= 1e-12
        assert sum(b.count for b in rep.bins) == n
    hand = [CalibrationBin(6, 0.5, 0.6, 4, 0.75, 0.55), CalibrationBin(10, 0.9, 1.0, 6, 1.0, 0.95)]
    assert abs(expected_calibration_error(hand, 10) - 0.11) <= 1e-12


@pytest.mark.criterion(7, "AUC equals pairwise counting, kappa equals table formula, worked example")
def test_metric_oracles():
    rng = np.random.default_rng(23)
    for _ in range(100):
        n = int(rng.integers(2, 80))
        labels = rng.integers(0, 2, n)
        labels[:2] = [1, 0]
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        assert abs(roc_auc(scores, labels) - auc_pairs(scores, labels)) <= 1e-12
        preds = rng.integers(0, 2, n)
        assert abs(cohens_kappa(preds, labels) - kappa_table(list(preds), list(labels))) <= 1e-12
    acc, prec, rec, _ = classification_metrics(ConfusionCounts(3, 1, 4, 2))
    assert (acc, prec, rec) == pytest.approx((0.7, 0.75, 0.6), abs=1e-15)


@pytest.mark.criterion(8, "intervals nested, exact complement, >= 90% coverage, zero width at sigma 0")
def test_uncertainty_properties():
    rng = np.random.default_rng(5)
    for _ in range(200):
        xs = rng.beta(*rng.uniform(0.3, 5.0, 2), size=int(rng.integers(1, 300)))
        levels = np.sort(rng.uniform(0.01, 0.999, 4))
        ivs = [predictive_interval(xs, g) for g in levels]
        for a, b in zip(ivs, ivs[1:]):
            assert b.lo <= a.lo and a.hi <= b.hi
        assert all(iv.class0 == (1.0 - iv.hi, 1.0 - iv.lo) for iv in ivs)
    hits = 0
    for _ in range(500):
        a, b = rng.uniform(0.5, 8.0, 2)
        truth = rng.beta(a, b)
        iv = predictive_interval(rng.beta(a, b, 200), 0.95)
        hits += iv.lo <= truth <= iv.hi
    print(f"coverage {hits / 500:.3f}")
    assert hits / 500 >= 0.90
    for variant in ("reparam", "flipout", "local_reparam"):
        model = Model(build_reference_model((8, 8, 8), variant, filters=2, dense_units=4), seed=4)
        for k in model.params:
            if k.endswith("/rho"):
                model.params[k][...] = -1e4
        s = mc_predictive(model, rng.random((8, 8, 8)), T=12, seed=1)
        assert predictive_interval(s).width == 0.0


@pytest.mark.criterion(9, "exact Shapley axioms on 50 instances; 2000-permutation estimate within 5%")
def test_shapley():
    rng = np.random.default_rng(31)
    shape = (6, 4, 4)
    for i in range(50):
        grid = (int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        if np.prod(grid) > 10:
            grid = (grid[0], grid[1], 1)
        part = partition_volume(shape, grid)
        f, dummy = random_game(rng, part)
        x, base = rng.random(shape), rng.random(shape) * 0.2
        exact = exact_shapley(f, x, part, baseline=base).values[1]
        assert abs(exact.sum() - (f(x[None])[0] - f(base[None])[0])) < 1e-9
        assert abs(exact[dummy]) < 1e-12
        if part.n_patches <= 6:
            np.testing.assert_allclose(exact, permutation_oracle(f, x, base, part), atol=1e-10)
        est = sampled_shapley(f, x, part, baseline=base, n_permutations=2000, seed=i).values[1]
        assert np.max(np.abs(est - exact)) <= 0.05 * np.ptp(exact) + 1e-12, i
    # symmetry: two patches that enter the game identically share equally
    part = partition_volume((4, 2, 2), (2, 1, 1))
    f = lambda b: np.tanh(patch_means(b, part).sum(1) ** 2)  # noqa: E731
    phi = exact_shapley(f, np.full((4, 2, 2), 0.7), part).values[1]
    assert abs(phi[0] - phi[1]) < 1e-12


# ---------------------------------------------------------------- files


@pytest.mark.criterion(10, "NIfTI fixture round-trips byte-identically; endianness, scaling, errors")
def test_nifti_contract():
    for endian in "<>":
        for shape in ((4, 4, 2), (3, 5, 2), (1, 1, 1)):
            data = fixture_bytes(shape, endian=endian)
            hdr, vol = parse_nifti(data)
            assert hdr.endianness == endian and vol.shape == (shape[1], shape[0], shape[2])
            assert serialize(hdr, vol) == data
    vals = np.linspace(-4, 4, 24).astype(np.float32)
    _, vol = parse_nifti(fixture_bytes((2, 3, 4), vals, ">", 16, slope=0.5, inter=10.0))
    raw = vals.astype(np.float64).reshape((2, 3, 4), order="F") * 0.5 + 10.0
    np.testing.assert_allclose(vol.voxels, np.rot90(raw, 1, axes=(0, 1)), rtol=0, atol=1e-12)
    _, vol = parse_nifti(fixture_bytes((2, 2, 1), [3, 4, 5, 6], slope=0.0))
    assert sorted(vol.voxels.ravel()) == [3, 4, 5, 6]
    good = fixture_bytes()
    cases = [(FormatError, lambda b: b[:344] + b"zzzz" + b[348:]),
             (UnsupportedRank, lambda b: b[:40] + (2).to_bytes(2, "little") + b[42:]),
             (UnsupportedDatatype, lambda b: b[:70] + (2).to_bytes(2, "little") + b[72:]),
             (TruncatedFile, lambda b: b[:-2]),
             (TruncatedFile, lambda b: b[:100])]
    for err, mutate in cases:
        with pytest.raises(err):
            parse_nifti(mutate(good))


@pytest.mark.criterion(11, "every command re-run from its manifest gives byte-identical outputs")
def test_manifest_reproducibility(tmp_path):
    d = {k: tmp_path / k for k in ("synth", "prepare", "train", "evaluate", "calibrate",
                                   "uncertainty", "explain")}
    small = ["--filters", "2", "--dense-units", "4"]
    assert run(["synth", "--n", "12", "--shape", "8x8x8", "--seed", "11", "--out", str(d["synth"])]) == 0
    assert run(["prepare", "--manifest", str(d["synth"] / "manifest.csv"), "--seed", "2",
                "--out", str(d["prepare"])]) == 0
    assert run(["train", "--data", str(d["prepare"]), "--epochs", "1", "--variant", "flipout",
                "--out", str(d["train"])] + small) == 0
    common = ["--checkpoint", str(d["train"] / "checkpoint"), "--data", str(d["prepare"])]
    assert run(["evaluate", *common, "--out", str(d["evaluate"])]) == 0
    assert run(["calibrate", *common, "--out", str(d["calibrate"])]) == 0
    assert run(["uncertainty", *common, "--T", "5", "--out", str(d["uncertainty"])]) == 0
    assert run(["explain", *common, "--grid", "2x1x1", "--out", str(d["explain"])]) == 0
    for command, first in d.items():
        man = json.loads((first / "manifest.json").read_text())
        assert man["command"] == command
        again = tmp_path / f"{command}-again"
        assert run([command, "--config", str(first / "manifest.json"), "--out", str(again)]) == 0
        for name in man["outputs"] + ["manifest.json"]:
            assert (again / name).read_bytes() == (first / name).read_bytes(), (command, name)
