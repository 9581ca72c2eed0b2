import copy
import math

import numpy as np
import pytest

from voxbayes import autodiff as ad
from voxbayes.bayes import KlLedger
from voxbayes.errors import ConfigError, ShapeError
from voxbayes.layers import build_reference_model
from voxbayes.model import Model
from voxbayes.rng import Rng
from voxbayes.synth import blob_dataset
from voxbayes.train import (AdamState, TrainConfig, adam_step, batches, elbo_loss, predict,
                            predict_batch, train)

SHAPE = (8, 8, 8)


def small(variant="none", **kw):
    return build_reference_model(SHAPE, variant, filters=4, dense_units=8, **kw)


@pytest.fixture(scope="module")
def task():
    return blob_dataset(16, SHAPE, seed=1), blob_dataset(6, SHAPE, seed=2)


# ---------------------------------------------------------------- objective


def test_elbo_examples():
    assert float(elbo_loss(np.array([0.5]), [1], None, 10).value) == pytest.approx(math.log(2), abs=1e-12)
    near = float(elbo_loss(np.array([1.0]), [1], None, 10).value)
    assert near == pytest.approx(1e-7, rel=1e-3)
    led = KlLedger()
    led.record("a", ad.const(np.array(4.0)))
    led.record("b", ad.const(np.array(6.0)))
    got = float(elbo_loss(np.array([1.0, 0.0]), [1, 0], led, 100).value)
    assert got == pytest.approx(0.1, abs=1e-6)
    with pytest.raises(ConfigError):
        elbo_loss(np.array([0.5]), [1], None, 0)
    with pytest.raises(ShapeError):
        elbo_loss(np.array([0.5, 0.5]), [1], None, 3)


def test_empty_ledger_is_plain_bce():
    p = np.array([0.2, 0.7, 0.9])
    y = np.array([0.0, 1.0, 0.0])
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert float(elbo_loss(p, y, KlLedger(), 5).value) == bce


# ---------------------------------------------------------------- optimizer


def test_adam_zero_grad_is_noop_and_first_step_is_lr():
    params = {"w": np.array([1.0, -2.0])}
    same = adam_step(params, {"w": np.zeros(2)}, AdamState(), lr=0.01)
    np.testing.assert_array_equal(same["w"], params["w"])
    moved = adam_step(params, {"w": np.array([3.0, -0.5])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(moved["w"] - params["w"], [-0.01, 0.01], rtol=1e-6)
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros(3)}, AdamState())


def test_adam_matches_written_out_recursion():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=4)}
    st = AdamState()
    w, m, v = p["w"].copy(), np.zeros(4), np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        p = adam_step(p, {"w": g}, st, lr=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-13)


def test_batches_merge_trailing_single():
    order = np.arange(7)
    assert [b.tolist() for b in batches(7, 2, order)] == [[0, 1], [2, 3], [4, 5, 6]]
    assert [len(b) for b in batches(8, 3, np.arange(8))] == [3, 3, 2]


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig(epochs=3, augment=True)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- loop


def test_zero_epochs_returns_initial_model(task):
    ck, hist = train(small(), task, TrainConfig(epochs=0, seed=4))
    assert hist == [] and ck.epoch == 0
    fresh = Model(small(), seed=4)
    for k, v in fresh.arrays().items():
        np.testing.assert_array_equal(ck.arrays[k], v)


def test_history_and_determinism(task):
    cfg = TrainConfig(epochs=3, seed=0)
    a, ha = train(small(), task, cfg)
    b, hb = train(small(), task, cfg)
    assert ha == hb and len(ha) == 3
    assert [r["epoch"] for r in ha] == [1, 2, 3]
    for k in a.arrays:
        assert a.arrays[k].tobytes() == b.arrays[k].tobytes()
    best = max(r["val_accuracy"] for r in ha)
    assert a.metrics["val_accuracy"] == best
    assert a.epoch == next(r["epoch"] for r in ha if r["val_accuracy"] == best)


def test_early_stop_shortens_history(task):
    _, hist = train(small(), task, TrainConfig(epochs=6, seed=0, early_stop_patience=1))
    assert 2 <= len(hist) <= 6
    accs = [r["val_accuracy"] for r in hist]
    if len(hist) < 6:
        assert accs[-1] <= max(accs[:-1])


def test_bad_labels_name_the_sample(task):
    (xt, yt), val = task
    bad = yt.copy()
    bad[3] = 2.0
    with pytest.raises(ConfigError, match="sample 3"):
        train(small(), ((xt, bad), val), TrainConfig(epochs=1))
    with pytest.raises(ShapeError):
        train(small(), ((xt[:, :7], yt), val), TrainConfig(epochs=1))


def test_augmented_training_runs(task):
    _, hist = train(small(), task, TrainConfig(epochs=1, augment=True))
    assert math.isfinite(hist[0]["train_loss"])


@pytest.mark.parametrize("variant", ["none", "reparam", "local_reparam", "flipout", "mnf"])
def test_objective_decreases_on_fixed_training_batch(task, variant):
    (xt, yt), _ = task
    spec = small(variant)
    model = Model(spec, seed=0)
    objective = []

    def probe(_record=None):
        saved = copy.deepcopy(model.state)
        ledger = KlLedger() if variant != "none" else None
        probs, _, _ = model.forward(xt, Rng(99), training=True, ledger=ledger)
        objective.append(float(elbo_loss(probs, yt, ledger, len(xt)).value))
        model.state = saved

    probe()
    train(spec, task, TrainConfig(epochs=10, seed=0), model=model, log=probe)
    rises = sum(b > a for a, b in zip(objective, objective[1:]))
    assert rises <= 2, objective
    assert objective[-1] < objective[0]


# ---------------------------------------------------------------- prediction


def test_predict_modes():
    model = Model(small(), seed=1)
    v = np.random.default_rng(0).random(SHAPE)
    assert predict(model, v) == predict(model, v)
    s = predict(model, v, mode="mc", T=1)
    assert s.T == 1
    with pytest.raises(ShapeError):
        predict(model, np.zeros((8, 8, 7)))
    with pytest.raises(ConfigError):
        predict(Model(small(dropout=0.0)), v, mode="mc", T=3)
    with pytest.raises(ConfigError):
        predict(model, v, mode="vote")


@pytest.mark.parametrize("variant", ["reparam", "flipout", "local_reparam"])
def test_zero_sigma_mc_mean_equals_point_model(variant):
    bayes_model = Model(small(variant), seed=3)
    point = Model(small(dropout=0.0), seed=0)
    for key in list(bayes_model.params):
        if key.endswith("/rho"):
            bayes_model.params[key] = np.full_like(bayes_model.params[key], -1e4)
    for key, value in bayes_model.params.items():
        target = key.replace(f"{variant}_", "").replace("/mu", "/w")
        if not key.endswith("/rho"):
            point.params[target] = value.copy()
    point.state = copy.deepcopy(bayes_model.state)
    v = np.random.default_rng(5).random(SHAPE)
    ref = predict(point, v)
    samples = predict(bayes_model, v, mode="mc", T=10_000, seed=2).samples
    assert abs(samples.mean() - ref) < 1e-12


def test_predict_batch_matches_single_predictions():
    for variant in ("none", "flipout"):
        model = Model(small(variant), seed=1)
        x = np.random.default_rng(2).random((5,) + SHAPE)
        batch = predict_batch(model, x, seed=3, chunk=2)
        single = [predict(model, v, seed=3) for v in x]
        np.testing.assert_allclose(batch, single, rtol=0, atol=1e-15)
