import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxbayes.errors import ConfigError, FormatError
from voxbayes.layers import build_reference_model
from voxbayes.model import Model
from voxbayes.uncertainty import (PredictiveInterval, PredictiveSamples, dump_prediction_log,
                                  flag_high_uncertainty, load_prediction_log, log_record,
                                  mc_predictive, percentile, predictive_interval)

# CT-4 class-1 interval reported for the Bayesian model
CT4_CLASS1 = (0.47307159, 0.9939988)
CT4_CLASS0 = (0.0060012, 0.52692841)


def tiny(variant="reparam", **kw):
    return Model(build_reference_model((8, 8, 8), variant, filters=2, dense_units=4, **kw), seed=1)


def test_constant_samples_give_zero_width():
    iv = predictive_interval(np.full(50, 0.7))
    assert (iv.lo, iv.hi, iv.width) == (0.7, 0.7, 0.0)
    assert not flag_high_uncertainty(iv)


def test_101_point_grid():
    iv = predictive_interval(np.arange(101) / 100, 0.95)
    assert iv.lo == pytest.approx(0.025, abs=1e-12)
    assert iv.hi == pytest.approx(0.975, abs=1e-12)


def test_reported_ct4_intervals():
    iv = PredictiveInterval(0.95, *CT4_CLASS1, mean=0.8)
    lo0, hi0 = iv.class0
    assert lo0 == pytest.approx(CT4_CLASS0[0], abs=1e-9)
    assert hi0 == pytest.approx(CT4_CLASS0[1], abs=1e-9)
    assert iv.width == pytest.approx(0.52092721, abs=1e-9)
    assert flag_high_uncertainty(iv, 0.3)


def test_flag_boundary_is_strict():
    assert not flag_high_uncertainty(PredictiveInterval(0.95, 0.25, 0.55, 0.4), 0.3 + 1e-12)
    assert not flag_high_uncertainty(PredictiveInterval(0.95, 0.5, 0.8, 0.6), 0.30000000000000004)
    assert flag_high_uncertainty(PredictiveInterval(0.95, 0.2, 0.6, 0.4), 0.3)


def test_level_and_sample_validation():
    for level in (0.0, 1.0, 1.5):
        with pytest.raises(ConfigError):
            predictive_interval(np.array([0.2, 0.4]), level)
    with pytest.raises(ConfigError):
        PredictiveSamples(np.array([]))
    with pytest.raises(ConfigError):
        PredictiveSamples(np.array([0.2, 1.2]))


def test_percentile_matches_numpy_linear():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = np.sort(rng.random(int(rng.integers(1, 300))))
        q = float(rng.random())
        assert percentile(x, q) == pytest.approx(np.percentile(x, 100 * q, method="linear"), abs=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=80), st.floats(0.01, 0.98), st.floats(0.001, 0.99))
def test_nesting_and_complement(xs, g1, dg):
    g2 = min(g1 + dg, 0.999)
    a, b = predictive_interval(np.array(xs), g1), predictive_interval(np.array(xs), g2)
    assert b.lo <= a.lo + 1e-15 and a.hi <= b.hi + 1e-15
    assert 0.0 <= a.lo <= a.hi <= 1.0
    assert a.class0 == (1.0 - a.hi, 1.0 - a.lo)
    assert a.for_class(1) == (a.lo, a.hi)


def test_coverage_over_500_trials():
    rng = np.random.default_rng(42)
    hits = 0
    for _ in range(500):
        a, b = rng.uniform(0.5, 8.0, 2)
        truth = rng.beta(a, b)
        iv = predictive_interval(rng.beta(a, b, 200), 0.95)
        hits += iv.lo <= truth <= iv.hi
    assert hits / 500 >= 0.90


def test_zero_sigma_model_repeats_itself():
    model = tiny()
    for k in model.params:
        if k.endswith("/rho"):
            model.params[k][...] = -1e4
    s = mc_predictive(model, np.random.default_rng(0).random((8, 8, 8)), T=20, seed=3)
    assert np.all(s.samples == s.samples[0])
    assert predictive_interval(s).width == 0.0


def test_mc_predictive_seeding_and_stability():
    model = tiny()
    v = np.random.default_rng(2).random((8, 8, 8))
    a = mc_predictive(model, v, T=4000, seed=10)
    assert a.samples.tobytes() == mc_predictive(model, v, T=4000, seed=10).samples.tobytes()
    b = mc_predictive(model, v, T=2000, seed=11)
    se = np.sqrt(a.samples.var(ddof=1) / 4000 + b.samples.var(ddof=1) / 2000)
    assert abs(a.mean - b.mean) < 3 * se


def test_deterministic_model_refused():
    with pytest.raises(ConfigError):
        mc_predictive(tiny("none", dropout=0.0), np.zeros((8, 8, 8)), T=5)
    with pytest.raises(ConfigError):
        mc_predictive(tiny(), np.zeros((8, 8, 8)), T=0)


def test_prediction_log_round_trip():
    s = PredictiveSamples(np.array([0.1, 0.25, 0.9]), seed=4, model_id="abc")
    text = dump_prediction_log([log_record("vol-1", s, 1), log_record("vol-2", s)])
    back = load_prediction_log(text)
    assert [r["id"] for r, _ in back] == ["vol-1", "vol-2"]
    assert back[0][0]["label"] == 1 and "label" not in back[1][0]
    assert back[0][1].samples.tolist() == [0.1, 0.25, 0.9]
    assert back[0][1].seed == 4 and back[0][1].model_id == "abc"
    assert dump_prediction_log(r for r, _ in back) == text
    with pytest.raises(FormatError):
        load_prediction_log("{not json")
    with pytest.raises(FormatError):
        load_prediction_log('[{"samples": [0.2]}]')
