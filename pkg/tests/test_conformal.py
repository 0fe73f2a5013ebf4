import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbn.conformal import (
    CalibrationError, calibrate, collect, conformal_rank, curve, min_calibration_size,
    safe_volume_fraction, shift,
)
from rbn.dynamics import Integrator1D
from rbn.grid_solver import Grid, solve
from rbn.providers import GridProvider


@pytest.fixture(scope="module")
def exact_integrator():
    s = Integrator1D()
    g = Grid.for_system(s, [201])
    return GridProvider(s, {0.0: solve(g, s, 0.0, 1.0)}, clamp=True)


def test_hand_computed_order_statistic():
    scores = np.arange(1, 11) / 10
    # rank ceil(11 * 0.8) = 9
    assert calibrate(np.random.default_rng(0).permutation(scores), 0.2) == pytest.approx(0.9)


def test_rank_guards_float_round_up():
    # (19 + 1) * 0.95 is 19.000000000000004 in floating point
    assert conformal_rank(19, 0.05) == 19
    assert min_calibration_size(0.05) == 19
    assert min_calibration_size(0.01) == 99


def test_too_few_scores_names_minimum():
    with pytest.raises(CalibrationError, match="need at least 19"):
        calibrate(np.zeros(10), 0.05)
    with pytest.raises(CalibrationError):
        calibrate(np.zeros(10), 0.0)


@settings(max_examples=60)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=20, max_size=200),
       st.sampled_from([0.05, 0.1, 0.2, 0.5]))
def test_margin_covers_rank_many_scores(scores, eps):
    scores = np.array(scores)
    delta = calibrate(scores, eps)
    assert np.count_nonzero(scores <= delta) >= conformal_rank(len(scores), eps)
    assert calibrate(scores[::-1], eps) == delta


@settings(max_examples=30)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=200, max_size=300))
def test_margin_nonincreasing_in_epsilon(scores):
    deltas = [calibrate(scores, e) for e in (0.01, 0.05, 0.1, 0.5)]
    assert all(a >= b for a, b in zip(deltas, deltas[1:]))


def test_exact_value_has_zero_scores(exact_integrator):
    # V(x, tau) = x is exact and u = +1 realises min l = x0
    cal = collect(exact_integrator, 0.0, 200, np.random.default_rng(0), horizon=1.0)
    np.testing.assert_allclose(cal.scores, 0.0, atol=1e-9)
    assert calibrate(cal, 0.05) == pytest.approx(0.0, abs=1e-9)
    rec = next(iter(cal))
    assert rec.score == pytest.approx(rec.predicted - rec.realized_cost)
    assert cal.header() == ["x0", "gamma", "predicted", "realized_cost", "score"]


def test_shift_and_volume(exact_integrator):
    shifted = shift(exact_integrator, 0.5)
    assert shifted.value(np.array([1.0]), 0.0) == pytest.approx(0.5)
    # P(x - delta > 0) for x ~ U[-2, 2]
    frac = safe_volume_fraction(exact_integrator, 0.0, 0.5, np.random.default_rng(1), n=200_000)
    assert frac == pytest.approx(1.5 / 4, abs=0.005)


def test_curve_rows(exact_integrator):
    out = curve(exact_integrator, [0.0], [0.05, 0.1], 50, np.random.default_rng(2),
                horizon=1.0, volume_samples=1000)
    (c,) = out
    assert c.n == 50 and len(list(c.rows())) == 2
    assert all(v == pytest.approx(0.5, abs=0.1) for v in c.safe_volume_fraction)
