import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmpath.metrics import compute_metrics, kendall_tau, mae, mape, mare, spearman_rho

import metric_oracle as oracle

values = st.lists(st.integers(-4, 4).map(float), min_size=2, max_size=10)


def test_perfect_predictions():
    m = compute_metrics([3.0, 1.0, 2.0], [3.0, 1.0, 2.0])
    assert (m.mae, m.mare, m.mape, m.kendall_tau, m.spearman_rho) == (0.0, 0.0, 0.0, 1.0, 1.0)


def test_reversed():
    x = [1.0, 2.0, 3.0, 4.0]
    assert kendall_tau(x, x[::-1]) == -1.0
    assert spearman_rho(x, x[::-1]) == pytest.approx(-1.0, abs=1e-15)


def test_tau_small_example():
    assert kendall_tau([1, 2, 3], [3, 1, 2]) == pytest.approx(-1 / 3, abs=1e-15)


def test_regression_formulas():
    pred, truth = [2.0, 5.0, 7.0], [1.0, 4.0, 10.0]
    assert mae(pred, truth) == pytest.approx(5 / 3)
    assert mare(pred, truth) == pytest.approx(5 / 15)
    assert mape(pred, truth) == (pytest.approx(100 * (1 + 0.25 + 0.3) / 3), 0)


def test_mape_excludes_zero_labels():
    value, excluded = mape([1.0, 2.0, 3.0], [0.0, 2.0, 6.0])
    assert excluded == 1
    assert value == pytest.approx(100 * 0.25)
    assert math.isnan(mape([1.0], [0.0])[0])


def test_constant_side_gives_nan():
    assert math.isnan(kendall_tau([1, 1, 1], [1, 2, 3]))
    assert math.isnan(spearman_rho([1, 1, 1], [1, 2, 3]))


def test_empty_test_set():
    with pytest.raises(ValueError):
        compute_metrics([], [])


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_against_oracles(data):
    x = data.draw(values)
    y = data.draw(st.lists(st.integers(-4, 4).map(float), min_size=len(x), max_size=len(x)))
    t, r = kendall_tau(x, y), spearman_rho(x, y)
    ot, orho = oracle.tau_b(x, y), oracle.rho(x, y)
    assert (math.isnan(t) and math.isnan(ot)) or t == ot
    assert (math.isnan(r) and math.isnan(orho)) or abs(r - orho) <= 1e-12
    if not math.isnan(t):
        assert -1 <= t <= 1 and -1 - 1e-12 <= r <= 1 + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.1, 1e3), min_size=1, max_size=20), st.randoms(use_true_random=False))
def test_regression_against_direct(truth, rnd):
    pred = [t + rnd.uniform(-5, 5) for t in truth]
    n = len(truth)
    assert mae(pred, truth) == pytest.approx(sum(abs(p - t) for p, t in zip(pred, truth)) / n, rel=1e-12)
    assert mare(pred, truth) == pytest.approx(
        sum(abs(p - t) for p, t in zip(pred, truth)) / sum(truth), rel=1e-12)
    assert mape(pred, truth)[0] == pytest.approx(
        100 * sum(abs(p - t) / t for p, t in zip(pred, truth)) / n, rel=1e-12)
    np.testing.assert_equal(compute_metrics(pred, truth).n, n)
