import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddos_mos.metrics import kendall_tau, mse, pearson, spearman
from ddos_mos.refine import DegeneratePredictor, RefinementLayer, apply_refinement, fit_refinement


def test_exact_recovery():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    layer = fit_refinement(x, 2 * x + 0.5)
    assert layer.a == pytest.approx(2.0, abs=1e-12) and layer.b == pytest.approx(0.5, abs=1e-12)


def test_lstsq_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(3, 1, 100)
    y = 0.7 * x + rng.normal(0, 0.3, 100)
    layer = fit_refinement(x, y)
    (a, b), *_ = np.linalg.lstsq(np.c_[x, np.ones_like(x)], y, rcond=None)
    assert layer.a == pytest.approx(a, abs=1e-10) and layer.b == pytest.approx(b, abs=1e-10)


def test_degenerate():
    with pytest.raises(DegeneratePredictor, match="degenerate predictor"):
        fit_refinement([3.0] * 10, np.arange(10.0))


def test_negative_slope_warns_and_is_kept():
    with pytest.warns(RuntimeWarning, match="slope"):
        layer = fit_refinement([1.0, 2.0, 3.0], [3.0, 2.0, 1.0])
    assert layer.a == pytest.approx(-1.0)


def test_apply_and_tensors():
    layer = RefinementLayer(2.0, -1.0)
    assert apply_refinement(layer, 3.0) == 5.0
    np.testing.assert_array_equal(apply_refinement(layer, [0.0, 1.0]), [-1.0, 1.0])
    assert RefinementLayer.from_tensors(layer.tensors()) == layer
    assert RefinementLayer.from_tensors({}) is None


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_correlations_invariant_and_mse_not_worse(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(3, 1, 40)
    y = np.clip(np.round(x + rng.normal(0, 1, 40)), 1, 5)
    if np.var(y) == 0:
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        layer = fit_refinement(x, y)
    z = apply_refinement(layer, x)
    assert mse(z, y) <= mse(x, y) + 1e-12
    if layer.a > 0:
        assert abs(pearson(z, y) - pearson(x, y)) < 1e-9
        assert abs(spearman(z, y) - spearman(x, y)) < 1e-9
        assert abs(kendall_tau(z, y) - kendall_tau(x, y)) < 1e-9
