import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsvie_lab.regression import ConditionalExpectation, polynomial_design


def _state(n=500, seed=0):
    return np.random.default_rng(seed).normal(size=n)


def test_design_always_has_constant_column():
    x = _state()
    d = polynomial_design([x], len(x), 3)
    assert np.all(d[:, 0] == 1.0)
    assert d.shape == (len(x), 4)  # 1, x, x^2, x^3


def test_design_drops_deterministic_and_duplicate_columns():
    x = _state()
    d = polynomial_design([x, x.copy(), np.ones(500) * 3.0, np.zeros((1,))], 500, 2)
    # one informative feature survives: 1, x, x^2
    assert d.shape == (500, 3)


def test_design_two_features_cross_terms():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(2, 400))
    d = polynomial_design([x, y], 400, 2)
    # 1, x, x^2, x y, y, y^2
    assert d.shape == (400, 6)


def test_projection_reproduces_functions_in_span():
    x = _state(2000, 3)
    d = polynomial_design([x], 2000, 2)
    ce = ConditionalExpectation(d)
    target = 2.0 - 3.0 * x + 0.5 * x**2
    got = ce(target)
    assert np.abs(got - target).max() < 1e-10


def test_projection_preserves_mean():
    rng = np.random.default_rng(4)
    x = rng.normal(size=1000)
    ce = ConditionalExpectation(polynomial_design([x], 1000, 3))
    target = np.sin(x) + rng.normal(size=1000)
    got = ce(target)
    assert got.mean() == pytest.approx(target.mean(), abs=1e-10)


def test_broadcast_targets_pass_through():
    x = _state()
    ce = ConditionalExpectation(polynomial_design([x], 500, 2))
    target = np.array([[1.5], [2.5]])
    got = ce(target)
    assert np.array_equal(got, target)
    got[...] = 0.0
    assert target[0, 0] == 1.5  # returned a copy


def test_trivial_design_gives_path_average():
    ce = ConditionalExpectation(polynomial_design([np.ones(50)], 50, 3))
    assert ce.nb == 1
    target = np.arange(50.0)
    got = ce(target)
    assert got.shape == (1,)
    assert got[0] == pytest.approx(target.mean())


def test_multi_row_targets():
    x = _state(300, 6)
    ce = ConditionalExpectation(polynomial_design([x], 300, 1))
    target = np.stack([1.0 + x, 2.0 - x, np.full(300, 7.0)])
    got = ce(target)
    assert got.shape == (3, 300)
    assert np.abs(got - target).max() < 1e-9


def test_rank_deficient_design_falls_back():
    x = _state(200, 7)
    d = polynomial_design([x], 200, 2)
    d = np.concatenate([d, d[:, 1:2]], axis=1)  # duplicate column
    with pytest.warns(UserWarning, match="rank-deficient"):
        ce = ConditionalExpectation(d)
    assert ce.nb < d.shape[1]
    target = 1.0 + x
    assert np.abs(ce(target) - target).max() < 1e-8


@settings(max_examples=20, deadline=None)
@given(
    a=st.floats(-3, 3, allow_nan=False),
    b=st.floats(-3, 3, allow_nan=False),
    seed=st.integers(0, 2**16),
)
def test_linear_functions_reproduced(a, b, seed):
    x = np.random.default_rng(seed).normal(size=400)
    ce = ConditionalExpectation(polynomial_design([x], 400, 1))
    target = a + b * x
    assert np.abs(ce(target) - target).max() < 1e-8 * max(1.0, abs(a) + abs(b))


def test_reductions_independent_of_blas_threads():
    """The Gram/cross computations use fixed-order sums; re-running gives
    bit-identical coefficients."""
    x = _state(5000, 8)
    d = polynomial_design([x], 5000, 3)
    t = np.random.default_rng(9).normal(size=5000)
    a = ConditionalExpectation(d)(t)
    b = ConditionalExpectation(d)(t)
    assert np.array_equal(a, b)
