import numpy as np
import pytest

from fbsvie_lab.drivers import EMPTY_MARKS, MarkSpace, build_grid, sample_drivers, zero_future
from fbsvie_lab.errors import NumericalAbort
from fbsvie_lab.forward import (
    ensemble_to_csv,
    simulate_forward,
    simulate_forward_differential,
    simulate_linearized_forward,
)
from fbsvie_lab.models import ControlPolicy, Model, builtin


def _zero_u(n):
    return ControlPolicy.constant(0.0, n)


def test_det_volterra_matches_exponential():
    """b = a x with constant free term integrates the ODE x' = a x."""
    grid = build_grid(2.0, 400, 0, 1.0)
    m = builtin("det_volterra", a=-0.4)
    d = sample_drivers(grid, EMPTY_MARKS, 1, seed=0)
    ens = simulate_forward(m, grid, d, _zero_u(grid.n_steps))
    exact = np.exp(-0.4 * grid.times)
    assert ens.X_grid.shape == (401, 1)
    assert np.abs(ens.X_grid[:, 0] - exact).max() < 2e-3


def test_fast_path_matches_generic_volterra_sum():
    """The O(n) incremental accumulation must agree with the O(n^2) sum."""
    grid = build_grid(1.0, 60, 6, 1.0)
    m = builtin("sdde")
    d = sample_drivers(grid, EMPTY_MARKS, 30, seed=4)
    u = ControlPolicy.constant(0.2, grid.n_steps)
    fast = simulate_forward(m, grid, d, u)
    m.kernels_time_invariant = False
    slow = simulate_forward(m, grid, d, u)
    assert np.abs(fast.X - slow.X).max() < 1e-12


def test_true_volterra_kernel_closed_form():
    """b(t,s,x) = e^{-(t-s)} x gives X' = x0, i.e. X(t) = x0 (1 + t)."""
    x0 = 1.0
    m = Model(
        xi=lambda t: np.full_like(np.asarray(t, dtype=float), x0),
        xi_p=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        b=lambda t, s, x, x1, u: np.exp(-(t - s)) * x,
        b_t=lambda t, s, x, x1, u: -np.exp(-(t - s)) * x,
    )
    grid = build_grid(2.0, 400, 0, 1.0)
    d = sample_drivers(grid, EMPTY_MARKS, 1, seed=0)
    u = _zero_u(grid.n_steps)
    direct = simulate_forward(m, grid, d, u)
    exact = 1.0 + grid.times
    assert np.abs(direct.X_grid[:, 0] - exact).max() < 2e-2
    diff = simulate_forward_differential(m, grid, d, u)
    assert np.abs(diff.X_grid[:, 0] - exact).max() < 2e-2
    assert np.abs(diff.X_grid - direct.X_grid).max() < 4e-2


def test_direct_vs_differential_without_volterra_kernels():
    """With no first-argument dependence the two schemes coincide."""
    grid = build_grid(2.0, 100, 10, 1.0)
    m = builtin("sdde")
    d = sample_drivers(grid, EMPTY_MARKS, 50, seed=3)
    u = ControlPolicy.constant(0.1, grid.n_steps)
    a = simulate_forward(m, grid, d, u)
    b = simulate_forward_differential(m, grid, d, u)
    assert np.abs(a.X - b.X).max() < 1e-12


def test_initial_segment_and_delay_reads():
    grid = build_grid(1.0, 10, 4, 1.0)
    m = builtin("sdde", x0=0.0)
    m.xi = lambda t: 1.0 + np.asarray(t, dtype=float)
    d = sample_drivers(grid, EMPTY_MARKS, 3, seed=1)
    ens = simulate_forward(m, grid, d, _zero_u(grid.n_steps))
    # segment values on [-delay, 0]
    text = grid.times_ext
    assert np.allclose(ens.X[: 5, 0], 1.0 + text[:5])
    # delayed reads: X1 at grid index i is X at extended index i
    for i in range(grid.n_steps + 1):
        assert np.array_equal(ens.X1_grid[i], ens.X[i])


def test_jump_paths_move_only_at_jumps():
    grid = build_grid(1.0, 50, 0, 1.0)
    marks = MarkSpace(marks=(1.0,), intensities=(0.5,))
    m = builtin("jump_linear", a=0.0, a1=0.0, sigma0=0.0, theta_x=0.0, theta_u=0.5)
    d = sample_drivers(grid, marks, 200, seed=2)
    u = ControlPolicy.constant(1.0, grid.n_steps)
    ens = simulate_forward(m, grid, d, u)
    # drift b = u plus theta = 0.5 * u * e against compensated increments
    steps = np.arange(1, grid.n_steps + 1)[:, None]
    want = 1.0 + grid.dt * steps + 0.5 * d.comp[:, 0].cumsum(axis=0)
    assert np.allclose(ens.X_grid[1:], want)


def test_linearized_sensitivity_matches_finite_difference():
    grid = build_grid(1.0, 50, 0, 1.0)
    m = builtin("lq")
    d = sample_drivers(grid, EMPTY_MARKS, 40, seed=5)
    u = ControlPolicy.constant(0.3, grid.n_steps)
    rng = np.random.default_rng(0)
    beta = rng.normal(size=(grid.n_steps, 1))
    base = simulate_forward(m, grid, d, u)
    dX = simulate_linearized_forward(m, grid, d, u, beta, base)
    eps = 1e-6
    up = simulate_forward(m, grid, d, u.values + eps * beta)
    dn = simulate_forward(m, grid, d, u.values - eps * beta)
    fd = (up.X - dn.X) / (2 * eps)
    assert np.abs(dX - fd).max() < 1e-6  # dynamics are linear in (x, u)


def test_no_lookahead_prefix_bit_exact():
    grid = build_grid(1.0, 40, 5, 1.0)
    m = builtin("sdde")
    d = sample_drivers(grid, EMPTY_MARKS, 20, seed=6)
    u = ControlPolicy.constant(0.1, grid.n_steps)
    full = simulate_forward(m, grid, d, u)
    cut = simulate_forward(m, grid, zero_future(d, 20), u)
    de = grid.delay_steps
    assert np.array_equal(full.X[: de + 21], cut.X[: de + 21])


def test_numerical_abort_reports_step():
    m = Model(
        xi=lambda t: np.full_like(np.asarray(t, dtype=float), 4.0),
        b=lambda t, s, x, x1, u: x**3,
        kernels_time_invariant=True,
    )
    grid = build_grid(10.0, 100, 0, 1.0)
    d = sample_drivers(grid, EMPTY_MARKS, 1, seed=0)
    with pytest.raises(NumericalAbort) as exc:
        simulate_forward(m, grid, d, _zero_u(grid.n_steps))
    assert exc.value.step is not None


def test_ensemble_csv(tmp_path):
    grid = build_grid(1.0, 5, 0, 1.0)
    m = builtin("det_volterra")
    d = sample_drivers(grid, EMPTY_MARKS, 1, seed=0)
    ens = simulate_forward(m, grid, d, _zero_u(grid.n_steps))
    out = tmp_path / "state.csv"
    ensemble_to_csv(ens, str(out))
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "path,t,X"
    assert len(lines) == 1 + 6
