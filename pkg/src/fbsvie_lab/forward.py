"""Forward Volterra state simulation with delay and jumps.

Three schemes: the direct Volterra sum (primary, faithful to the integral
form), the differential form with incremental correction integrals (used as a
cross-check; requires kernel time-derivatives and xi'), and the linearized
sensitivity recursion for a control direction.

Delay reads before the grid origin resolve to the initial segment xi exactly.
Deterministic models keep a broadcast path axis of length 1 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drivers import DriverPaths, TimeGrid
from .errors import NumericalAbort, ValidationError
from .models import ControlPolicy, Model


@dataclass
class ForwardEnsemble:
    """State paths X indexed by extended step e = i + delay_steps, i in [-d, n]."""

    X: np.ndarray  # (delay_steps + n_steps + 1, n_paths)
    grid: TimeGrid

    @property
    def n_paths(self) -> int:
        return self.X.shape[-1]

    @property
    def X_grid(self) -> np.ndarray:
        """X at grid indices 0..n_steps, shape (n_steps + 1, n_paths)."""
        return self.X[self.grid.delay_steps:]

    @property
    def X1_grid(self) -> np.ndarray:
        """Delayed state X(t_i - delay) at grid indices 0..n_steps."""
        return self.X[: self.grid.n_steps + 1]


def _policy_values(u: ControlPolicy | np.ndarray, grid: TimeGrid) -> np.ndarray:
    vals = u.values if isinstance(u, ControlPolicy) else np.asarray(u, dtype=float)
    if vals.ndim != 2 or vals.shape[0] != grid.n_steps:
        raise ValidationError(
            f"control values must have shape (n_steps, n_paths), got {vals.shape}"
        )
    return vals


def _out_width(m: Model, grid: TimeGrid, drivers: DriverPaths, uv: np.ndarray) -> int:
    stochastic = m.sigma is not None or (
        m.theta is not None and drivers.marks.n_marks > 0
    )
    if stochastic:
        return max(drivers.n_paths, uv.shape[1])
    return uv.shape[1]


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.argmax(~np.isfinite(x)))
        raise NumericalAbort(
            f"non-finite state at step {step}, path {bad}", step=step, path=bad
        )


def simulate_forward(
    m: Model, grid: TimeGrid, drivers: DriverPaths, u: ControlPolicy | np.ndarray
) -> ForwardEnsemble:
    """Direct Volterra scheme: X_i = xi(t_i) + sum_{j<i} of kernel increments.

    Cost O(n_paths * n_steps^2 * (1 + n_marks)); models whose kernels do not
    depend on their first time argument may opt into an O(n_steps) incremental
    accumulation via ``kernels_time_invariant``.
    """
    uv = _policy_values(u, grid)
    n, d, dt = grid.n_steps, grid.delay_steps, grid.dt
    times = grid.times
    P = _out_width(m, grid, drivers, uv)
    X = np.empty((d + n + 1, P))
    text = grid.times_ext
    seg = np.asarray(m.xi(text[: d + 1]), dtype=float) if m.xi is not None else np.zeros(d + 1)
    X[: d + 1] = seg[:, None]
    marks = drivers.marks
    ev = marks.mark_values

    if m.kernels_time_invariant:
        acc = np.zeros(P)
        for i in range(1, n + 1):
            j = i - 1
            xj, x1j, uj = X[d + j], X[j], uv[j]
            inc = np.zeros(P)
            if m.b is not None:
                inc = inc + m.b(times[j], times[j], xj, x1j, uj) * dt
            if m.sigma is not None:
                inc = inc + m.sigma(times[j], times[j], xj, x1j, uj) * drivers.dB[j]
            if m.theta is not None:
                for mm in range(marks.n_marks):
                    inc = inc + m.theta(times[j], times[j], xj, x1j, uj, ev[mm]) * drivers.comp[j, mm]
            acc = acc + inc
            xi_i = float(m.xi(times[i])) if m.xi is not None else 0.0
            X[d + i] = xi_i + acc
            _check_finite(X[d + i], i)
        return ForwardEnsemble(X, grid)

    for i in range(1, n + 1):
        ti = times[i]
        tj = times[:i, None]
        xj, x1j, uj = X[d:d + i], X[:i], uv[:i]
        acc = np.zeros(P)
        if m.b is not None:
            acc = acc + dt * np.sum(m.b(ti, tj, xj, x1j, uj), axis=0)
        if m.sigma is not None:
            acc = acc + np.sum(m.sigma(ti, tj, xj, x1j, uj) * drivers.dB[:i], axis=0)
        if m.theta is not None:
            for mm in range(marks.n_marks):
                acc = acc + np.sum(
                    m.theta(ti, tj, xj, x1j, uj, ev[mm]) * drivers.comp[:i, mm], axis=0
                )
        xi_i = float(m.xi(ti)) if m.xi is not None else 0.0
        X[d + i] = xi_i + acc
        _check_finite(X[d + i], i)
    return ForwardEnsemble(X, grid)


def simulate_forward_differential(
    m: Model, grid: TimeGrid, drivers: DriverPaths, u: ControlPolicy | np.ndarray
) -> ForwardEnsemble:
    """Differential-form scheme: step dX with diagonal coefficients plus the
    Volterra correction integrals built from kernel time-derivatives and xi'.

    When no coefficient depends on its first time argument the corrections
    vanish identically and this is a plain Euler delay-SDE stepper.
    """
    uv = _policy_values(u, grid)
    n, d, dt = grid.n_steps, grid.delay_steps, grid.dt
    times = grid.times
    P = _out_width(m, grid, drivers, uv)
    X = np.empty((d + n + 1, P))
    text = grid.times_ext
    seg = np.asarray(m.xi(text[: d + 1]), dtype=float) if m.xi is not None else np.zeros(d + 1)
    X[: d + 1] = seg[:, None]
    marks = drivers.marks
    ev = marks.mark_values

    for i in range(n):
        ti = times[i]
        xi_, x1i, ui = X[d + i], X[i], uv[i]
        drift = np.zeros(P)
        if m.xi_p is not None:
            drift = drift + m.xi_p(ti)
        if m.b is not None:
            drift = drift + m.b(ti, ti, xi_, x1i, ui)
        if i > 0:
            tj = times[:i, None]
            xj, x1j, uj = X[d:d + i], X[:i], uv[:i]
            if m.b_t is not None:
                drift = drift + dt * np.sum(m.b_t(ti, tj, xj, x1j, uj), axis=0)
            if m.sigma_t is not None:
                drift = drift + np.sum(
                    m.sigma_t(ti, tj, xj, x1j, uj) * drivers.dB[:i], axis=0
                )
            if m.theta_t is not None:
                for mm in range(marks.n_marks):
                    drift = drift + np.sum(
                        m.theta_t(ti, tj, xj, x1j, uj, ev[mm]) * drivers.comp[:i, mm],
                        axis=0,
                    )
        new = X[d + i] + drift * dt
        if m.sigma is not None:
            new = new + m.sigma(ti, ti, xi_, x1i, ui) * drivers.dB[i]
        if m.theta is not None:
            for mm in range(marks.n_marks):
                new = new + m.theta(ti, ti, xi_, x1i, ui, ev[mm]) * drivers.comp[i, mm]
        X[d + i + 1] = new
        _check_finite(X[d + i + 1], i + 1)
    return ForwardEnsemble(X, grid)


def simulate_linearized_forward(
    m: Model,
    grid: TimeGrid,
    drivers: DriverPaths,
    u: ControlPolicy | np.ndarray,
    beta_dir: np.ndarray,
    base: ForwardEnsemble,
) -> np.ndarray:
    """Sensitivity of the state in a control direction: the linear Volterra
    recursion driven by the control-partials of the kernels along the base
    trajectory.  Returns dX at extended indices, zero on the initial segment.
    """
    uv = _policy_values(u, grid)
    beta = np.asarray(beta_dir, dtype=float)
    if beta.ndim == 1:
        beta = beta[:, None]
    if beta.shape[0] != grid.n_steps:
        raise ValidationError("beta_dir must have n_steps rows")
    n, d, dt = grid.n_steps, grid.delay_steps, grid.dt
    times = grid.times
    P = int(np.broadcast_shapes(
        (base.n_paths,), (beta.shape[1],), (uv.shape[1],),
        (drivers.n_paths if (m.sigma is not None or m.theta is not None) else 1,),
    )[0])
    dX = np.zeros((d + n + 1, P))
    marks = drivers.marks
    ev = marks.mark_values
    Xg, X1g = base.X_grid, base.X1_grid

    for i in range(1, n + 1):
        ti = times[i]
        tj = times[:i, None]
        xj, x1j, uj = Xg[:i], X1g[:i], uv[:i]
        dxj, dx1j, bj = dX[d:d + i], dX[:i], beta[:i]
        acc = np.zeros(P)
        if m.b is not None:
            term = np.zeros((i, P))
            if m.b_x is not None:
                term = term + m.b_x(ti, tj, xj, x1j, uj) * dxj
            if m.b_x1 is not None:
                term = term + m.b_x1(ti, tj, xj, x1j, uj) * dx1j
            if m.b_u is not None:
                term = term + m.b_u(ti, tj, xj, x1j, uj) * bj
            acc = acc + dt * np.sum(term, axis=0)
        if m.sigma is not None:
            term = np.zeros((i, P))
            if m.sigma_x is not None:
                term = term + m.sigma_x(ti, tj, xj, x1j, uj) * dxj
            if m.sigma_x1 is not None:
                term = term + m.sigma_x1(ti, tj, xj, x1j, uj) * dx1j
            if m.sigma_u is not None:
                term = term + m.sigma_u(ti, tj, xj, x1j, uj) * bj
            acc = acc + np.sum(term * drivers.dB[:i], axis=0)
        if m.theta is not None:
            for mm in range(marks.n_marks):
                term = np.zeros((i, P))
                if m.theta_x is not None:
                    term = term + m.theta_x(ti, tj, xj, x1j, uj, ev[mm]) * dxj
                if m.theta_x1 is not None:
                    term = term + m.theta_x1(ti, tj, xj, x1j, uj, ev[mm]) * dx1j
                if m.theta_u is not None:
                    term = term + m.theta_u(ti, tj, xj, x1j, uj, ev[mm]) * bj
                acc = acc + np.sum(term * drivers.comp[:i, mm], axis=0)
        dX[d + i] = acc
    return dX


def ensemble_to_csv(ens: ForwardEnsemble, path: str) -> None:
    """Write (path, t, X) rows for grid indices 0..n_steps."""
    times = ens.grid.times
    Xg = ens.X_grid
    with open(path, "w") as fh:
        fh.write("path,t,X\n")
        for p in range(Xg.shape[1]):
            for i in range(Xg.shape[0]):
                fh.write(f"{p},{times[i]:.17g},{Xg[i, p]:.17g}\n")
