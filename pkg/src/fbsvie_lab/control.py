"""Objective evaluation, gradient-based policy improvement, and the
diagnostics attached to the maximum principle: first-variation checks,
stationarity under partial information, transversality decay, and concavity
probes.

The objective J(u) = E[ int_0^inf f(t, X, X1, Y, u) dt + h(Y(0)) ] is
maximized by projected gradient ascent: the Hamiltonian control-partial is
projected onto the controller's information structure (the discrete analogue
of E[dH/du | G_t] = 0 at a stationary point) and a step is taken with
backtracking on the step size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import AdjointSolution, eval_hamiltonian, hamiltonian_u_partial, solve_adjoints
from .bsvie import BackwardSolution, picard_solve
from .drivers import DriverPaths, MarkSpace, TimeGrid, weighted_norm_sq
from .errors import ValidationError
from .forward import ForwardEnsemble, _policy_values, simulate_forward
from .models import ControlPolicy, InfoStructure, Model
from .regression import ConditionalExpectation, polynomial_design


def solve_pipeline(
    m: Model,
    grid: TimeGrid,
    marks: MarkSpace,
    drivers: DriverPaths,
    u: ControlPolicy | np.ndarray,
    degree: int = 3,
    picard_tol: float = 1e-8,
    picard_max_iter: int = 50,
    cap_mb: float | None = None,
) -> tuple[ForwardEnsemble, BackwardSolution, AdjointSolution]:
    """Forward state, backward pair, and adjoints for one policy."""
    state = simulate_forward(m, grid, drivers, u)
    bw = picard_solve(
        m, grid, marks, drivers, state, u,
        tol=picard_tol, max_iter=picard_max_iter, degree=degree, cap_mb=cap_mb,
    )
    adj = solve_adjoints(m, grid, marks, drivers, state, u, bw, degree)
    return state, bw, adj


def evaluate_objective(
    m: Model,
    grid: TimeGrid,
    state: ForwardEnsemble,
    u: ControlPolicy | np.ndarray,
    bw: BackwardSolution,
) -> tuple[float, float]:
    """Monte Carlo objective value and its standard error."""
    n, dt = grid.n_steps, grid.dt
    uv = _policy_values(u, grid)
    per_path = np.zeros(1)
    if m.f is not None:
        t = grid.times[:n, None]
        vals = m.f(t, state.X_grid[:n], state.X1_grid[:n], bw.Y[:n], uv)
        per_path = per_path + dt * np.sum(np.asarray(vals, dtype=float), axis=0)
    if m.h is not None:
        per_path = per_path + np.asarray(m.h(bw.Y[0]), dtype=float)
    per_path = np.atleast_1d(np.squeeze(per_path, axis=tuple(range(per_path.ndim - 1))))
    J = float(per_path.mean())
    P = per_path.shape[0]
    se = float(per_path.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    return J, se


def project_onto_info(
    vals: np.ndarray,
    info: InfoStructure,
    grid: TimeGrid,
    drivers: DriverPaths,
    state: ForwardEnsemble,
    degree: int = 2,
) -> np.ndarray:
    """Project per-(step, path) values onto the controller's information.

    "full": identity.  "trivial": per-step path average (deterministic
    controls only).  "delayed" with lag l: regression on the state and the
    Brownian level observed l steps ago; steps before the lag see nothing and
    get the path average.
    """
    vals = np.asarray(vals, dtype=float)
    n = grid.n_steps
    if vals.shape[0] != n:
        raise ValidationError("values must have n_steps rows")
    if info.kind == "full":
        return vals
    if info.kind == "trivial":
        return np.broadcast_to(vals.mean(axis=-1, keepdims=True), vals.shape).copy()
    lag = info.lag_steps(grid)
    out = np.empty_like(np.broadcast_to(vals, (n, drivers.n_paths)))
    B = np.concatenate(
        [np.zeros((1, drivers.n_paths)), np.cumsum(drivers.dB, axis=0)]
    )
    for i in range(n):
        if i < lag:
            out[i] = vals[i].mean()
            continue
        j = i - lag
        design = polynomial_design(
            [state.X_grid[j], state.X1_grid[j], B[j]], drivers.n_paths, degree
        )
        out[i] = ConditionalExpectation(design)(np.broadcast_to(vals[i], (drivers.n_paths,)))
    return out


def variation_derivative(
    grid: TimeGrid,
    hu: np.ndarray,
    beta_dir: np.ndarray,
) -> float:
    """Directional derivative of the objective in a control direction:
    E[ int dH/du(t) beta(t) dt ]."""
    beta = np.asarray(beta_dir, dtype=float)
    if beta.ndim == 1:
        beta = beta[:, None]
    prod = (hu * beta).mean(axis=-1)
    return float(grid.dt * prod.sum())


@dataclass
class VariationCheck:
    analytic: float
    finite_diff: float
    eps: float

    @property
    def abs_err(self) -> float:
        return abs(self.analytic - self.finite_diff)

    @property
    def rel_err(self) -> float:
        return self.abs_err / max(1.0, abs(self.finite_diff))


def first_variation_check(
    m: Model,
    grid: TimeGrid,
    marks: MarkSpace,
    drivers: DriverPaths,
    u: ControlPolicy | np.ndarray,
    beta_dir: np.ndarray,
    eps: float = 1e-3,
    degree: int = 3,
) -> VariationCheck:
    """Adjoint-based directional derivative against a central finite
    difference of the simulated objective with common random numbers."""
    uv = _policy_values(u, grid)
    beta = np.asarray(beta_dir, dtype=float)
    if beta.ndim == 1:
        beta = beta[:, None]
    state, bw, adj = solve_pipeline(m, grid, marks, drivers, uv, degree=degree)
    hu = hamiltonian_u_partial(m, grid, marks, state, uv, bw, adj)
    analytic = variation_derivative(grid, hu, beta)

    def J_of(uvals):
        st = simulate_forward(m, grid, drivers, uvals)
        b = picard_solve(m, grid, marks, drivers, st, uvals, degree=degree)
        return evaluate_objective(m, grid, st, uvals, b)[0]

    fd = (J_of(uv + eps * beta) - J_of(uv - eps * beta)) / (2 * eps)
    return VariationCheck(analytic=analytic, finite_diff=fd, eps=eps)


@dataclass
class OptimizeReport:
    J_history: list = field(default_factory=list)
    se_history: list = field(default_factory=list)
    stationarity_history: list = field(default_factory=list)
    step_history: list = field(default_factory=list)
    n_sweeps: int = 0
    converged: bool = False
    aborted: bool = False
    u: ControlPolicy | None = None
    state: ForwardEnsemble | None = None
    bw: BackwardSolution | None = None
    adj: AdjointSolution | None = None


def optimize_control(
    m: Model,
    grid: TimeGrid,
    marks: MarkSpace,
    drivers: DriverPaths,
    u0: ControlPolicy,
    step: float = 1.0,
    max_sweeps: int = 100,
    stat_tol: float = 0.0,
    degree: int = 3,
    picard_tol: float = 1e-8,
    picard_max_iter: int = 50,
    min_step: float = 1e-6,
    cap_mb: float | None = None,
) -> OptimizeReport:
    """Projected gradient ascent on the policy.

    Each sweep re-solves the full pipeline, projects dH/du onto the
    information structure, and steps u <- clip(u + step * grad).  Three
    consecutive objective decreases halve the step and revert to the best
    policy; if the step falls below ``min_step`` the run aborts."""
    info = u0.info
    u = u0.clipped(m.U)
    rep = OptimizeReport()
    best_J, best_u = -np.inf, u
    decreases = 0
    for sweep in range(1, max_sweeps + 1):
        state, bw, adj = solve_pipeline(
            m, grid, marks, drivers, u, degree, picard_tol, picard_max_iter, cap_mb
        )
        J, se = evaluate_objective(m, grid, state, u, bw)
        hu = hamiltonian_u_partial(m, grid, marks, state, u, bw, adj)
        grad = project_onto_info(hu, info, grid, drivers, state, degree)
        stat = float(np.sqrt(weighted_norm_sq(grad, None, None, grid)))
        rep.J_history.append(J)
        rep.se_history.append(se)
        rep.stationarity_history.append(stat)
        rep.step_history.append(step)
        rep.n_sweeps = sweep
        if J > best_J:
            best_J, best_u = J, u
            rep.state, rep.bw, rep.adj = state, bw, adj
            decreases = 0
        else:
            decreases += 1
            if decreases >= 3:
                step *= 0.5
                u = best_u
                decreases = 0
                if step < min_step:
                    rep.aborted = True
                    break
                continue
        if stat_tol > 0 and stat <= stat_tol:
            rep.converged = True
            break
        u = ControlPolicy(
            np.clip(u.values + step * grad, m.U[0], m.U[1]), info
        )
    rep.u = best_u
    return rep


@dataclass
class TransversalityReport:
    times: list
    pX: list     # |E[p(t) X(t)]|
    lamY: list   # |E[lam(t) Y(t)]|

    @property
    def decaying(self) -> bool:
        vals = [a + b for a, b in zip(self.pX, self.lamY)]
        return all(vals[i + 1] <= vals[i] + 1e-12 for i in range(len(vals) - 1))


def transversality_diagnostics(
    grid: TimeGrid,
    state: ForwardEnsemble,
    bw: BackwardSolution,
    adj: AdjointSolution,
    checkpoints: list | None = None,
    other_state: ForwardEnsemble | None = None,
    other_bw: BackwardSolution | None = None,
) -> TransversalityReport:
    """Size of the transversality pairings at horizon checkpoints.

    With a comparison policy's trajectories supplied, reports
    |E[p(t)(X(t) - X_other(t))]| and |E[lam(t)(Y_other(t) - Y(t))]|, the
    pairings whose decay toward the truncation time justifies the truncated
    problem standing in for the infinite-horizon one; without one, pairs
    against the trajectories themselves."""
    if checkpoints is None:
        checkpoints = [grid.t_max * c for c in (0.25, 0.5, 0.75, 1.0)]
    times, pXs, lamYs = [], [], []
    for c in checkpoints:
        i = int(round(c / grid.dt))
        i = min(max(i, 0), grid.n_steps)
        times.append(grid.times[i])
        dx = state.X_grid[i]
        if other_state is not None:
            dx = dx - other_state.X_grid[i]
        dy = bw.Y[i]
        if other_bw is not None:
            dy = other_bw.Y[i] - dy
        pXs.append(abs(float((adj.p[i] * dx).mean())))
        lamYs.append(abs(float((adj.lam[i] * dy).mean())))
    return TransversalityReport(times=times, pX=pXs, lamY=lamYs)


@dataclass
class ConcavityReport:
    hamiltonian_ok: bool
    terminal_ok: bool
    failures: list
    n_probes: int

    @property
    def passed(self) -> bool:
        return self.hamiltonian_ok and self.terminal_ok


def check_concavity(
    m: Model,
    grid: TimeGrid,
    marks: MarkSpace,
    state: ForwardEnsemble,
    u: ControlPolicy | np.ndarray,
    bw: BackwardSolution,
    adj: AdjointSolution,
    n_probes: int = 200,
    seed: int = 0,
    scale: float = 2.0,
) -> ConcavityReport:
    """Midpoint concavity probes of the Hamiltonian in (x, x1, u) (at fixed
    adjoints along the trajectory) and of the terminal reward h in y.

    Sufficiency of the maximum principle needs both concave; a single
    violated midpoint inequality fails the check.
    """
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    n = grid.n_steps
    nu, ev = marks.nu, marks.mark_values
    M = marks.n_marks
    failures: list = []
    ham_ok = True
    tol = 1e-9
    for _ in range(n_probes):
        i = int(rng.integers(0, n))
        t = grid.times[i]
        lam_t = float(adj.lam[i].mean())
        p_t = float(adj.p[i + 1].mean())
        q_t = float(adj.q[i].mean())
        r_t = adj.r[i].mean(axis=-1)
        y = float(bw.Y[i].mean())
        z = float(bw.Z.diag()[i].mean())
        k = bw.K.diag()[i].mean(axis=-1)[:, None] if M else np.zeros((0, 1))
        a = rng.normal(scale=scale, size=3)
        b = rng.normal(scale=scale, size=3)
        mid = 0.5 * (a + b)

        def H(v):
            return float(
                np.asarray(
                    eval_hamiltonian(
                        m, t, v[0], v[1], y, z, k, v[2], nu, lam_t, p_t, q_t, r_t, ev
                    )
                ).mean()
            )

        gap = H(mid) - 0.5 * (H(a) + H(b))
        if gap < -tol * max(1.0, abs(H(mid))):
            ham_ok = False
            failures.append(f"Hamiltonian midpoint gap {gap:.3e} at t={t:.3f}")
            break
    term_ok = True
    if m.h is not None:
        for _ in range(n_probes):
            a, b = rng.normal(scale=scale, size=2)
            mid = 0.5 * (a + b)
            gap = float(m.h(mid)) - 0.5 * (float(m.h(a)) + float(m.h(b)))
            if gap < -1e-9 * max(1.0, abs(float(m.h(mid)))):
                term_ok = False
                failures.append(f"terminal reward midpoint gap {gap:.3e}")
                break
    return ConcavityReport(
        hamiltonian_ok=ham_ok, terminal_ok=term_ok, failures=failures,
        n_probes=n_probes,
    )
