"""Adjoint processes and the Hamiltonian of the maximum principle.

The Hamiltonian splits into an instantaneous part

    H0(t) = f + b(t,t) p(t) + sigma(t,t) q(t,t) + sum_m theta(t,t,e_m) r(t,t,m) nu_m
          + g(t,t) lam(t)

and a memory part collecting the Volterra effects: forward-kernel derivatives
in the first time argument integrated against the future adjoints,

    int_t^inf [ db/ds(s,t) p(s) + dsigma/ds(s,t) q(s,t)
              + sum_m dtheta/ds(s,t,e_m) r(s,t,m) nu_m ] ds,

minus the total s-derivative of the generator integrated against the past
first adjoint,

    int_0^t [ dg/ds(s,t) + g_z(s,t) dZ/ds(s,t) + <grad_k g(s,t), dK/ds(s,t)> ] lam(s) ds.

The first adjoint lam runs forward from h'(Y(0)) with drift dH/dy, Brownian
coefficient dH/dz and jump density (dH/dk_m)/nu_m.  The second adjoint runs
backward from p(t_max) = 0 (horizon truncation) with drift
kappa(t) = -dH/dx(t) + dH/dx1(t + delay); its martingale kernels q(t,s),
r(t,s,m) are identified per step by increment regression.  The discrete
kappa carries no row dependence, so the kernels are constant in their first
argument and are stored as plain arrays indexed by s; their first-argument
derivatives (which would otherwise enter the p drift) vanish identically.

lam does not depend on (p, q, r), so one forward pass followed by one
backward pass solves the coupled adjoint system exactly -- no alternation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsvie import BackwardSolution, _step_regression
from .drivers import DriverPaths, MarkSpace, TimeGrid
from .fields import TriangularField
from .forward import ForwardEnsemble, _policy_values
from .models import ControlPolicy, Model


@dataclass
class AdjointSolution:
    lam: np.ndarray  # (n_steps + 1, P) first adjoint
    p: np.ndarray    # (n_steps + 1, P) second adjoint, p[n_steps] = 0
    q: np.ndarray    # (n_steps, P): q(t, s_j) for any t >= s_j
    r: np.ndarray    # (n_steps, n_marks, P)


# argument positions of x, x1, u in the kernel signatures (t, s, x, x1, u[, e])
_KIDX = {"x": 2, "x1": 3, "u": 4}
# and in the generator signature (t, s, x, x1, y, z, k, u, nu)
_GIDX = {"x": 2, "x1": 3, "y": 4, "u": 7}


def _fd1(fun, args, idx, step=1e-5):
    up, dn = list(args), list(args)
    a = np.asarray(args[idx], dtype=float)
    up[idx] = a + step
    dn[idx] = a - step
    return (np.asarray(fun(*up), dtype=float) - np.asarray(fun(*dn), dtype=float)) / (2 * step)


def _mixed(m: Model, key: str, first, args, idx):
    """Mixed second partial: supplied in model.second_partials under ``key``,
    else a central finite difference of the first partial."""
    sp = m.second_partials.get(key)
    if sp is not None:
        return np.asarray(sp(*args), dtype=float)
    return _fd1(first, args, idx)


def field_first_index_derivative(F: TriangularField, dt: float) -> TriangularField:
    """Forward difference of a triangular field across its first index,
    defined on the strict triangle s >= t + 1; constant-row fields have
    derivative zero."""
    if F.constant_rows:
        return TriangularField(np.zeros_like(F.values), F.n_steps, F.with_marks)
    vals = np.zeros_like(F.values)
    vals[:-1] = (F.values[1:] - F.values[:-1]) / dt
    return TriangularField(vals, F.n_steps, F.with_marks)


def has_memory(m: Model, lam: np.ndarray | None = None) -> bool:
    """Whether the memory part of the Hamiltonian can be nonzero."""
    if any(c is not None for c in (m.b_t, m.sigma_t, m.theta_t)):
        return True
    gen = m.g is not None and any(
        c is not None for c in (m.g_t, m.g_z, m.g_k)
    )
    if not gen:
        return False
    return lam is None or bool(np.any(lam))


def memory_terms(
    m: Model,
    grid: TimeGrid,
    marks: MarkSpace,
    state: ForwardEnsemble,
    uv: np.ndarray,
    bw: BackwardSolution,
    lam: np.ndarray,
    p: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    i: int,
    wanted: tuple = ("val",),
) -> dict:
    """Memory part of the Hamiltonian at step i and its requested partials.

    "val" gives the value; "x", "x1", "u", "y" give partials, using supplied
    mixed second partials (e.g. "b_tx", "g_zu") with finite-difference
    fallback.  The second-adjoint kernels are constant in their first
    argument, so q(s_j, t_i) = q[i] and r(s_j, t_i, m) = r[i, m].
    """
    n, dt = grid.n_steps, grid.dt
    times = grid.times
    nu, ev = marks.nu, marks.mark_values
    Xi, X1i, ui = state.X_grid[i], state.X1_grid[i], uv[i]
    out: dict = {w: 0.0 for w in wanted}

    js = np.arange(i + 1, n)
    if js.size:
        tj = times[js][:, None]
        args = (tj, times[i], Xi, X1i, ui)
        if m.b_t is not None:
            if "val" in wanted:
                out["val"] += dt * np.sum(np.asarray(m.b_t(*args)) * p[js], axis=0)
            for v in ("x", "x1", "u"):
                if v in wanted:
                    out[v] += dt * np.sum(
                        _mixed(m, "b_t" + v, m.b_t, args, _KIDX[v]) * p[js], axis=0
                    )
        if m.sigma_t is not None:
            if "val" in wanted:
                out["val"] += dt * q[i] * np.sum(np.asarray(m.sigma_t(*args)), axis=0)
            for v in ("x", "x1", "u"):
                if v in wanted:
                    out[v] += dt * q[i] * np.sum(
                        _mixed(m, "sigma_t" + v, m.sigma_t, args, _KIDX[v]), axis=0
                    )
        if m.theta_t is not None:
            for mm in range(marks.n_marks):
                ae = args + (ev[mm],)
                if "val" in wanted:
                    out["val"] += dt * nu[mm] * r[i, mm] * np.sum(
                        np.asarray(m.theta_t(*ae)), axis=0
                    )
                for v in ("x", "x1", "u"):
                    if v in wanted:
                        out[v] += dt * nu[mm] * r[i, mm] * np.sum(
                            _mixed(m, "theta_t" + v, m.theta_t, ae, _KIDX[v]), axis=0
                        )

    if i > 0 and m.g is not None and any(
        c is not None for c in (m.g_t, m.g_z, m.g_k)
    ):
        js = np.arange(i)
        tj = times[js][:, None]
        zcol = bw.Z.column(i)
        kcol = bw.K.column(i)
        Zji, dZ1 = zcol[:i], (zcol[1:] - zcol[:i]) / dt
        Kji, dK1 = kcol[:i], (kcol[1:] - kcol[:i]) / dt
        gargs = (tj, times[i], Xi, X1i, bw.Y[i], Zji, Kji, ui, nu)
        lamj = lam[js]

        def accumulate(first, key_base, weight):
            # weight: per-row multiplier applied to the coefficient
            if "val" in wanted:
                out["val"] -= dt * np.sum(np.asarray(first(*gargs)) * weight * lamj, axis=0)
            for v in ("x", "x1", "u", "y"):
                if v in wanted:
                    out[v] -= dt * np.sum(
                        _mixed(m, key_base + v, first, gargs, _GIDX[v]) * weight * lamj,
                        axis=0,
                    )

        if m.g_t is not None:
            accumulate(m.g_t, "g_t", 1.0)
        if m.g_z is not None:
            accumulate(m.g_z, "g_z", dZ1)
        if m.g_k is not None:
            # pair the mark-indexed gradient with dK/ds in L2(nu); g_k already
            # carries the nu factors, so the pairing is a plain mark sum
            if "val" in wanted:
                inner = np.sum(np.asarray(m.g_k(*gargs)) * dK1, axis=-2)
                out["val"] -= dt * np.sum(inner * lamj, axis=0)
            for v in ("x", "x1", "u", "y"):
                if v in wanted:
                    mixed = _mixed(m, "g_k" + v, m.g_k, gargs, _GIDX[v])
                    inner = np.sum(mixed * dK1, axis=-2)
                    out[v] -= dt * np.sum(inner * lamj, axis=0)
    return out


def solve_lambda(
    m: Model,
    grid: TimeGrid,
    marks: MarkSpace,
    drivers: DriverPaths,
    state: ForwardEnsemble,
    u: ControlPolicy | np.ndarray,
    bw: BackwardSolution,
) -> np.ndarray:
    """Forward first adjoint: lam(0) = h'(Y(0)), drift dH/dy, Brownian
    coefficient dH/dz, jump density (dH/dk_m)/nu_m (zero-intensity marks
    carry no jumps and are skipped)."""
    n, dt = grid.n_steps, grid.dt
    times = grid.times
    uv = _policy_values(u, grid)
    Xg, X1g = state.X_grid, state.X1_grid
    nu = marks.nu
    M = marks.n_marks
    Y, Zd = bw.Y, bw.Z.diag()
    Kd = bw.K.diag()

    if m.h_p is not None:
        lam0 = np.asarray(m.h_p(Y[0]), dtype=float)
    elif m.h is not None:
        lam0 = _fd1(m.h, (Y[0],), 0)
    else:
        lam0 = np.zeros(1)
    stoch = m.g_z is not None or m.g_k is not None
    P = max(
        lam0.shape[-1] if lam0.ndim else 1,
        Xg.shape[1], Y.shape[1], uv.shape[1],
        drivers.n_paths if stoch else 1,
    )
    lam = np.zeros((n + 1, P))
    lam[0] = lam0
    driven = any(c is not None for c in (m.f_y, m.g_y, m.g_z, m.g_k))
    if not driven and not np.any(lam0):
        return lam
    mem = m.g_t is not None
    for i in range(n):
        gargs = (times[i], times[i], Xg[i], X1g[i], Y[i], Zd[i], Kd[i], uv[i], nu)
        Hy = np.zeros(1)
        if m.f_y is not None:
            Hy = Hy + m.f_y(times[i], Xg[i], X1g[i], Y[i], uv[i])
        if m.g_y is not None:
            Hy = Hy + np.asarray(m.g_y(*gargs)) * lam[i]
        if mem and i > 0:
            Hy = Hy + memory_terms(
                m, grid, marks, state, uv, bw, lam,
                np.zeros((n + 1, 1)), np.zeros((n, 1)), np.zeros((n, M, 1)),
                i, ("y",),
            )["y"]
        nxt = lam[i] + Hy * dt
        if m.g_z is not None:
            nxt = nxt + np.asarray(m.g_z(*gargs)) * lam[i] * drivers.dB[i]
        if m.g_k is not None and M:
            gk = np.asarray(m.g_k(*gargs))
            for mm in range(M):
                if nu[mm] > 0:
                    nxt = nxt + gk[..., mm, :] * lam[i] / nu[mm] * drivers.comp[i, mm]
        lam[i + 1] = nxt
    return lam


def _coef_arrays(m: Model, grid: TimeGrid, state, uv, bw, marks, which: str):
    """Evaluate one family of first partials (x, x1 or u) of f, b, sigma,
    theta, g on the diagonal at every step; None where absent."""
    n = grid.n_steps
    t = grid.times[:n, None]
    Xg, X1g = state.X_grid[:n], state.X1_grid[:n]
    u = uv
    kargs = (t, t, Xg, X1g, u)
    gargs = (t, t, Xg, X1g, bw.Y[:n], bw.Z.diag(), bw.K.diag(), u, marks.nu)
    fargs = (t, Xg, X1g, bw.Y[:n], u)
    fp = getattr(m, "f_" + which, None)
    bp = getattr(m, "b_" + which)
    sp = getattr(m, "sigma_" + which)
    tp = getattr(m, "theta_" + which)
    gp = getattr(m, "g_" + which)
    out = {
        "f": np.asarray(fp(*fargs), dtype=float) if fp is not None else None,
        "b": np.asarray(bp(*kargs), dtype=float) if bp is not None else None,
        "sigma": np.asarray(sp(*kargs), dtype=float) if sp is not None else None,
        "g": np.asarray(gp(*gargs), dtype=float) if gp is not None else None,
    }
    if tp is not None:
        out["theta"] = [
            np.asarray(tp(*kargs, e), dtype=float) for e in marks.mark_values
        ]
    else:
        out["theta"] = None
    return out


def _h_partial_at(coefs, i, p_next, q_i, r_i, lam_i, nu):
    """Instantaneous Hamiltonian partial at step i from precomputed coefficient
    arrays and the adjoint values."""
    v = np.zeros(1)
    if coefs["f"] is not None:
        v = v + coefs["f"][i]
    if coefs["b"] is not None:
        v = v + coefs["b"][i] * p_next
    if coefs["sigma"] is not None:
        v = v + coefs["sigma"][i] * q_i
    if coefs["theta"] is not None:
        for mm, arr in enumerate(coefs["theta"]):
            v = v + nu[mm] * arr[i] * r_i[mm]
    if coefs["g"] is not None:
        v = v + coefs["g"][i] * lam_i
    return v


def solve_p(
    m: Model,
    grid: TimeGrid,
    marks: MarkSpace,
    drivers: DriverPaths,
    state: ForwardEnsemble,
    u: ControlPolicy | np.ndarray,
    bw: BackwardSolution,
    lam: np.ndarray,
    degree: int = 3,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward second adjoint with delayed drift: p(t_max) = 0 and

        p_i = E[ p_{i+1} - kappa_i dt | F_i ],
        kappa_i = -dH/dx(t_i) + dH/dx1(t_{i+d}),

    the anticipating x1 term being projected onto F_i by the regression.
    Kernels q, r come from increment regression of p_{i+1}."""
    n, dt, d = grid.n_steps, grid.dt, grid.delay_steps
    uv = _policy_values(u, grid)
    Xg, X1g = state.X_grid, state.X1_grid
    nu = marks.nu
    M = marks.n_marks
    stoch = Xg.shape[1] > 1
    P = drivers.n_paths if stoch else 1
    p = np.zeros((n + 1, P))
    q = np.zeros((n, P))
    r = np.zeros((n, M, P))

    cx = _coef_arrays(m, grid, state, uv, bw, marks, "x")
    use_x1 = any(
        c is not None for c in (m.f_x1, m.b_x1, m.sigma_x1, m.theta_x1, m.g_x1)
    )
    cx1 = _coef_arrays(m, grid, state, uv, bw, marks, "x1") if use_x1 else None
    mem = has_memory(m, lam)
    inv_nu_dt = np.array([1.0 / (v * dt) if v > 0 else 0.0 for v in nu])

    for i in range(n - 1, -1, -1):
        ce = _step_regression(Xg[i], X1g[i], drivers.n_paths, degree)
        # a deterministic p_{i+1} has identically zero martingale kernels;
        # the preallocated zeros stand in that case
        if not (P == 1 and not stoch):
            q[i] = ce(p[i + 1] * drivers.dB[i]) / dt
            for mm in range(M):
                r[i, mm] = ce(p[i + 1] * drivers.comp[i, mm]) * inv_nu_dt[mm]
        hx = _h_partial_at(cx, i, p[i + 1], q[i], r[i], lam[i], nu)
        if mem:
            hx = hx + memory_terms(
                m, grid, marks, state, uv, bw, lam, p, q, r, i, ("x",)
            )["x"]
        kappa = -hx
        j = i + d
        if use_x1 and j < n:
            hx1 = _h_partial_at(cx1, j, p[j + 1], q[j], r[j], lam[j], nu)
            if mem:
                hx1 = hx1 + memory_terms(
                    m, grid, marks, state, uv, bw, lam, p, q, r, j, ("x1",)
                )["x1"]
            kappa = kappa + hx1
        p[i] = ce(p[i + 1] - kappa * dt)
    return p, q, r


def solve_adjoints(
    m: Model,
    grid: TimeGrid,
    marks: MarkSpace,
    drivers: DriverPaths,
    state: ForwardEnsemble,
    u: ControlPolicy | np.ndarray,
    bw: BackwardSolution,
    degree: int = 3,
) -> AdjointSolution:
    """Coupled adjoint system: lam never reads (p, q, r), so the forward lam
    pass followed by the backward p pass is exact in one round."""
    lam = solve_lambda(m, grid, marks, drivers, state, u, bw)
    p, q, r = solve_p(m, grid, marks, drivers, state, u, bw, lam, degree)
    return AdjointSolution(lam=lam, p=p, q=q, r=r)


def hamiltonian_u_partial(
    m: Model,
    grid: TimeGrid,
    marks: MarkSpace,
    state: ForwardEnsemble,
    u: ControlPolicy | np.ndarray,
    bw: BackwardSolution,
    adj: AdjointSolution,
) -> np.ndarray:
    """dH/du along the trajectory, shape (n_steps, P).  The drift partial is
    paired with p_{i+1} so that E[dH/du * beta] dt is the exact discrete
    directional derivative of the objective (the increment regressions of q
    and r absorb the Ito terms)."""
    n = grid.n_steps
    uv = _policy_values(u, grid)
    nu = marks.nu
    cu = _coef_arrays(m, grid, state, uv, bw, marks, "u")
    P = max(
        adj.p.shape[1], adj.lam.shape[1], uv.shape[1], state.X_grid.shape[1],
    )
    out = np.zeros((n, P))
    for i in range(n):
        out[i] = _h_partial_at(cu, i, adj.p[i + 1], adj.q[i], adj.r[i], adj.lam[i], nu)
    if has_memory(m, adj.lam):
        for i in range(n):
            out[i] = out[i] + memory_terms(
                m, grid, marks, state, uv, bw, adj.lam, adj.p, adj.q, adj.r,
                i, ("u",),
            )["u"]
    return out


def memory_hamiltonian_values(
    m: Model,
    grid: TimeGrid,
    marks: MarkSpace,
    state: ForwardEnsemble,
    u: ControlPolicy | np.ndarray,
    bw: BackwardSolution,
    adj: AdjointSolution,
) -> np.ndarray:
    """The memory part of the Hamiltonian at every grid step, shape (n, P).

    Exactly zero (not merely small) when no coefficient depends on its first
    time argument and the generator carries no z/k memory.
    """
    n = grid.n_steps
    uv = _policy_values(u, grid)
    if not has_memory(m, adj.lam):
        return np.zeros((n, 1))
    out = []
    for i in range(n):
        out.append(
            np.atleast_1d(
                memory_terms(
                    m, grid, marks, state, uv, bw, adj.lam, adj.p, adj.q,
                    adj.r, i, ("val",),
                )["val"]
            )
        )
    width = max(v.shape[-1] for v in out)
    return np.stack([np.broadcast_to(v, (width,)) for v in out])


def eval_hamiltonian(
    m: Model,
    t: float,
    x,
    x1,
    y,
    z,
    k,
    u,
    nu: np.ndarray,
    lam_t,
    p_t,
    q_t,
    r_t,
    mark_values: np.ndarray,
):
    """Instantaneous Hamiltonian at diagonal time t for arbitrary probe
    arguments; used by the concavity diagnostics."""
    v = np.zeros(1)
    if m.f is not None:
        v = v + m.f(t, x, x1, y, u)
    if m.b is not None:
        v = v + m.b(t, t, x, x1, u) * p_t
    if m.sigma is not None:
        v = v + m.sigma(t, t, x, x1, u) * q_t
    if m.theta is not None:
        for mm, e in enumerate(mark_values):
            v = v + nu[mm] * m.theta(t, t, x, x1, u, e) * r_t[mm]
    if m.g is not None:
        v = v + m.g(t, t, x, x1, y, z, k, u, nu) * lam_t
    return v
