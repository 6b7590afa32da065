"""Coefficient bundles defining a concrete control problem, control policies,
information structures, and the builtin benchmark catalog.

A model collects the free term ``xi``, the forward kernels ``b, sigma, theta``,
the backward generator ``g``, the running reward ``f`` and terminal reward
``h``, together with their first partial derivatives, a Lipschitz constant
``L`` for ``g`` in (y, z, k), and the control interval ``U``.

Coefficient callables are vectorized over numpy arrays.  A ``None`` coefficient
means identically zero; the simulators exploit this to keep deterministic
quantities stored with a broadcast path axis.  The k-argument of ``g`` is a
mark-indexed vector with shape (..., n_marks, n_paths); ``g`` and its
k-gradient additionally receive the intensity vector ``nu`` so that the
L2(nu) pairing is well-defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from .drivers import MarkSpace, TimeGrid
from .errors import ValidationError

Coef = Optional[Callable]


@dataclass
class Model:
    name: str = "custom"
    params: dict = field(default_factory=dict)

    # free term and initial segment on [-delay, t_max], with derivative
    xi: Coef = None
    xi_p: Coef = None

    # forward kernels (t, s, x, x1, u) and (t, s, x, x1, u, e)
    b: Coef = None
    sigma: Coef = None
    theta: Coef = None
    # backward generator (t, s, x, x1, y, z, k, u, nu)
    g: Coef = None
    # running and terminal rewards
    f: Coef = None
    h: Coef = None
    h_p: Coef = None

    # first partials; *_t is the derivative in the first time argument
    b_x: Coef = None
    b_x1: Coef = None
    b_u: Coef = None
    b_t: Coef = None
    sigma_x: Coef = None
    sigma_x1: Coef = None
    sigma_u: Coef = None
    sigma_t: Coef = None
    theta_x: Coef = None
    theta_x1: Coef = None
    theta_u: Coef = None
    theta_t: Coef = None
    g_x: Coef = None
    g_x1: Coef = None
    g_y: Coef = None
    g_z: Coef = None
    g_k: Coef = None  # returns the mark-indexed gradient, same shape as k
    g_u: Coef = None
    g_t: Coef = None
    f_x: Coef = None
    f_x1: Coef = None
    f_y: Coef = None
    f_u: Coef = None

    # optional mixed second partials for the memory part of the Hamiltonian,
    # keyed e.g. "b_tx", "sigma_tu", "g_tx1"; missing entries fall back to
    # central finite differences of the corresponding first partial
    second_partials: dict = field(default_factory=dict)

    L: float = 0.0
    U: tuple = (-np.inf, np.inf)
    # opt-in O(n) forward accumulation; only valid when no kernel depends on
    # its first time argument
    kernels_time_invariant: bool = False

    @property
    def has_volterra_kernels(self) -> bool:
        """Whether any coefficient depends on its first time argument."""
        return any(c is not None for c in (self.b_t, self.sigma_t, self.theta_t, self.g_t))

    @property
    def forward_deterministic(self) -> bool:
        return self.sigma is None and self.theta is None


@dataclass(frozen=True)
class InfoStructure:
    """Information available to the controller: a sub-filtration choice.

    kind is one of "full" (everything), "delayed" (state and drivers lagged by
    ``lag``), or "trivial" (no randomness observed).
    """

    kind: str = "full"
    lag: float = 0.0

    def __post_init__(self):
        if self.kind not in ("full", "delayed", "trivial"):
            raise ValidationError(f"unknown information structure {self.kind!r}")
        if self.kind == "delayed" and self.lag < 0:
            raise ValidationError("delayed information needs a nonnegative lag")

    def lag_steps(self, grid: TimeGrid) -> int:
        steps = self.lag / grid.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValidationError("information lag must be an exact grid multiple")
        return int(round(steps))


@dataclass
class ControlPolicy:
    """Piecewise-constant control values per (step, path), clipped to U."""

    values: np.ndarray  # (n_steps, n_paths) or (n_steps, 1)
    info: InfoStructure = InfoStructure("full")

    @classmethod
    def constant(cls, value: float, n_steps: int, info: InfoStructure | None = None):
        return cls(
            np.full((n_steps, 1), float(value)), info or InfoStructure("full")
        )

    def clipped(self, U: tuple) -> "ControlPolicy":
        return ControlPolicy(np.clip(self.values, U[0], U[1]), self.info)


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    passed: bool
    failures: list
    warnings: list

    def __str__(self):
        lines = ["pass" if self.passed else "FAIL"]
        lines += [f"  failure: {m}" for m in self.failures]
        lines += [f"  warning: {m}" for m in self.warnings]
        return "\n".join(lines)


def _nu_norm(dk: np.ndarray, nu: np.ndarray) -> np.ndarray:
    if dk.shape[-2] == 0:
        return np.zeros(dk.shape[:-2] + dk.shape[-1:])
    return np.sqrt(np.einsum("...mp,m->...p", dk**2, nu))


def _fd_check(fun, args, idx, supplied, name, failures, rel_tol=1e-4, step=1e-5):
    """Compare a supplied partial against a central finite difference."""
    up = list(args)
    dn = list(args)
    up[idx] = args[idx] + step
    dn[idx] = args[idx] - step
    fd = (np.asarray(fun(*up)) - np.asarray(fun(*dn))) / (2 * step)
    got = np.asarray(supplied(*args))
    scale = max(1.0, float(np.abs(fd).max()), float(np.abs(got).max()))
    err = float(np.abs(got - fd).max()) / scale
    if err > rel_tol:
        failures.append(f"{name}: relative mismatch {err:.2e} vs finite difference")


def validate_model(
    m: Model,
    marks: MarkSpace = MarkSpace(),
    grid: TimeGrid | None = None,
    n_probes: int = 64,
    seed: int = 0,
) -> ValidationReport:
    """Probe-based checks: Lipschitz bound of g, partials vs finite
    differences, control interval sanity, and the contraction threshold when a
    grid is supplied."""
    failures: list = []
    warns: list = []
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    nu = marks.nu
    M = marks.n_marks

    if not m.U[0] <= m.U[1]:
        failures.append(f"control interval is empty: {m.U}")

    if m.g is not None:
        for _ in range(n_probes):
            t = rng.uniform(0, 5)
            s = t + rng.uniform(0, 5)
            x, x1, u = rng.normal(size=3)
            y1, z1, y2, z2 = rng.normal(size=4)
            k1 = rng.normal(size=(M, 1))
            k2 = rng.normal(size=(M, 1))
            g1 = np.asarray(m.g(t, s, x, x1, y1, z1, k1, u, nu))
            g2 = np.asarray(m.g(t, s, x, x1, y2, z2, k2, u, nu))
            bound = m.L * (
                abs(y1 - y2) + abs(z1 - z2) + float(_nu_norm(k1 - k2, nu).max())
            )
            gap = float(np.abs(g1 - g2).max())
            if gap > bound + 1e-9 * max(1.0, bound):
                failures.append(
                    f"Lipschitz probe failed: |dg|={gap:.3e} > L*|dargs|={bound:.3e}"
                )
                break

    # derivative probes for each supplied partial
    for _ in range(8):
        t = rng.uniform(0, 4)
        s = t + rng.uniform(0, 4)
        x, x1, u = rng.normal(size=3)
        y, z = rng.normal(size=2)
        k = rng.normal(size=(M, 1))
        if m.b is not None:
            args = (t, s, x, x1, u)
            for idx, nm, part in ((2, "b_x", m.b_x), (3, "b_x1", m.b_x1), (4, "b_u", m.b_u), (0, "b_t", m.b_t)):
                if part is not None:
                    _fd_check(m.b, args, idx, part, nm, failures)
        if m.sigma is not None:
            args = (t, s, x, x1, u)
            for idx, nm, part in ((2, "sigma_x", m.sigma_x), (3, "sigma_x1", m.sigma_x1), (4, "sigma_u", m.sigma_u), (0, "sigma_t", m.sigma_t)):
                if part is not None:
                    _fd_check(m.sigma, args, idx, part, nm, failures)
        if m.theta is not None:
            for e in marks.mark_values:
                args = (t, s, x, x1, u, e)
                for idx, nm, part in ((2, "theta_x", m.theta_x), (3, "theta_x1", m.theta_x1), (4, "theta_u", m.theta_u), (0, "theta_t", m.theta_t)):
                    if part is not None:
                        _fd_check(m.theta, args, idx, part, nm, failures)
        if m.g is not None:
            args = (t, s, x, x1, y, z, k, u, nu)
            for idx, nm, part in (
                (2, "g_x", m.g_x), (3, "g_x1", m.g_x1), (4, "g_y", m.g_y),
                (5, "g_z", m.g_z), (7, "g_u", m.g_u), (0, "g_t", m.g_t),
            ):
                if part is not None:
                    _fd_check(m.g, args, idx, part, nm, failures)
            if m.g_k is not None and M > 0:
                h = 1e-5
                grad = np.asarray(m.g_k(*args))
                for j in range(M):
                    kp, km = k.copy(), k.copy()
                    kp[j] += h
                    km[j] -= h
                    fd = (np.asarray(m.g(t, s, x, x1, y, z, kp, u, nu))
                          - np.asarray(m.g(t, s, x, x1, y, z, km, u, nu))) / (2 * h)
                    scale = max(1.0, float(np.abs(fd).max()))
                    if float(np.abs(grad[j] - fd).max()) / scale > 1e-4:
                        failures.append(f"g_k[{j}]: mismatch vs finite difference")
        if m.f is not None:
            args = (t, x, x1, y, u)
            for idx, nm, part in ((1, "f_x", m.f_x), (2, "f_x1", m.f_x1), (3, "f_y", m.f_y), (4, "f_u", m.f_u)):
                if part is not None:
                    _fd_check(m.f, args, idx, part, nm, failures)
        if m.h is not None and m.h_p is not None:
            _fd_check(m.h, (y,), 0, m.h_p, "h'", failures)
        if failures:
            break

    if grid is not None and grid.beta <= 6 * m.L**2:
        warns.append(
            f"beta={grid.beta} <= 6*L^2={6 * m.L ** 2}: fixed-point map is not "
            "provably contractive"
        )

    return ValidationReport(passed=not failures, failures=failures, warnings=warns)


# ---------------------------------------------------------------------------
# discounted linear-quadratic oracle


def discounted_lq_gain(a: float, rho: float, kappa: float) -> float:
    """Positive root P of P^2 + kappa*(rho - 2a)*P - kappa = 0.

    The optimal feedback for the discounted scalar problem
    max E[int -0.5 e^{-rho t}(x^2 + kappa u^2) dt], dx = (a x + u)dt + s0 dB,
    is u*(t) = -P x(t)/kappa.
    """
    def poly(p):
        return p * p + kappa * (rho - 2 * a) * p - kappa

    hi = 1.0
    while poly(hi) < 0:
        hi *= 2
    return float(brentq(poly, 0.0, hi, xtol=1e-14, rtol=1e-15))


def discounted_lq_value(x0: float, a: float, sigma0: float, rho: float, kappa: float) -> float:
    """Optimal objective value of the discounted scalar LQ problem."""
    P = discounted_lq_gain(a, rho, kappa)
    return -0.5 * P * x0**2 - sigma0**2 * P / (2 * rho)


# ---------------------------------------------------------------------------
# builtin catalog


def _zero_model(**params) -> Model:
    return Model(name="zero", params=params, L=0.0, U=(-1.0, 1.0),
                 kernels_time_invariant=True)


def _det_volterra(a: float = -0.4, x0: float = 1.0, **params) -> Model:
    return Model(
        name="det_volterra",
        params=dict(a=a, x0=x0, **params),
        xi=lambda t: np.full_like(np.asarray(t, dtype=float), x0),
        xi_p=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        b=lambda t, s, x, x1, u: a * x,
        b_x=lambda t, s, x, x1, u: np.broadcast_to(a, np.shape(x)).copy() if np.shape(x) else a,
        L=0.0,
        U=(-1.0, 1.0),
        kernels_time_invariant=True,
    )


def _exp_generator(c: float = 1.0, **params) -> Model:
    return Model(
        name="exp_generator",
        params=dict(c=c, **params),
        g=lambda t, s, x, x1, y, z, k, u, nu: -c * y + np.exp(-s) + 0.0 * x,
        g_y=lambda t, s, x, x1, y, z, k, u, nu: np.broadcast_to(-c, np.broadcast_shapes(np.shape(y), np.shape(s))).copy(),
        h=lambda y: y,
        h_p=lambda y: np.ones_like(np.asarray(y, dtype=float)),
        L=abs(c),
        U=(-1.0, 1.0),
        kernels_time_invariant=True,
    )


def _linear_generator(
    c_y: float = -1.0, c_z: float = 0.5, c_k: float = 0.5, L: float = 1.0, **params
) -> Model:
    """Linear generator touching y, z and the jump coordinates, with source
    e^{-s}; the k-term is normalized so its Lipschitz coefficient is c_k."""

    def kterm(k, nu):
        lam = float(nu.sum()) if nu.size else 0.0
        if lam <= 0.0 or k.shape[-2] == 0:
            return 0.0
        return c_k * np.einsum("...mp,m->...p", k, nu) / np.sqrt(lam)

    def g(t, s, x, x1, y, z, k, u, nu):
        return c_y * y + c_z * z + kterm(np.asarray(k, dtype=float), nu) + np.exp(-s) + 0.0 * x

    def g_k(t, s, x, x1, y, z, k, u, nu):
        lam = float(nu.sum()) if nu.size else 0.0
        out = np.zeros_like(np.asarray(k, dtype=float))
        if lam > 0:
            out += (c_k / np.sqrt(lam)) * nu[:, None]
        return out

    if max(abs(c_y), abs(c_z), abs(c_k)) > L:
        raise ValidationError("declared L does not dominate the generator slopes")
    return Model(
        name="linear_generator",
        params=dict(c_y=c_y, c_z=c_z, c_k=c_k, L=L, **params),
        g=g,
        g_y=lambda t, s, x, x1, y, z, k, u, nu: np.broadcast_to(c_y, np.broadcast_shapes(np.shape(y), np.shape(s))).copy(),
        g_z=lambda t, s, x, x1, y, z, k, u, nu: np.broadcast_to(c_z, np.broadcast_shapes(np.shape(z), np.shape(s))).copy(),
        g_k=g_k,
        L=L,
        U=(-1.0, 1.0),
        kernels_time_invariant=True,
    )


def _sdde(
    a: float = -0.8,
    a1: float = 0.3,
    sigma0: float = 0.25,
    sigma_x: float = 0.1,
    x0: float = 1.0,
    **params,
) -> Model:
    """Delay-SDE: kernels independent of their first time argument."""
    return Model(
        name="sdde",
        params=dict(a=a, a1=a1, sigma0=sigma0, sigma_x=sigma_x, x0=x0, **params),
        xi=lambda t: np.full_like(np.asarray(t, dtype=float), x0),
        xi_p=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        b=lambda t, s, x, x1, u: a * x + a1 * x1 + u,
        b_x=lambda t, s, x, x1, u: np.broadcast_to(a, np.shape(x)).copy(),
        b_x1=lambda t, s, x, x1, u: np.broadcast_to(a1, np.shape(x)).copy(),
        b_u=lambda t, s, x, x1, u: np.ones(np.broadcast_shapes(np.shape(x), np.shape(u))),
        sigma=lambda t, s, x, x1, u: sigma0 + sigma_x * x,
        sigma_x=lambda t, s, x, x1, u: np.broadcast_to(sigma_x, np.shape(x)).copy(),
        L=0.0,
        U=(-2.0, 2.0),
        kernels_time_invariant=True,
    )


def _jump_linear(
    a: float = -0.6,
    a1: float = 0.2,
    sigma0: float = 0.15,
    theta_x: float = 0.2,
    theta_u: float = 0.1,
    rho: float = 1.0,
    kappa: float = 1.0,
    x0: float = 1.0,
    **params,
) -> Model:
    """Jump diffusion with linear jump coefficient on a finite mark space and
    a discounted quadratic reward."""
    return Model(
        name="jump_linear",
        params=dict(a=a, a1=a1, sigma0=sigma0, theta_x=theta_x, theta_u=theta_u,
                    rho=rho, kappa=kappa, x0=x0, **params),
        xi=lambda t: np.full_like(np.asarray(t, dtype=float), x0),
        xi_p=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        b=lambda t, s, x, x1, u: a * x + a1 * x1 + u,
        b_x=lambda t, s, x, x1, u: np.broadcast_to(a, np.shape(x)).copy(),
        b_x1=lambda t, s, x, x1, u: np.broadcast_to(a1, np.shape(x)).copy(),
        b_u=lambda t, s, x, x1, u: np.ones(np.broadcast_shapes(np.shape(x), np.shape(u))),
        sigma=lambda t, s, x, x1, u: np.broadcast_to(sigma0, np.broadcast_shapes(np.shape(x), np.shape(u))).copy(),
        theta=lambda t, s, x, x1, u, e: (theta_x * x + theta_u * u) * e,
        theta_x=lambda t, s, x, x1, u, e: np.broadcast_to(theta_x * e, np.shape(x)).copy(),
        theta_u=lambda t, s, x, x1, u, e: np.broadcast_to(theta_u * e, np.broadcast_shapes(np.shape(x), np.shape(u))).copy(),
        f=lambda t, x, x1, y, u: -0.5 * np.exp(-rho * t) * (x**2 + kappa * u**2),
        f_x=lambda t, x, x1, y, u: -np.exp(-rho * t) * x,
        f_u=lambda t, x, x1, y, u: -np.exp(-rho * t) * kappa * u,
        L=0.0,
        U=(-5.0, 5.0),
        kernels_time_invariant=True,
    )


def _lq(
    a: float = -0.5,
    sigma0: float = 0.2,
    rho: float = 1.0,
    kappa: float = 1.0,
    x0: float = 1.0,
    **params,
) -> Model:
    """Discounted scalar linear-quadratic benchmark with a Riccati oracle."""
    return Model(
        name="lq",
        params=dict(a=a, sigma0=sigma0, rho=rho, kappa=kappa, x0=x0, **params),
        xi=lambda t: np.full_like(np.asarray(t, dtype=float), x0),
        xi_p=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        b=lambda t, s, x, x1, u: a * x + u,
        b_x=lambda t, s, x, x1, u: np.broadcast_to(a, np.shape(x)).copy(),
        b_u=lambda t, s, x, x1, u: np.ones(np.broadcast_shapes(np.shape(x), np.shape(u))),
        sigma=lambda t, s, x, x1, u: np.broadcast_to(sigma0, np.broadcast_shapes(np.shape(x), np.shape(u))).copy(),
        f=lambda t, x, x1, y, u: -0.5 * np.exp(-rho * t) * (x**2 + kappa * u**2),
        f_x=lambda t, x, x1, y, u: -np.exp(-rho * t) * x,
        f_u=lambda t, x, x1, y, u: -np.exp(-rho * t) * kappa * u,
        L=0.0,
        U=(-10.0, 10.0),
        kernels_time_invariant=True,
    )


_CATALOG = {
    "zero": _zero_model,
    "det_volterra": _det_volterra,
    "exp_generator": _exp_generator,
    "linear_generator": _linear_generator,
    "sdde": _sdde,
    "jump_linear": _jump_linear,
    "lq": _lq,
}


def builtin(name: str, **params) -> Model:
    """Build a benchmark model from the catalog by name."""
    try:
        factory = _CATALOG[name]
    except KeyError:
        raise ValidationError(
            f"unknown builtin model {name!r}; known: {sorted(_CATALOG)}"
        ) from None
    return factory(**params)
