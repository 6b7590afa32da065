"""Time discretization, finite jump-mark spaces, reproducible noise, and the
discrete weighted norm used by the backward solver.

The infinite horizon is truncated at ``t_max``; exponentially weighted norms
make the neglected tail small.  The jump measure is approximated by a finite
collection of marks, which reproduces every mark integral exactly for finite
intensities.  All randomness is generated per path from a counter-based
generator keyed on (seed, path index), so path i's increments do not depend on
how many paths are drawn alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .fields import TriangularField


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i*dt for i in {-delay_steps, ..., n_steps}."""

    t_max: float
    n_steps: int
    delay_steps: int
    beta: float

    @property
    def dt(self) -> float:
        return self.t_max / self.n_steps

    @property
    def delay(self) -> float:
        return self.delay_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        """Grid times for i = 0..n_steps."""
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def times_ext(self) -> np.ndarray:
        """Grid times for i = -delay_steps..n_steps."""
        return np.arange(-self.delay_steps, self.n_steps + 1) * self.dt


def build_grid(t_max: float, n_steps: int, delay_steps: int, beta: float) -> TimeGrid:
    if not t_max > 0:
        raise ValidationError(f"t_max must be positive, got {t_max}")
    if n_steps < 1:
        raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
    if delay_steps < 0:
        raise ValidationError(f"delay_steps must be >= 0, got {delay_steps}")
    if not beta > 0:
        raise ValidationError(f"beta must be positive, got {beta}")
    return TimeGrid(float(t_max), int(n_steps), int(delay_steps), float(beta))


@dataclass(frozen=True)
class MarkSpace:
    """Finite approximation of the jump measure: marks e_m with intensities nu_m."""

    marks: tuple = ()
    intensities: tuple = ()

    def __post_init__(self):
        if len(self.marks) != len(self.intensities):
            raise ValidationError("marks and intensities must have equal length")
        for e in self.marks:
            if e == 0.0:
                raise ValidationError("marks must be nonzero")
        if len(set(self.marks)) != len(self.marks):
            raise ValidationError("marks must be pairwise distinct")
        for nu in self.intensities:
            if not np.isfinite(nu) or nu < 0:
                raise ValidationError("intensities must be finite and nonnegative")

    @property
    def n_marks(self) -> int:
        return len(self.marks)

    @property
    def nu(self) -> np.ndarray:
        return np.asarray(self.intensities, dtype=float)

    @property
    def mark_values(self) -> np.ndarray:
        return np.asarray(self.marks, dtype=float)

    @property
    def total_intensity(self) -> float:
        return float(sum(self.intensities))


EMPTY_MARKS = MarkSpace()


@dataclass
class DriverPaths:
    """Brownian and compensated Poisson increments per (step, mark, path).

    dB has shape (n_steps, n_paths); counts and comp have shape
    (n_steps, n_marks, n_paths) with comp = counts - nu*dt.  Immutable by
    convention after construction.
    """

    n_paths: int
    seed: int
    dB: np.ndarray
    counts: np.ndarray
    comp: np.ndarray
    grid: TimeGrid = field(repr=False, default=None)
    marks: MarkSpace = field(repr=False, default=EMPTY_MARKS)


def sample_drivers(
    grid: TimeGrid, marks: MarkSpace, n_paths: int, seed: int
) -> DriverPaths:
    """Draw Gaussian increments (variance dt) and Poisson counts (mean nu*dt).

    Each path uses its own Philox stream keyed on (seed, path index), so the
    output is a pure function of (seed, path, step, mark) and is bit-identical
    across regenerations and independent of n_paths.
    """
    if n_paths < 1:
        raise ValidationError(f"n_paths must be >= 1, got {n_paths}")
    n, m = grid.n_steps, marks.n_marks
    dt = grid.dt
    dB = np.empty((n, n_paths))
    counts = np.empty((n, m, n_paths))
    nu = marks.nu
    for p in range(n_paths):
        rng = np.random.Generator(np.random.Philox(key=[int(seed) % 2**64, p]))
        dB[:, p] = rng.standard_normal(n) * np.sqrt(dt)
        for j in range(m):
            counts[:, j, p] = rng.poisson(nu[j] * dt, size=n)
    comp = counts - nu[None, :, None] * dt
    return DriverPaths(
        n_paths=n_paths, seed=int(seed), dB=dB, counts=counts, comp=comp,
        grid=grid, marks=marks,
    )


def zero_future(drivers: DriverPaths, from_step: int) -> DriverPaths:
    """Copy of the drivers with all increments at steps >= from_step zeroed.

    Used by the no-lookahead tests: outputs at earlier indices must not move.
    """
    dB = drivers.dB.copy()
    counts = drivers.counts.copy()
    comp = drivers.comp.copy()
    dB[from_step:, :] = 0.0
    counts[from_step:, :, :] = 0.0
    comp[from_step:, :, :] = 0.0
    return DriverPaths(
        n_paths=drivers.n_paths, seed=drivers.seed, dB=dB, counts=counts,
        comp=comp, grid=drivers.grid, marks=drivers.marks,
    )


def weighted_norm_sq(
    Y: np.ndarray | None,
    Z: TriangularField | None,
    K: TriangularField | None,
    grid: TimeGrid,
    marks: MarkSpace = EMPTY_MARKS,
) -> float:
    """Discrete exponentially weighted squared norm of a (Y, Z, K) triple.

    Left-Riemann sums of e^{beta*t}|Y|^2 over [0, t_max], and of
    e^{beta*s}|Z|^2 (resp. the nu-weighted |K|^2) over the triangle t <= s.
    Expectations are path averages; a length-1 path axis broadcasts.
    """
    n, dt, beta = grid.n_steps, grid.dt, grid.beta
    w = np.exp(beta * grid.times[:n])  # e^{beta s_j}, left points
    total = 0.0
    if Y is not None:
        Y = np.asarray(Y, dtype=float)
        if Y.ndim != 2 or Y.shape[0] not in (n, n + 1):
            raise ValidationError(
                f"Y must have shape (n_steps[+1], n_paths), got {Y.shape}"
            )
        total += dt * float(np.sum(w * (Y[:n] ** 2).mean(axis=-1)))
    for F, weight_marks in ((Z, False), (K, True)):
        if F is None:
            continue
        if F.n_steps != n:
            raise ValidationError("triangular field does not match the grid")
        sq = F.values**2
        if F.with_marks:
            if weight_marks:
                if F.n_marks != marks.n_marks:
                    raise ValidationError("K mark axis does not match the mark space")
                sq = np.einsum("tsmp,m->tsp", sq, marks.nu)
            else:
                sq = sq.sum(axis=2)
        elif weight_marks and marks.n_marks > 0:
            raise ValidationError("K must carry a mark axis")
        msq = sq.mean(axis=-1)  # (n_t, n_s)
        if F.constant_rows:
            # row t contributes columns j >= t; column j appears in j+1 rows
            counts = np.arange(1, n + 1)
            total += dt * dt * float(np.sum(w * counts * msq[0]))
        else:
            total += dt * dt * float(np.sum(msq * w[None, :]))
    return total


def weighted_distance(
    Y1, Z1, K1, Y2, Z2, K2, grid: TimeGrid, marks: MarkSpace = EMPTY_MARKS
) -> float:
    """Weighted norm of the difference of two triples (None means zero)."""

    def dy(a, b):
        if a is None and b is None:
            return None
        if a is None:
            return -np.asarray(b, dtype=float)
        if b is None:
            return np.asarray(a, dtype=float)
        return np.asarray(a, dtype=float) - np.asarray(b, dtype=float)

    def df(a, b):
        if a is None and b is None:
            return None
        if a is None:
            return b.scale(-1.0)
        if b is None:
            return a
        return a.sub(b)

    return float(
        np.sqrt(weighted_norm_sq(dy(Y1, Y2), df(Z1, Z2), df(K1, K2), grid, marks))
    )
