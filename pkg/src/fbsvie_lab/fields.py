"""Two-parameter fields on the discrete triangle {t <= s}.

A triangular field stores values F(t_i, s_j) for grid indices j >= i, with an
optional trailing mark axis and a trailing path axis.  Two storage layouts are
supported:

* full rows: ``values.shape[0] == n_steps`` and entries below the diagonal are
  zero and never read;
* constant rows: ``values.shape[0] == 1``, meaning every row t shares the same
  s-profile (the degenerate case where the field does not depend on its first
  argument).

The path axis may have length 1 (a deterministic field broadcast over paths).
"""

from __future__ import annotations

import numpy as np

from .errors import ResourceCapError, ValidationError


def check_memory(n_entries: int, cap_mb: float | None) -> None:
    """Abort with guidance if an allocation of n_entries floats exceeds the cap."""
    if cap_mb is None:
        return
    need_mb = n_entries * 8 / 2**20
    if need_mb > cap_mb:
        raise ResourceCapError(
            f"triangular field needs {need_mb:.0f} MiB > cap {cap_mb:.0f} MiB; "
            "reduce n_steps or n_paths, or raise the memory cap"
        )


class TriangularField:
    """Values F(t_i, s_j) on the triangle j >= i of a time grid.

    values : ndarray, shape (n_t, n_s, n_paths) or (n_t, n_s, n_marks, n_paths)
        with n_t in {1, n_steps} and n_s == n_steps.
    """

    def __init__(self, values: np.ndarray, n_steps: int, with_marks: bool = False):
        values = np.asarray(values, dtype=float)
        want_ndim = 4 if with_marks else 3
        if values.ndim != want_ndim:
            raise ValidationError(
                f"triangular field values must be {want_ndim}-d, got {values.ndim}-d"
            )
        if values.shape[1] != n_steps:
            raise ValidationError(
                f"s-axis has length {values.shape[1]}, expected n_steps={n_steps}"
            )
        if values.shape[0] not in (1, n_steps):
            raise ValidationError(
                f"t-axis has length {values.shape[0]}, expected 1 or {n_steps}"
            )
        self.values = values
        self.n_steps = n_steps
        self.with_marks = with_marks
        if values.shape[0] == n_steps and n_steps > 1:
            self._zero_below_diagonal()

    # -- construction helpers -------------------------------------------------

    @classmethod
    def zeros(
        cls,
        n_steps: int,
        n_paths: int = 1,
        n_marks: int | None = None,
        constant_rows: bool = False,
        cap_mb: float | None = None,
    ) -> "TriangularField":
        n_t = 1 if constant_rows else n_steps
        if n_marks is None:
            shape: tuple = (n_t, n_steps, n_paths)
        else:
            shape = (n_t, n_steps, n_marks, n_paths)
        check_memory(int(np.prod(shape)), cap_mb)
        return cls(np.zeros(shape), n_steps, with_marks=n_marks is not None)

    def _zero_below_diagonal(self) -> None:
        tt, ss = np.meshgrid(
            np.arange(self.values.shape[0]), np.arange(self.n_steps), indexing="ij"
        )
        below = ss < tt
        self.values[below] = 0.0

    # -- access ---------------------------------------------------------------

    @property
    def constant_rows(self) -> bool:
        return self.values.shape[0] == 1

    @property
    def n_paths(self) -> int:
        return self.values.shape[-1]

    @property
    def n_marks(self) -> int:
        return self.values.shape[2] if self.with_marks else 0

    def row(self, t_index: int) -> np.ndarray:
        """Values F(t, s_j) for s_j >= t, shape (n_steps - t, [n_marks,] n_paths)."""
        if not 0 <= t_index < self.n_steps:
            raise ValidationError(f"row index {t_index} outside [0, {self.n_steps})")
        ti = 0 if self.constant_rows else t_index
        return self.values[ti, t_index:, ...]

    def value(self, t_index: int, s_index: int) -> np.ndarray:
        if s_index < t_index:
            raise ValidationError(f"read below the diagonal: t={t_index}, s={s_index}")
        ti = 0 if self.constant_rows else t_index
        return self.values[ti, s_index, ...]

    def diag(self) -> np.ndarray:
        """F(t_i, t_i) for all i, shape (n_steps, [n_marks,] n_paths)."""
        if self.constant_rows:
            return self.values[0]
        return np.stack([self.values[i, i, ...] for i in range(self.n_steps)])

    def column(self, s_index: int) -> np.ndarray:
        """Values F(t_i, s) for t_i <= s, shape (s_index + 1, [n_marks,] n_paths)."""
        if self.constant_rows:
            reps = (s_index + 1,) + (1,) * (self.values.ndim - 2)
            return np.tile(self.values[0, s_index, ...], reps)
        return self.values[: s_index + 1, s_index, ...]

    # -- arithmetic (triangle-preserving) -------------------------------------

    def _compatible(self, other: "TriangularField") -> None:
        if self.n_steps != other.n_steps or self.with_marks != other.with_marks:
            raise ValidationError("triangular fields are not shape-compatible")

    def sub(self, other: "TriangularField") -> "TriangularField":
        self._compatible(other)
        return TriangularField(
            self.values - other.values, self.n_steps, with_marks=self.with_marks
        )

    def scale(self, c: float) -> "TriangularField":
        return TriangularField(
            self.values * c, self.n_steps, with_marks=self.with_marks
        )

    def copy(self) -> "TriangularField":
        return TriangularField(
            self.values.copy(), self.n_steps, with_marks=self.with_marks
        )

    def path_mean_sq(self) -> np.ndarray:
        """mean over paths of F^2, summed over marks with no weights.

        Shape (n_t, n_s); mark weighting is applied by the caller.
        """
        sq = self.values**2
        if self.with_marks:
            sq = sq.sum(axis=2)
        return sq.mean(axis=-1)
