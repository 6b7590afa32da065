"""Cross-sectional least-squares estimation of conditional expectations.

Conditional expectations given the time-t information are estimated by
regressing path targets on polynomial basis functions of the current state,
the standard regression Monte Carlo construction.  For deterministic
cross-sections the design degenerates to a constant column and the estimator
is the path average; targets stored with a broadcast path axis (length 1) are
already conditionally known and pass through unchanged.

All reductions use fixed-order numpy summation (no BLAS reductions over the
path axis), so results are bit-identical regardless of BLAS thread counts.
"""

from __future__ import annotations

import warnings

import numpy as np


def polynomial_design(columns: list[np.ndarray], n_paths: int, degree: int) -> np.ndarray:
    """Design matrix of monomials up to total degree in the given state columns.

    Columns that are (numerically) constant or duplicates are dropped; the
    remaining ones are standardized for conditioning.  Always includes the
    constant column, so fitted values preserve the cross-sectional mean.
    """
    feats: list[np.ndarray] = []
    for c in columns:
        c = np.asarray(c, dtype=float)
        if c.ndim == 0 or c.shape[-1] == 1:
            continue  # deterministic: carries no cross-sectional information
        sd = float(c.std())
        if sd < 1e-13 * max(1.0, float(np.abs(c).max())):
            continue
        cs = (c - float(c.mean())) / sd
        if any(np.allclose(cs, f, atol=1e-12) for f in feats):
            continue
        feats.append(cs)
    design = [np.ones(n_paths)]
    # monomials x^a * y^b ... with 1 <= a+b+... <= degree
    def extend(prefix: np.ndarray, start: int, deg_left: int):
        for i in range(start, len(feats)):
            term = prefix * feats[i]
            design.append(term)
            if deg_left > 1:
                extend(term, i, deg_left - 1)

    if degree >= 1 and feats:
        extend(np.ones(n_paths), 0, degree)
    return np.stack(design, axis=-1)


def _gram(design: np.ndarray) -> np.ndarray:
    nb = design.shape[1]
    g = np.empty((nb, nb))
    for i in range(nb):
        for j in range(i, nb):
            g[i, j] = g[j, i] = float(np.sum(design[:, i] * design[:, j]))
    return g


class ConditionalExpectation:
    """Projection operator onto a polynomial basis at one time step."""

    def __init__(self, design: np.ndarray, cond_cap: float = 1e10):
        self.design = design
        self.n_paths, nb = design.shape
        gram = _gram(design)
        # degree fallback: drop trailing columns until the Gram matrix is
        # well-conditioned (the constant column always survives)
        while nb > 1 and np.linalg.cond(gram) > cond_cap:
            nb -= 1
            gram = gram[:nb, :nb]
        if nb < design.shape[1]:
            warnings.warn(
                "rank-deficient regression design; fell back to "
                f"{nb} basis functions",
                stacklevel=2,
            )
        self.nb = nb
        self._gram = gram

    def __call__(self, target: np.ndarray) -> np.ndarray:
        """Fitted conditional expectation of target, path axis last.

        Targets with a broadcast path axis are returned unchanged (they are
        deterministic, hence conditionally known).
        """
        target = np.asarray(target, dtype=float)
        if target.shape[-1] == 1:
            return target.copy()
        if self.nb == 1:
            mean = target.mean(axis=-1, keepdims=True)
            return mean  # broadcast path axis: the trivial design is constant
        lead = target.shape[:-1]
        flat = target.reshape(-1, self.n_paths)
        d = self.design[:, : self.nb]
        cross = np.einsum("pi,rp->ir", d, flat, optimize=False)
        coef = np.linalg.solve(self._gram, cross)
        pred = d @ coef  # (n_paths, R); k-dim tiny, not thread-split
        return np.ascontiguousarray(pred.T).reshape(lead + (self.n_paths,))
