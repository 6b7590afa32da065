#!/usr/bin/env python3
"""Empirical contraction modulus of the backward fixed-point map as the
weight parameter beta crosses the provable threshold 6 L^2."""

import argparse

from fbsvie_lab.bsvie import contraction_bound_sq, verify_contraction
from fbsvie_lab.drivers import MarkSpace, build_grid, sample_drivers
from fbsvie_lab.forward import simulate_forward
from fbsvie_lab.models import ControlPolicy, builtin


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--t-max", type=float, default=10.0)
    ap.add_argument("--n-steps", type=int, default=200)
    ap.add_argument("--paths", type=int, default=2000)
    ap.add_argument("--probes", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument(
        "--betas", type=float, nargs="+",
        default=[3.0, 6.0, 9.0, 12.0, 24.0, 48.0],
    )
    args = ap.parse_args()

    m = builtin("linear_generator")  # Lipschitz constant 1
    marks = MarkSpace(marks=(1.0, -0.5), intensities=(0.5, 1.0))
    print(f"{'beta':>8} {'bound 6L^2/b':>14} {'max sq-ratio':>14} {'verdict':>10}")
    for beta in args.betas:
        grid = build_grid(args.t_max, args.n_steps, 0, beta)
        d = sample_drivers(grid, marks, args.paths, args.seed)
        u = ControlPolicy.constant(0.0, grid.n_steps)
        state = simulate_forward(m, grid, d, u)
        rep = verify_contraction(
            m, grid, marks, d, state, u, probes=args.probes, seed=args.seed
        )
        bound = contraction_bound_sq(m.L, beta)
        verdict = "contracts" if rep.max_ratio < 1.0 else "expands"
        print(f"{beta:8.2f} {bound:14.4f} {rep.max_ratio:14.4f} {verdict:>10}")


if __name__ == "__main__":
    main()
