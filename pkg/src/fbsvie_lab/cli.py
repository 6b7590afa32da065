"""Config-driven experiment runner.

Usage: ``fbsvie-lab run <config.yaml> [--seed N] [--paths N] [--out DIR]``.

The config is a strict YAML tree (unknown keys are rejected at every level);
the full schema is documented in the README.  Each run writes CSV artifacts
plus ``manifest.json`` echoing the config, seed, versions, wall time, and the
contraction-bound value 6 L^2 / beta.  Exit codes: 0 success, 2 validation
error, 3 solver non-convergence, 4 resource cap exceeded.

The thread count for BLAS backends can be pinned with the environment
variable ``FBSVIE_LAB_THREADS`` (applied before numpy is imported; all
path-axis reductions use fixed-order summation, so outputs are bit-identical
regardless of the setting).
"""

from __future__ import annotations

import os

_tc = os.environ.get("FBSVIE_LAB_THREADS")
if _tc:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(_var, _tc)

import argparse
import json
import sys
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import __version__
from .adjoint import memory_hamiltonian_values, solve_adjoints
from .bsvie import contraction_bound_sq, picard_solve, verify_contraction
from .control import (
    check_concavity,
    evaluate_objective,
    first_variation_check,
    optimize_control,
    solve_pipeline,
    transversality_diagnostics,
)
from .drivers import (
    EMPTY_MARKS,
    MarkSpace,
    build_grid,
    sample_drivers,
    weighted_norm_sq,
)
from .errors import NumericalAbort, ResourceCapError, ValidationError
from .forward import ensemble_to_csv, simulate_forward
from .models import (
    ControlPolicy,
    InfoStructure,
    builtin,
    discounted_lq_gain,
    discounted_lq_value,
    validate_model,
)

TASKS = (
    "simulate-forward",
    "solve-bsvie",
    "verify-contraction",
    "solve-adjoint",
    "grad-check",
    "optimize",
    "transversality",
    "concavity",
    "lq-benchmark",
)


class NonConvergence(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config


def _strict(d: dict, allowed: dict, where: str) -> dict:
    """Merge a config mapping over defaults, rejecting unknown keys."""
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ValidationError(f"section {where!r} must be a mapping")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ValidationError(f"unknown keys in {where!r}: {unknown}")
    out = dict(allowed)
    out.update(d)
    return out


@dataclass
class ExperimentConfig:
    task: str
    model_name: str
    model_params: dict
    grid: object
    marks: MarkSpace
    n_paths: int
    seed: int
    picard_tol: float
    picard_max_iter: int
    degree: int
    memory_cap_mb: float
    opt_step: float
    opt_sweeps: int
    opt_min_step: float
    info: InfoStructure
    u0: float
    gc_eps: float
    gc_direction_seed: int
    ct_probes: int
    ct_slack: float
    ct_seed: int
    out_dir: str
    raw: dict = field(repr=False, default_factory=dict)


_TOP_KEYS = (
    "task", "model", "grid", "marks", "n_paths", "seed", "solver",
    "optimizer", "gradcheck", "contraction", "out_dir",
)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as e:
        raise ValidationError(f"cannot read config: {e}") from e
    except yaml.YAMLError as e:
        raise ValidationError(f"malformed config: {e}") from e
    if not isinstance(raw, dict):
        raise ValidationError("config must be a mapping")
    unknown = sorted(set(raw) - set(_TOP_KEYS))
    if unknown:
        raise ValidationError(f"unknown top-level keys: {unknown}")

    task = raw.get("task")
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}; known: {list(TASKS)}")

    model = _strict(raw.get("model"), {"name": None, "params": {}}, "model")
    if not model["name"]:
        raise ValidationError("model.name is required")

    g = _strict(
        raw.get("grid"),
        {"t_max": None, "n_steps": None, "delay_steps": 0, "beta": None},
        "grid",
    )
    for k in ("t_max", "n_steps", "beta"):
        if g[k] is None:
            raise ValidationError(f"grid.{k} is required")
    grid = build_grid(g["t_max"], g["n_steps"], g["delay_steps"], g["beta"])

    mk = _strict(raw.get("marks"), {"values": (), "intensities": ()}, "marks")
    marks = MarkSpace(tuple(mk["values"]), tuple(mk["intensities"]))

    sv = _strict(
        raw.get("solver"),
        {"picard_tol": 1e-8, "max_iter": 50, "degree": 3, "memory_cap_mb": 2000.0},
        "solver",
    )
    op = _strict(
        raw.get("optimizer"),
        {"step": 1.0, "sweeps": 50, "min_step": 1e-6, "info": "full",
         "lag": 0.0, "u0": 0.0},
        "optimizer",
    )
    gc = _strict(
        raw.get("gradcheck"), {"eps": 1e-3, "direction_seed": 0}, "gradcheck"
    )
    ct = _strict(
        raw.get("contraction"), {"probes": 20, "slack": 0.1, "seed": 7},
        "contraction",
    )
    n_paths = raw.get("n_paths", 100)
    seed = raw.get("seed", 0)
    if not isinstance(n_paths, int) or n_paths < 1:
        raise ValidationError(f"n_paths must be a positive integer, got {n_paths!r}")
    if not isinstance(seed, int):
        raise ValidationError(f"seed must be an integer, got {seed!r}")

    return ExperimentConfig(
        task=task,
        model_name=model["name"],
        model_params=dict(model["params"] or {}),
        grid=grid,
        marks=marks,
        n_paths=n_paths,
        seed=seed,
        picard_tol=float(sv["picard_tol"]),
        picard_max_iter=int(sv["max_iter"]),
        degree=int(sv["degree"]),
        memory_cap_mb=float(sv["memory_cap_mb"]),
        opt_step=float(op["step"]),
        opt_sweeps=int(op["sweeps"]),
        opt_min_step=float(op["min_step"]),
        info=InfoStructure(op["info"], float(op["lag"])),
        u0=float(op["u0"]),
        gc_eps=float(gc["eps"]),
        gc_direction_seed=int(gc["direction_seed"]),
        ct_probes=int(ct["probes"]),
        ct_slack=float(ct["slack"]),
        ct_seed=int(ct["seed"]),
        out_dir=raw.get("out_dir", "out"),
        raw=raw,
    )


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def write_csv(path: str, header: list, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if isinstance(v, (int, float, np.floating)) else str(v) for v in row) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_json(path: str, obj: dict) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


# ---------------------------------------------------------------------------
# tasks


def _setup(cfg: ExperimentConfig):
    m = builtin(cfg.model_name, **cfg.model_params)
    report = validate_model(m, cfg.marks, cfg.grid)
    if not report.passed:
        raise ValidationError("model validation failed: " + "; ".join(report.failures))
    drivers = sample_drivers(cfg.grid, cfg.marks, cfg.n_paths, cfg.seed)
    u = ControlPolicy.constant(cfg.u0, cfg.grid.n_steps, cfg.info)
    return m, drivers, u


def _bsvie_csvs(cfg, out, bw):
    d = bw.diagnostics
    t = cfg.grid.times
    zd = bw.Z.diag()
    write_csv(
        os.path.join(out, "bsvie.csv"),
        ["t", "Y_mean", "Y_sd", "Z_diag_mean"],
        (
            (t[i], bw.Y[i].mean(), bw.Y[i].std(), zd[i].mean() if i < cfg.grid.n_steps else 0.0)
            for i in range(cfg.grid.n_steps + 1)
        ),
    )
    write_csv(
        os.path.join(out, "picard.csv"),
        ["iteration", "distance", "ratio"],
        (
            (i + 1, d.distances[i], d.ratios[i - 1] if i >= 1 else np.nan)
            for i in range(len(d.distances))
        ),
    )


def run_task(cfg: ExperimentConfig, out: str) -> dict:
    m, drivers, u = _setup(cfg)
    grid, marks = cfg.grid, cfg.marks
    rep: dict = {}
    if cfg.task == "simulate-forward":
        state = simulate_forward(m, grid, drivers, u)
        ensemble_to_csv(state, os.path.join(out, "state.csv"))
        rep["X_mean_final"] = float(state.X_grid[-1].mean())

    elif cfg.task == "solve-bsvie":
        state = simulate_forward(m, grid, drivers, u)
        bw = picard_solve(
            m, grid, marks, drivers, state, u, tol=cfg.picard_tol,
            max_iter=cfg.picard_max_iter, degree=cfg.degree,
            cap_mb=cfg.memory_cap_mb,
        )
        _bsvie_csvs(cfg, out, bw)
        d = bw.diagnostics
        rep.update(
            picard_iterations=d.n_iter,
            converged=d.converged,
            final_residual=d.final_residual,
            distances=d.distances,
            non_contractive_warning=d.non_contractive,
        )
        if not d.converged:
            raise NonConvergence(
                f"fixed-point iteration did not converge in {d.n_iter} sweeps "
                f"(residual {d.final_residual:.3e})"
            )

    elif cfg.task == "verify-contraction":
        state = simulate_forward(m, grid, drivers, u)
        cr = verify_contraction(
            m, grid, marks, drivers, state, u, probes=cfg.ct_probes,
            seed=cfg.ct_seed, degree=cfg.degree, slack=cfg.ct_slack,
            cap_mb=cfg.memory_cap_mb,
        )
        write_csv(
            os.path.join(out, "contraction.csv"),
            ["probe", "sq_ratio"],
            ((i, r) for i, r in enumerate(cr.ratios)),
        )
        rep.update(
            max_sq_ratio=cr.max_ratio, bound_sq=cr.bound_sq, slack=cr.slack,
            passed=cr.passed,
        )

    elif cfg.task == "solve-adjoint":
        state, bw, adj = solve_pipeline(
            m, grid, marks, drivers, u, cfg.degree, cfg.picard_tol,
            cfg.picard_max_iter, cfg.memory_cap_mb,
        )
        n = grid.n_steps
        write_csv(
            os.path.join(out, "adjoint.csv"),
            ["t", "lam_mean", "p_mean", "q_mean"],
            (
                (grid.times[i], adj.lam[i].mean(), adj.p[i].mean(),
                 adj.q[i].mean() if i < n else 0.0)
                for i in range(n + 1)
            ),
        )
        mem = memory_hamiltonian_values(m, grid, marks, state, u, bw, adj)
        rep.update(
            p0_mean=float(adj.p[0].mean()),
            lam0_mean=float(adj.lam[0].mean()),
            memory_hamiltonian_max_abs=float(np.abs(mem).max()),
        )

    elif cfg.task == "grad-check":
        rng = np.random.Generator(np.random.Philox(key=[cfg.gc_direction_seed, 0]))
        n = grid.n_steps
        beta = rng.normal(size=(n, 1)) * np.exp(-grid.times[:n, None])
        vc = first_variation_check(
            m, grid, marks, drivers, u, beta, eps=cfg.gc_eps, degree=cfg.degree
        )
        rep.update(
            analytic=vc.analytic, finite_diff=vc.finite_diff,
            abs_err=vc.abs_err, rel_err=vc.rel_err, eps=vc.eps,
        )

    elif cfg.task in ("optimize", "transversality", "lq-benchmark"):
        opt = optimize_control(
            m, grid, marks, drivers, u, step=cfg.opt_step,
            max_sweeps=cfg.opt_sweeps, degree=cfg.degree,
            picard_tol=cfg.picard_tol, picard_max_iter=cfg.picard_max_iter,
            min_step=cfg.opt_min_step, cap_mb=cfg.memory_cap_mb,
        )
        write_csv(
            os.path.join(out, "optimize.csv"),
            ["sweep", "J", "J_se", "stationarity", "step"],
            (
                (i + 1, opt.J_history[i], opt.se_history[i],
                 opt.stationarity_history[i], opt.step_history[i])
                for i in range(opt.n_sweeps)
            ),
        )
        write_csv(
            os.path.join(out, "policy.csv"),
            ["t", "u_mean"],
            ((grid.times[i], opt.u.values[i].mean()) for i in range(grid.n_steps)),
        )
        rep.update(
            sweeps=opt.n_sweeps,
            J_initial=opt.J_history[0],
            J_best=max(opt.J_history),
            stationarity_initial=opt.stationarity_history[0],
            stationarity_final=opt.stationarity_history[-1],
            aborted=opt.aborted,
        )
        if opt.aborted:
            raise NonConvergence("step size collapsed before a stationary policy")

        if cfg.task == "transversality":
            base_state = simulate_forward(m, grid, drivers, u)
            base_bw = picard_solve(
                m, grid, marks, drivers, base_state, u, tol=cfg.picard_tol,
                max_iter=cfg.picard_max_iter, degree=cfg.degree,
                cap_mb=cfg.memory_cap_mb,
            )
            tr = transversality_diagnostics(
                grid, opt.state, opt.bw, opt.adj,
                other_state=base_state, other_bw=base_bw,
            )
            write_csv(
                os.path.join(out, "transversality.csv"),
                ["t", "pX", "lamY"],
                zip(tr.times, tr.pX, tr.lamY),
            )
            rep.update(times=tr.times, pX=tr.pX, lamY=tr.lamY, decaying=tr.decaying)

        if cfg.task == "lq-benchmark":
            pr = m.params
            P = discounted_lq_gain(pr["a"], pr["rho"], pr["kappa"])
            J_star = discounted_lq_value(
                pr["x0"], pr["a"], pr["sigma0"], pr["rho"], pr["kappa"]
            )
            n = grid.n_steps
            ufb = -P * opt.state.X_grid[:n] / pr["kappa"]
            num = np.sqrt(weighted_norm_sq(opt.u.values - ufb, None, None, grid))
            den = np.sqrt(weighted_norm_sq(ufb, None, None, grid))
            J_best = max(opt.J_history)
            rep.update(
                riccati_gain=P,
                J_star=J_star,
                policy_err_pct=100.0 * num / den,
                J_err_pct=100.0 * abs(J_best - J_star) / abs(J_star),
            )

    elif cfg.task == "concavity":
        state, bw, adj = solve_pipeline(
            m, grid, marks, drivers, u, cfg.degree, cfg.picard_tol,
            cfg.picard_max_iter, cfg.memory_cap_mb,
        )
        cc = check_concavity(m, grid, marks, state, u, bw, adj, seed=cfg.seed)
        rep.update(
            hamiltonian_concave=cc.hamiltonian_ok,
            terminal_concave=cc.terminal_ok,
            passed=cc.passed,
            failures=cc.failures,
        )
    return rep


# ---------------------------------------------------------------------------
# entry point


def run(cfg: ExperimentConfig) -> int:
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    status, code, rep, error = "ok", 0, {}, None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            rep = run_task(cfg, out)
        except ValidationError as e:
            status, code, error = "validation-error", 2, str(e)
        except NonConvergence as e:
            status, code, error = "non-convergence", 3, str(e)
        except NumericalAbort as e:
            status, code, error = "numerical-abort", 3, str(e)
        except ResourceCapError as e:
            status, code, error = "resource-cap", 4, str(e)
    warn_msgs = sorted({str(w.message) for w in caught})

    m = None
    try:
        m = builtin(cfg.model_name, **cfg.model_params)
    except ValidationError:
        pass
    bound = contraction_bound_sq(m.L, cfg.grid.beta) if m is not None else None
    manifest = {
        "config": cfg.raw,
        "task": cfg.task,
        "seed": cfg.seed,
        "n_paths": cfg.n_paths,
        "status": status,
        "exit_code": code,
        "contraction_bound_sq": bound,
        "non_contractive": bool(bound is not None and bound >= 1.0),
        "warnings": warn_msgs,
        "wall_time_s": time.perf_counter() - t0,
        "versions": {"fbsvie-lab": __version__, "numpy": np.__version__},
        "report": rep,
    }
    write_json(os.path.join(out, "manifest.json"), manifest)
    if error is not None:
        write_json(
            os.path.join(out, "error.json"),
            {"status": status, "exit_code": code, "message": error},
        )
        print(f"error ({status}): {error}", file=sys.stderr)
    return code


def main(argv: list | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fbsvie-lab",
        description="numerical laboratory for coupled forward-backward "
        "stochastic Volterra systems with delay and jumps",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="execute one experiment config")
    runp.add_argument("config", help="path to the YAML experiment config")
    runp.add_argument("--seed", type=int, default=None, help="override config seed")
    runp.add_argument("--paths", type=int, default=None, help="override n_paths")
    runp.add_argument("--out", default=None, help="override output directory")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.paths is not None:
            if args.paths < 1:
                raise ValidationError("--paths must be positive")
            cfg.n_paths = args.paths
        if args.out is not None:
            cfg.out_dir = args.out
    except ValidationError as e:
        print(f"error (validation-error): {e}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
