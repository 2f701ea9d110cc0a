"""Command-line runner: ``ppdelab <subcommand> --config exp.toml``.

Each run writes ``summary.json`` (estimates plus the resolved config),
a CSV table, and ``timing.json``.  Wall-clock time, the worker count and the
output directory live only in ``timing.json`` so that the other files are
bit-identical across reruns with the same config and seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import library
from .bsde import _json_default, derived_seed, nonlinear_expectation, solve_bsde, write_solution_csv, write_summary
from .config import ExperimentConfig, from_dict, load_config
from .errors import NumericalError, PpdeError, ValidationError
from .paths import TimeGrid, save_ensemble
from .regression import RegressionBasis
from .sde import simulate_base
from .snell import FixedTime, snell_envelope, upper_snell_envelope
from .viscosity import (
    BsdeCandidate,
    Check,
    TestJet,
    ViscosityReport,
    comparison_experiment,
    martingale_property_test,
    punctual_jet_estimate,
    sample_points,
    tangency_point,
    test_process_gap,
)

COMMANDS = ("simulate", "expectation", "bsde", "snell", "viscosity-check", "compare", "converge")


class Setup:
    def __init__(self, cfg: ExperimentConfig, threads: int = 1):
        self.cfg = cfg
        self.threads = threads
        self.grid = TimeGrid(float(cfg.grid.T), int(cfg.grid.n))
        self.sigma = library.make_sigma(cfg.model.sigma, **cfg.model.sigma_params)
        self.driver = library.make_driver(cfg.driver.name, **cfg.driver.params)
        self.payoff = library.make_payoff(cfg.payoff.name, **cfg.payoff.params)
        self.basis = RegressionBasis(degree=cfg.solver.degree, ridge=cfg.solver.ridge)

    def ensemble(self, N=None, n=None, seed=None):
        grid = self.grid if n is None else TimeGrid(self.grid.T, int(n))
        return simulate_base(
            self.sigma,
            grid,
            int(N or self.cfg.solver.N),
            self.cfg.model.d,
            self.cfg.solver.seed if seed is None else seed,
            self.threads,
        )


def _recorded_config(cfg: ExperimentConfig) -> dict:
    out = cfg.to_dict()
    out["output"].pop("directory", None)
    return out


def _summary(cfg, command, **values) -> dict:
    return {"command": command, **values, "config": _recorded_config(cfg)}


def _write_table(rows: list, header: list, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def analytic_target(cfg: ExperimentConfig, experiment: str) -> float | None:
    """Closed-form value for the library cases that have one, else ``None``."""
    if cfg.model.sigma != "identity":
        return None
    T, d, L = float(cfg.grid.T), cfg.model.d, float(cfg.model.L)
    name, params = cfg.payoff.name, cfg.payoff.params
    if experiment in ("expectation", "snell") and name == "linear":
        e = float(np.linalg.norm(np.broadcast_to(np.atleast_1d(params.get("e", 1.0)), (d,))))
        sign = -1.0 if experiment == "expectation" and cfg.expectation.side == "lower" else 1.0
        if experiment == "snell" and cfg.snell.side != "lower":
            return None
        return sign * L * T * e
    if experiment == "expectation" and name == "square" and L == 0:
        return d * T
    if experiment == "bsde" and name == "square":
        if cfg.driver.name == "zero":
            return d * T
        if cfg.driver.name == "linear" and float(np.sum(np.abs(cfg.driver.params.get("b", 0.0)))) == 0:
            return math.exp(float(cfg.driver.params.get("a", 0.0)) * T) * d * T
    return None


def cmd_simulate(s: Setup, out: Path) -> dict:
    cfg = s.cfg
    ens = s.ensemble()
    if "bin" in cfg.output.formats or "json" in cfg.output.formats:
        save_ensemble(ens, out / "ensemble")
    if "csv" in cfg.output.formats:
        rows = []
        for p in range(min(ens.N, cfg.output.csv_paths)):
            for k in range(ens.n + 1):
                rows.append([p, k, float(ens.grid.times[k]), *[float(x) for x in ens.paths[p, k]]])
        _write_table(rows, ["path", "index", "t", *[f"x{c}" for c in range(ens.d)]], out / "paths.csv")
    xT = ens.paths[:, -1, :]
    return _summary(
        cfg,
        "simulate",
        N=ens.N,
        n=ens.n,
        d=ens.d,
        seed=cfg.solver.seed,
        terminal_mean=[ens.mean(xT[:, c]) for c in range(ens.d)],
        terminal_std_error=[ens.std_error(xT[:, c]) for c in range(ens.d)],
        terminal_variance=[float(np.var(xT[:, c])) for c in range(ens.d)],
    )


def _bsde_like(s: Setup, experiment: str, ens):
    cfg = s.cfg
    if experiment == "expectation":
        return nonlinear_expectation(s.payoff, cfg.model.L, ens, cfg.expectation.side, s.sigma, s.basis)
    if experiment == "bsde":
        return solve_bsde(s.sigma, s.driver, s.payoff, ens, s.basis)
    if experiment == "snell":
        obstacle = s.payoff.with_role("obstacle")
        H = cfg.snell.horizon_steps
        fn = snell_envelope if cfg.snell.side == "lower" else upper_snell_envelope
        return fn(obstacle, cfg.model.L, ens, H, s.basis, s.sigma, cfg.solver.contact_tol)
    raise ValidationError(f"unknown experiment {experiment!r}", field="converge.experiment")


def _estimate_fields(sol) -> dict:
    if hasattr(sol, "tau"):
        return sol.summary()
    return {"estimate": sol.y0, "std_error": sol.std_error, "N": sol.N, "n": sol.grid.n, "seed": sol.seed}


def cmd_solution(s: Setup, out: Path, experiment: str) -> dict:
    cfg = s.cfg
    ens = s.ensemble()
    sol = _bsde_like(s, experiment, ens)
    if "csv" in cfg.output.formats:
        if hasattr(sol, "tau"):
            sol.write_csv(out / "solution.csv", cfg.output.csv_paths)
        else:
            write_solution_csv(sol, out / "solution.csv", cfg.output.csv_paths)
    fields = _estimate_fields(sol)
    if hasattr(sol, "tau"):
        fields["estimate"] = sol.value
    target = analytic_target(cfg, experiment)
    if target is not None:
        fields["analytic"] = target
        fields["abs_error"] = abs(fields["estimate"] - target)
    return _summary(cfg, experiment, **fields)


def cmd_viscosity(s: Setup, out: Path) -> dict:
    cfg, v = s.cfg, s.cfg.viscosity
    u = library.make_payoff(v.candidate, **{**v.candidate_params, "role": "candidate"})
    seed = cfg.solver.seed
    if v.check == "tangency":
        ens = s.ensemble()
        tp = tangency_point(u, cfg.model.L, ens, cfg.snell.horizon_steps, s.basis, s.sigma)
        report = ViscosityReport(
            "tangency",
            [Check("tangency", (tp.path, tp.index), tp.precondition_margin, tp.precondition_std_error, "pass", {"t": tp.time, "gap": tp.gap})],
        )
    else:
        base = s.ensemble(N=max(1000, v.points), seed=seed)
        points = sample_points(base, v.points, seed)
        if v.check == "martingale":
            rules = [FixedTime(int(r)) for r in v.rules]
            report = martingale_property_test(u, v.mode, points, rules, v.inner_N, seed, cfg.model.L, s.basis, s.sigma, s.threads)
        elif v.check == "gap":
            jet = TestJet(v.alpha, tuple(v.beta))
            steps = max(1, cfg.grid.n // 10)
            checks = []
            for k, (i, omega, label) in enumerate(points):
                g = test_process_gap(u, jet, cfg.model.L, i, omega, steps, v.side, v.inner_N, derived_seed(seed, k), s.basis, s.sigma)
                checks.append(Check(f"gap-{v.side}", (label, i), g.gap, g.std_error, "pass" if g.member else "fail"))
            report = ViscosityReport("gap", checks)
        elif v.check == "jet":
            checks = []
            for k, (i, omega, label) in enumerate(points):
                if i + v.window > cfg.grid.n:
                    continue
                j = punctual_jet_estimate(u, i, omega, v.window, v.inner_N, derived_seed(seed, k), s.basis, s.sigma)
                checks.append(
                    Check("jet", (label, i), j.alpha, j.alpha_std_error, "pass", {"beta": list(j.beta), "dispersion": j.alpha_dispersion})
                )
            report = ViscosityReport("jet", checks)
        else:
            raise ValidationError(f"unknown viscosity check {v.check!r}", field="viscosity.check")
    if "csv" in cfg.output.formats:
        report.write_csv(out / "checks.csv")
    if "json" in cfg.output.formats:
        report.write_json(out / "report.json")
    return _summary(cfg, "viscosity-check", **report.summary())


def cmd_compare(s: Setup, out: Path) -> dict:
    cfg, c = s.cfg, s.cfg.compare
    ens = s.ensemble()
    u = BsdeCandidate(s.driver, s.payoff, "u")
    v = BsdeCandidate(s.driver, s.payoff + float(c.shift), "v")
    window = c.difference_window
    report = comparison_experiment(
        u, v, ens, s.sigma, c.points, cfg.solver.seed, basis=s.basis,
        L=cfg.model.L if window else None, window=window, jet_N=min(cfg.solver.N, 20_000),
    )
    if "csv" in cfg.output.formats:
        report.write_csv(out / "checks.csv")
    if "json" in cfg.output.formats:
        report.write_json(out / "report.json")
    return _summary(cfg, "compare", **report.summary())


def convergence_study(s: Setup, timings: list | None = None) -> list:
    cfg = s.cfg
    levels = cfg.converge.levels
    if len(levels) < 2:
        raise ValidationError("a convergence study needs at least two (N, n) levels", field="converge.levels")
    target = analytic_target(cfg, cfg.converge.experiment)
    rows = []
    for k, (N, n) in enumerate(levels):
        t0 = time.perf_counter()
        sol = _bsde_like(s, cfg.converge.experiment, s.ensemble(N=N, n=n))
        est = sol.value if hasattr(sol, "tau") else sol.y0
        row = {
            "level": k,
            "experiment": cfg.converge.experiment,
            "N": int(N),
            "n": int(n),
            "seed": cfg.solver.seed,
            "estimate": float(est),
            "std_error": float(sol.std_error),
        }
        if target is not None:
            row["abs_error"] = abs(float(est) - target)
        rows.append(row)
        if timings is not None:
            timings.append({"level": k, "runtime_ms": 1000 * (time.perf_counter() - t0)})
    return rows


def cmd_converge(s: Setup, out: Path, timings: list) -> dict:
    rows = convergence_study(s, timings)
    header = list(rows[0])
    if "csv" in s.cfg.output.formats:
        _write_table([[r[h] for h in header] for r in rows], header, out / "convergence.csv")
    return _summary(s.cfg, "converge", rows=rows, analytic=analytic_target(s.cfg, s.cfg.converge.experiment))


def run_experiment(command: str, cfg: ExperimentConfig, out: Path, threads: int = 1) -> dict:
    if command not in COMMANDS:
        raise ValidationError(f"unknown command {command!r}", field="command")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    s = Setup(cfg, threads)
    timings: list = []
    if command == "simulate":
        summary = cmd_simulate(s, out)
    elif command in ("expectation", "bsde", "snell"):
        summary = cmd_solution(s, out, command)
    elif command == "viscosity-check":
        summary = cmd_viscosity(s, out)
    elif command == "compare":
        summary = cmd_compare(s, out)
    else:
        summary = cmd_converge(s, out, timings)
    write_summary(summary, out / "summary.json")
    timing = {"runtime_ms": 1000 * (time.perf_counter() - t0), "threads": threads, "directory": str(out)}
    if timings:
        timing["levels"] = timings
    (out / "timing.json").write_text(json.dumps(timing, indent=2, default=_json_default) + "\n")
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppdelab", description="Monte-Carlo lab for path-dependent semilinear PDEs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML experiment file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override solver.seed")
        p.add_argument("--out", type=Path, help="override output.directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads (never changes results)")
    return parser


def _error_report(exc: Exception, code: int) -> dict:
    report = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("field", "path_index", "step", "condition"):
        val = getattr(exc, attr, None)
        if val is not None:
            report[attr] = val
    return report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else from_dict({})
        if args.seed is not None:
            cfg.solver.seed = args.seed
        if args.out is not None:
            cfg.output.directory = str(args.out)
        if args.threads < 1:
            raise ValidationError("--threads must be >= 1", field="threads")
        cfg.validate()
        summary = run_experiment(args.command, cfg, Path(cfg.output.directory), args.threads)
    except ValidationError as exc:
        print(json.dumps(_error_report(exc, 2), default=_json_default), file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(json.dumps(_error_report(exc, 3), default=_json_default), file=sys.stderr)
        return 3
    except PpdeError as exc:
        print(json.dumps(_error_report(exc, 2), default=_json_default), file=sys.stderr)
        return 2
    brief = {k: summary[k] for k in ("command", "estimate", "std_error", "V0", "passed", "min_margin") if k in summary}
    print(json.dumps(brief, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
