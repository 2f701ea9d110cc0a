"""Bias and error of the regression solvers as the grid and sample grow.

Three problems with known values at the start:
  heat      zero driver, terminal B_T^2            -> 1
  linear    driver 0.5 y, terminal B_T^2           -> exp(0.5)
  snell     obstacle omega_t, upper bound L = 0.5  -> 0.5

Usage: python scripts/convergence_sweep.py [--levels 20000x25 50000x50 ...] [--json out.json]
"""
import argparse
import json
import math
import time

from ppdelab import TimeGrid, simulate_base, snell_envelope, solve_bsde
from ppdelab import library

PROBLEMS = {
    "heat": 1.0,
    "linear": math.exp(0.5),
    "snell": 0.5,
}


def solve(name, ens):
    sig = library.identity_sigma()
    if name == "heat":
        return solve_bsde(sig, library.zero_driver(), library.square_payoff(), ens).estimate()
    if name == "linear":
        return solve_bsde(sig, library.linear_driver(0.5), library.square_payoff(), ens).estimate()
    return snell_envelope(library.linear_payoff(role="obstacle"), 0.5, ens).estimate()


def parse_level(text):
    N, n = text.lower().split("x")
    return int(N), int(n)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--levels", nargs="+", type=parse_level, default=[(20_000, 25), (50_000, 50), (100_000, 100)])
    ap.add_argument("--problems", nargs="+", choices=sorted(PROBLEMS), default=sorted(PROBLEMS))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="write the rows to this file")
    args = ap.parse_args()

    rows = []
    print(f"{'problem':8s} {'N':>8s} {'n':>5s} {'estimate':>10s} {'target':>9s} {'error':>10s} {'se':>9s} {'sec':>6s}")
    for N, n in args.levels:
        ens = simulate_base(library.identity_sigma(), TimeGrid(1.0, n), N, 1, seed=args.seed)
        for name in args.problems:
            t0 = time.perf_counter()
            est = solve(name, ens)
            dt = time.perf_counter() - t0
            target = PROBLEMS[name]
            row = dict(problem=name, N=N, n=n, estimate=est.value, target=target,
                       error=est.value - target, std_error=est.std_error, seconds=dt)
            rows.append(row)
            print(f"{name:8s} {N:8d} {n:5d} {est.value:10.5f} {target:9.5f} {row['error']:+10.2e} {est.std_error:9.2e} {dt:6.1f}")
        del ens
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
