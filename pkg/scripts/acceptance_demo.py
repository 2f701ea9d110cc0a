"""Quick tour of the headline checks at a reduced scale (a few seconds each).

The full-scale versions live in tests/test_acceptance.py; this script prints
the numbers so they can be eyeballed or compared across parameter choices.

Usage: python scripts/acceptance_demo.py [--N 50000] [--n 50] [--seed 1]
"""
import argparse
import math

import numpy as np

from ppdelab import (
    BsdeCandidate,
    TimeGrid,
    brute_force_snell_tree,
    comparison_experiment,
    nonlinear_expectation,
    punctual_jet_estimate,
    simulate_base,
    snell_envelope,
    solve_bsde,
    tangency_point,
)
from ppdelab import library


def line(label, value, target=None, se=None):
    extra = "" if target is None else f"   target {target:.5f}"
    extra += "" if se is None else f"   se {se:.1e}"
    print(f"{label:44s} {value:12.6f}{extra}")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--N", type=int, default=50_000)
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    sig = library.identity_sigma()
    grid = TimeGrid(1.0, args.n)
    ens = simulate_base(sig, grid, args.N, 1, seed=args.seed)
    B, SQ, SIN = library.linear_payoff(), library.square_payoff(), library.sine_payoff()

    up = nonlinear_expectation(B, 0.5, ens)
    line("upper expectation of B_1, L=0.5", up.y0, 0.5, up.std_error)
    lo = nonlinear_expectation(B, 0.5, ens, side="lower")
    line("lower expectation of B_1, L=0.5", lo.y0, -0.5, lo.std_error)

    heat = solve_bsde(sig, library.zero_driver(), SQ, ens)
    line("heat value E[B_1^2]", heat.y0, 1.0, heat.std_error)
    lin = solve_bsde(sig, library.linear_driver(0.5), SQ, ens)
    line("driver 0.5 y, terminal B_1^2", lin.y0, math.exp(0.5), lin.std_error)

    sn = snell_envelope(library.linear_payoff(role="obstacle"), 0.5, ens)
    line("Snell value of omega_t, L=0.5", sn.value, 0.5, sn.std_error)
    line("  regression envelope at start", sn.envelope_value)
    line("  mean stopping time", sn.tau.mean * grid.h)

    for L in (0.0, 0.5):
        r = brute_force_snell_tree(library.abs_payoff(), L, 4, 0.25)
        line(f"tree |omega|, depth 4, L={L}: induction", r.value)
        line("  exhaustive enumeration", r.enumerated)

    fn = lambda t: -((t - 0.5) ** 2) - t / 10  # noqa: E731
    tp = tangency_point(library.time_functional(fn, "bump"), 0.0, ens)
    line("tangency time of the bump", tp.time, 0.45)

    drv = library.trig_driver()
    rep = comparison_experiment(BsdeCandidate(drv, SIN), BsdeCandidate(drv, SIN + 0.5), ens, points=10)
    line("comparison: min (v - u)", rep.min_margin)

    p = int(np.argmin(np.abs(np.abs(ens.paths[:, args.n // 2, 0]) - 1.0)))
    j = punctual_jet_estimate(library.square_payoff(role="candidate"), args.n // 2, ens.path(p), 5, N=args.N, seed=2)
    w = ens.paths[p, args.n // 2, 0]
    line("jet of omega^2: alpha", j.alpha, 1.0, j.alpha_std_error)
    line("jet of omega^2: beta", j.beta[0], 2 * w, j.beta_std_error)


if __name__ == "__main__":
    main()
