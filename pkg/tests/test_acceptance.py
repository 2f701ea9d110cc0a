"""Acceptance criteria at desk scale: d=1, T=1, n=100, N=2e5, cubic basis.

Each test records a PASS/FAIL line (printed in the terminal summary) and
then asserts the same condition.
"""
import json

import numpy as np
import pytest

from ppdelab import (
    BsdeCandidate,
    FixedTime,
    LocalizingTime,
    TimeGrid,
    brute_force_snell_tree,
    comparison_experiment,
    constant,
    girsanov_weights,
    martingale_property_test,
    nonlinear_expectation,
    punctual_jet_estimate,
    simulate_base,
    simulate_drifted,
    snell_envelope,
    solve_bsde,
    solve_many,
    stopped_value,
    tangency_point,
)
from ppdelab import library
from ppdelab.bsde import abs_driver
from ppdelab.cli import main
from ppdelab.snell import tree_monte_carlo
from ppdelab.viscosity import sample_points

from acceptance_log import record
from oracles import deterministic_argmax, sup_over_constant_drifts, tree_snell

pytestmark = pytest.mark.acceptance

N = 200_000
GRID = TimeGrid(1.0, 100)
SIG = library.identity_sigma()
L = 0.5

B = library.linear_payoff()
SQ = library.square_payoff()
SIN = library.sine_payoff()
PAYOFFS = {"B": B, "B^2": SQ, "sin B": SIN}


@pytest.fixture(scope="module")
def ens():
    return simulate_base(SIG, GRID, N, 1, seed=2024)


def check(number, ok, detail):
    record(number, ok, detail)
    assert ok, detail


def test_01_upper_expectation_closed_form(ens):
    sol = nonlinear_expectation(B, L, ens)
    lams = np.linspace(-L, L, 11)
    drifted = []
    for lam in lams:
        dens = simulate_drifted(SIG, constant("control", lam, bound=abs(lam)), GRID, N, 1, seed=77)
        drifted.append(dens.mean(dens.paths[:, -1, 0]))
    sup_mc = max(drifted)
    target = L * GRID.T
    assert sup_over_constant_drifts(GRID.T, L) == pytest.approx(target)
    ok = abs(sol.y0 / target - 1) <= 0.02 and abs(sup_mc / target - 1) <= 0.02
    check(1, ok, f"Y0={sol.y0:.5f} sup over drifts={sup_mc:.5f} target={target}")


def test_02_duality_is_bit_exact(ens):
    bad = []
    for name, xi in PAYOFFS.items():
        up = nonlinear_expectation(xi, L, ens, side="upper").y0
        lo_neg = nonlinear_expectation(-xi, L, ens, side="lower").y0
        if up != -lo_neg:
            bad.append(f"{name}: {up!r} vs {-lo_neg!r}")
    check(2, not bad, "upper(xi) == -lower(-xi) for B, B^2, sin B" if not bad else "; ".join(bad))


def test_03_sublinearity_suite(ens):
    names = list(PAYOFFS)
    problems, index = [], {}

    def add(key, driver, terminal):
        index[key] = len(problems)
        problems.append((driver, terminal))

    for nm, xi in PAYOFFS.items():
        add(("up", nm), abs_driver(L), xi)
        add(("neg", nm), abs_driver(L), -xi)
        add(("plain", nm), abs_driver(0.0), xi)
        add(("half", nm), abs_driver(L / 2), xi)
        add(("scaled", nm), abs_driver(L), 2.5 * xi)
    for a, b in ((0, 1), (0, 2), (1, 2)):
        add(("sum", names[a], names[b]), abs_driver(L), PAYOFFS[names[a]] + PAYOFFS[names[b]])
    est = solve_many(ens, problems, full=False)

    def get(*key):
        return est[index[key]]

    failures = []
    for nm in names:
        up, neg, plain, half, scaled = (get(k, nm) for k in ("up", "neg", "plain", "half", "scaled"))
        lower = -neg.value
        if not lower - 3 * np.hypot(neg.std_error, plain.std_error) <= plain.value:
            failures.append(f"sandwich low {nm}")
        if not plain.value <= up.value + 3 * np.hypot(up.std_error, plain.std_error):
            failures.append(f"sandwich high {nm}")
        if not half.value <= up.value + 3 * np.hypot(up.std_error, half.std_error):
            failures.append(f"monotone in L {nm}")
        if abs(scaled.value - 2.5 * up.value) > 1e-12 * max(1.0, abs(up.value)):
            failures.append(f"homogeneity {nm}: {scaled.value!r} vs {2.5 * up.value!r}")
    for a, b in ((0, 1), (0, 2), (1, 2)):
        s = get("sum", names[a], names[b])
        ua, ub = get("up", names[a]), get("up", names[b])
        se = np.sqrt(s.std_error**2 + ua.std_error**2 + ub.std_error**2)
        if not s.value <= ua.value + ub.value + 3 * se:
            failures.append(f"subadditivity {names[a]}+{names[b]}")
    check(3, not failures, "all 4 properties on 3 payoffs" if not failures else ", ".join(failures))


def test_04_heat_equation(ens):
    sol = solve_bsde(SIG, library.zero_driver(), SQ, ens)
    value_ok = abs(sol.y0 - 1.0) <= 0.01
    pts = sample_points(ens, 20, seed=4)
    rules = [FixedTime(5), FixedTime(20), LocalizingTime(30, 0.5)]
    heat = library.heat_solution()
    reps = {m: martingale_property_test(heat, m, pts, rules, N=20_000, seed=4) for m in ("P-sub", "P-super")}
    ok = value_ok and all(r.passed for r in reps.values())
    verdicts = ", ".join(f"{m} {sum(c.verdict == 'pass' for c in r.checks)}/{len(r.checks)}" for m, r in reps.items())
    check(4, ok, f"u0={sol.y0:.5f} (target 1.0); {verdicts}")


def test_05_linear_driver(ens):
    sol = solve_bsde(SIG, library.linear_driver(0.5), SQ, ens)
    target = float(np.exp(0.5))
    check(5, abs(sol.y0 / target - 1) <= 0.02, f"Y0={sol.y0:.5f} target={target:.5f}")


def test_06_girsanov_identity(ens):
    lam = 0.3
    control = constant("control", lam, bound=lam)
    w = girsanov_weights(control, ens)
    weighted = ens.with_weights(w)
    x = weighted.paths[:, -1, 0]
    a, se_a = weighted.mean(x), weighted.std_error(x)
    dens = simulate_drifted(SIG, control, GRID, N, 1, seed=99)
    y = dens.paths[:, -1, 0]
    b, se_b = dens.mean(y), dens.std_error(y)
    se = float(np.hypot(se_a, se_b))
    check(6, abs(a - b) <= 3 * se, f"weighted={a:.5f} drifted={b:.5f} |diff|={abs(a - b):.2e} 3se={3 * se:.2e}")


TREE = {
    "omega": (library.linear_payoff(role="obstacle"), lambda t, p: p[-1]),
    "|omega|": (library.abs_payoff(), lambda t, p: abs(p[-1])),
    "bump": (library.time_functional(lambda t: -((t - 0.45) ** 2), "bump", "obstacle"), lambda t, p: -((t - 0.45) ** 2)),
}


def test_07_tree_oracle():
    h = 0.25
    worst_enum = worst_mc = 0.0
    for obstacle, plain in TREE.values():
        for lval in (0.0, 0.5):
            r = brute_force_snell_tree(obstacle, lval, 4, h)
            assert abs(r.value - tree_snell(plain, lval, 4, h)) <= 1e-12
            mc = tree_monte_carlo(obstacle, lval, 4, h)
            worst_enum = max(worst_enum, abs(r.value - r.enumerated))
            worst_mc = max(worst_mc, abs(mc.value - r.value), abs(mc.envelope_value - r.value))
    ok = worst_enum <= 1e-12 and worst_mc <= 1e-10
    check(7, ok, f"max |induction-enumeration|={worst_enum:.1e}, max |MC tree-induction|={worst_mc:.1e}")


def test_08_snell_closed_form(ens):
    obstacle = library.linear_payoff(role="obstacle")
    sol = snell_envelope(obstacle, L, ens)
    re = stopped_value(obstacle, sol.tau, L, ens)
    se = float(np.hypot(sol.std_error, re.std_error))
    ok = abs(sol.value / 0.5 - 1) <= 0.03 and abs(re.y0 - sol.value) <= 3 * se
    check(8, ok, f"V0={sol.value:.5f} (target 0.5) re-evaluated={re.y0:.5f} 3se={3 * se:.2e}")


def test_09_tangency(ens):
    fn = lambda t: -((t - 0.5) ** 2) - t / 10  # noqa: E731
    tp = tangency_point(library.time_functional(fn, "bump"), 0.0, ens)
    expected = deterministic_argmax(fn, GRID.times)
    flat = tangency_point(library.time_functional(lambda t: -t, "neg_time"), 0.0, ens)
    ok = abs(tp.index - expected) <= 1 and flat.index == 0
    check(9, ok, f"t*={tp.time:.2f} (argmax {GRID.t(expected):.2f}); decreasing t*={flat.time}")


def test_10_comparison(ens):
    drv = library.trig_driver(0.5, 0.3)
    u = BsdeCandidate(drv, SIN)
    v = BsdeCandidate(drv, SIN + 0.5)
    rep = comparison_experiment(u, v, ens, points=20, seed=10)
    worst = min(c.margin + 3 * c.std_error for c in rep.checks)
    closed = library.sine_payoff(role="candidate")
    shifted = comparison_experiment(closed, closed + 0.5, ens, points=20, seed=10)
    exact = shifted.min_margin == 0.5 and shifted.max_margin == 0.5
    ok = worst >= 0 and exact
    check(10, ok, f"min(v-u)={rep.min_margin:.4f} over {len(rep.checks)} checks; (u, u+0.5) margin={shifted.min_margin}")


def test_11_punctual_jets(ens):
    rng = np.random.default_rng(11)
    window = 5
    chosen = []
    while len(chosen) < 20:
        p, i = int(rng.integers(ens.N)), int(rng.integers(10, 90))
        if 0.5 <= abs(ens.paths[p, i, 0]) <= 1.5:
            chosen.append((p, i))
    u = library.square_payoff(role="candidate")
    alphas, ratios = [], []
    for j, (p, i) in enumerate(chosen):
        est = punctual_jet_estimate(u, i, ens.path(p), window, N=N, seed=j)
        alphas.append(est.alpha)
        ratios.append(est.beta[0] / (2 * ens.paths[p, i, 0]))
    a_mean, r_mean = float(np.mean(alphas)), float(np.mean(ratios))
    t_jet = punctual_jet_estimate(library.time_functional(lambda t: t, "time"), 30, ens.path(0), window, N=N, seed=1)
    time_ok = abs(t_jet.alpha - 1) <= 1e-12 and abs(t_jet.beta[0]) <= max(3 * t_jet.beta_std_error, 1e-12)
    ok = 0.9 <= a_mean <= 1.1 and abs(r_mean - 1) <= 0.1 and time_ok
    check(
        11,
        ok,
        f"mean alpha={a_mean:.4f}, mean beta/(2 omega)={r_mean:.4f}; u=t: alpha={t_jet.alpha:.12g} beta={t_jet.beta[0]:.2e}",
    )


CLI_CONFIG = """
[grid]
T = 1.0
n = 50
[payoff]
name = "sine"
[driver]
name = "trig"
[solver]
N = 50000
seed = 12
[viscosity]
candidate = "heat"
points = 6
rules = [2, 5, 10]
inner_N = 5000
[compare]
points = 6
"""


def test_12_determinism_across_threads(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(CLI_CONFIG)
    commands = ["simulate", "expectation", "bsde", "snell", "viscosity-check", "compare"]
    differing = []
    for cmd in commands:
        outs = []
        for threads in (1, 4):
            out = tmp_path / f"{cmd}-{threads}"
            assert main([cmd, "--config", str(cfg), "--out", str(out), "--threads", str(threads)]) == 0
            outs.append(out)
        files = sorted(p.name for p in outs[0].iterdir() if p.name != "timing.json")
        assert files == sorted(p.name for p in outs[1].iterdir() if p.name != "timing.json")
        for name in files:
            if (outs[0] / name).read_bytes() != (outs[1] / name).read_bytes():
                differing.append(f"{cmd}/{name}")
        json.loads((outs[0] / "summary.json").read_text())
    check(12, not differing, f"{len(commands)} commands, threads 1 vs 4" if not differing else ", ".join(differing))
