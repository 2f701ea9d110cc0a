import numpy as np
import pytest

from ppdelab import (
    BsdeCandidate,
    DiscretePath,
    FixedTime,
    NoContactError,
    PreconditionError,
    SmoothTest,
    TestJet,
    TimeGrid,
    ValidationError,
    comparison_experiment,
    constant,
    martingale_property_test,
    punctual_jet_estimate,
    simulate_base,
    submartingale_transform,
    subsolution_residual,
    tangency_point,
    test_process_gap,
)
from ppdelab import library
from ppdelab.snell import LocalizingTime
from ppdelab.viscosity import sample_points, value_candidate

from oracles import deterministic_argmax

G = TimeGrid(1.0, 100)
G20 = TimeGrid(1.0, 20)
O = DiscretePath.zero(G)
HEAT = library.heat_solution()
SQ = library.square_payoff(role="candidate")
SIG = library.identity_sigma()


def prefix_path(grid, a, i):
    vals = np.r_[np.linspace(0, a, i + 1), np.full(grid.n - i, a)]
    return DiscretePath(grid, vals[:, None])


# test-process gaps

def test_gap_of_self_is_zero():
    g = test_process_gap(HEAT, SmoothTest(HEAT), 0.3, 10, prefix_path(G, 0.4, 10), 10, "sub", N=4000, seed=1)
    assert g.gap == 0.0 and g.member


@pytest.mark.parametrize("side", ["sub", "super"])
def test_heat_zero_jet_is_in_both_jets(side):
    g = test_process_gap(HEAT, TestJet(0, 0), 0.0, 0, O, 10, side, N=20_000, seed=3)
    assert g.gap <= 0 and g.member


def test_wrong_drift_rejected():
    g = test_process_gap(HEAT, TestJet(-1, 0), 0.0, 0, O, 10, "sub", N=20_000, seed=3)
    # E[(phi - u)_tau] - (phi - u)_0 = -E[tau]; the fixed horizon gives -0.1
    assert not g.member
    assert g.gap == pytest.approx(-0.1, abs=5 * g.std_error + 1e-3)


def test_gap_never_positive():
    for jet in (TestJet(0.5, 1.0), TestJet(-2, -1), TestJet(0, 3)):
        for side in ("sub", "super"):
            assert test_process_gap(SQ, jet, 0.5, 20, prefix_path(G, 0.7, 20), 8, side, N=4000, seed=2).gap <= 0


def test_jet_sign_symmetry():
    pt = prefix_path(G, 0.6, 30)
    a = test_process_gap(SQ, TestJet(0.8, 1.1), 0.5, 30, pt, 10, "sub", N=8000, seed=4)
    b = test_process_gap(-SQ, TestJet(-0.8, -1.1), 0.5, 30, pt, 10, "super", N=8000, seed=4)
    assert a.gap == pytest.approx(b.gap, abs=1e-12)
    assert a.member == b.member


def test_jet_additivity():
    pt = prefix_path(G, 0.5, 20)
    u1, u2 = HEAT, library.linear_payoff(role="candidate")
    j1, j2 = TestJet(0, 0), TestJet(0, 1)
    g1 = test_process_gap(u1, j1, 0.0, 20, pt, 10, "sub", N=20_000, seed=5)
    g2 = test_process_gap(u2, j2, 0.0, 20, pt, 10, "sub", N=20_000, seed=5)
    assert g1.member and g2.member
    g12 = test_process_gap(u1 + u2, j1 + j2, 0.0, 20, pt, 10, "sub", N=20_000, seed=5)
    assert g12.gap >= -(g1.tolerance + g2.tolerance + g12.tolerance)


def test_classical_jet_passes_both_sides():
    # u = omega^2 + (T - t): generator 0 (martingale), gradient 2 omega
    pt = prefix_path(G, 0.8, 40)
    grad = library.linear_payoff(2.0, role="candidate")
    smooth = SmoothTest(HEAT, constant("candidate", 0.0), grad)
    jet = smooth.jet_at(40, pt)
    assert jet.alpha == 0.0 and jet.beta == pytest.approx((1.6,))
    for side in ("sub", "super"):
        assert test_process_gap(HEAT, jet, 0.0, 40, pt, 10, side, N=20_000, seed=6).member


def test_gap_validation():
    with pytest.raises(ValidationError):
        test_process_gap(HEAT, TestJet(0, 0), 0.0, 0, O, 0)
    with pytest.raises(ValidationError):
        test_process_gap(HEAT, TestJet(0, 0), 0.0, 0, O, 5, side="both")


# residuals

def test_subsolution_residual_examples():
    w = O
    assert subsolution_residual(TestJet(0, 2.0), 1.0, library.zero_driver(), SIG, 5, w) == 0.0
    assert subsolution_residual(TestJet(-1.5, 0), 1.0, library.constant_driver(1.5), SIG, 5, w) == 0.0
    assert subsolution_residual(TestJet(1, 0), 2.0, library.linear_driver(1.0), SIG, 5, w) == -3.0


# martingale property

@pytest.fixture(scope="module")
def points():
    ens = simulate_base(SIG, G, 2000, 1, seed=8)
    return sample_points(ens, 6, seed=1)


RULES = [FixedTime(2), FixedTime(5), LocalizingTime(10, 0.5)]


def test_constant_is_a_martingale(points):
    for mode in ("P-sub", "P-super", "E-sub", "E-super"):
        rep = martingale_property_test(constant("candidate", 2.0), mode, points, RULES, N=2000, seed=1, L=0.5)
        assert rep.passed and rep.min_margin == 0.0 and rep.max_margin == 0.0


def test_heat_solution_is_a_martingale(points):
    for mode in ("P-sub", "P-super"):
        assert martingale_property_test(HEAT, mode, points, RULES, N=20_000, seed=2).passed


def test_square_is_a_strict_submartingale(points):
    assert martingale_property_test(SQ, "P-sub", points, RULES, N=20_000, seed=3).passed
    rep = martingale_property_test(SQ, "P-super", points, [FixedTime(5), FixedTime(10)], N=20_000, seed=3)
    assert not rep.passed
    # margin is E[tau - t]
    for c in rep.checks:
        steps = 5 if c.name.endswith("rule0") else 10
        i = c.point[1]
        expected = min(steps, G.n - i) * G.h
        assert c.margin == pytest.approx(expected, abs=5 * c.std_error + 1e-3)


def test_thread_count_does_not_change_report(points):
    a = martingale_property_test(SQ, "P-sub", points, RULES, N=3000, seed=4, threads=1)
    b = martingale_property_test(SQ, "P-sub", points, RULES, N=3000, seed=4, threads=3)
    assert a.to_dict() == b.to_dict()


def test_transform_of_bsde_subsolution_is_upper_submartingale():
    # u is the BSDE value for driver 0.5 cos(y) + 0.3 z, built by nested solves
    g = TimeGrid(1.0, 10)
    drv = library.trig_driver()
    u = value_candidate(SIG, drv, library.sine_payoff(), N=1000, seed=3)
    hat = submartingale_transform(u, 0.5, drv)
    pts = sample_points(simulate_base(SIG, g, 200, 1, seed=9), 3, seed=2)
    rep = martingale_property_test(hat, "E-sub", pts, [FixedTime(2)], N=200, seed=5, L=0.5)
    assert rep.passed and rep.min_margin > 0


def test_transform_adds_the_integral():
    u = constant("candidate", -2.0)
    hat = submartingale_transform(u, 0.5, 1.0)
    vals = hat.along(G20, np.zeros((1, 21, 1)))[0]
    # rate 0.5 * 2 + 1 + 1 = 3
    assert vals == pytest.approx(-2 + 3 * G20.times)


# jets

def test_jet_of_time_is_exact():
    u = library.time_functional(lambda t: t, "time")
    j = punctual_jet_estimate(u, 10, O, 5, N=5000, seed=1)
    assert j.alpha == pytest.approx(1.0, abs=1e-12)
    assert j.beta == (0.0,)


def test_jet_of_brownian():
    j = punctual_jet_estimate(library.linear_payoff(role="candidate"), 20, prefix_path(G, 0.3, 20), 5, N=100_000, seed=2)
    assert abs(j.alpha) <= 3 * j.alpha_std_error
    assert abs(j.beta[0] - 1) <= 0.1


@pytest.mark.parametrize("a", [0.5, 1.0, -1.5])
def test_jet_of_square(a):
    j = punctual_jet_estimate(SQ, 30, prefix_path(G, a, 30), 5, N=100_000, seed=3)
    assert abs(j.alpha - 1) <= 0.1
    assert abs(j.beta[0] / (2 * a) - 1) <= 0.1


def test_jet_window_validation():
    with pytest.raises(ValidationError):
        punctual_jet_estimate(SQ, 98, O, 5)


# tangency

def test_tangency_decreasing_is_immediate():
    ens = simulate_base(SIG, G, 2000, 1, seed=1)
    tp = tangency_point(library.time_functional(lambda t: -t, "neg"), 0.0, ens)
    assert tp.index == 0 and tp.gap == 0.0


def test_tangency_bump_matches_argmax():
    fn = lambda t: -((t - 0.5) ** 2) - t / 10  # noqa: E731
    ens = simulate_base(SIG, G, 2000, 1, seed=1)
    tp = tangency_point(library.time_functional(fn, "bump"), 0.0, ens)
    assert abs(tp.index - deterministic_argmax(fn, G.times)) <= 1
    assert abs(tp.time - 0.45) <= G.h


def test_tangency_supermartingale_is_immediate():
    ens = simulate_base(SIG, G20, 20_000, 1, seed=2)
    tp = tangency_point(-SQ, 0.0, ens)
    assert tp.index == 0


def test_tangency_certifies_itself():
    fn = lambda t: -((t - 0.5) ** 2) - t / 10  # noqa: E731
    u = library.time_functional(fn, "bump")
    ens = simulate_base(SIG, G, 500, 1, seed=1)
    tp = tangency_point(u, 0.0, ens)
    g = test_process_gap(u, TestJet(0, 0), 0.0, tp.index, tp.omega(ens), 10, "sub", N=2000, seed=1)
    assert g.member


def test_tangency_precondition_and_no_contact():
    ens = simulate_base(SIG, G20, 500, 1, seed=1)
    with pytest.raises(PreconditionError):
        tangency_point(library.time_functional(lambda t: t, "t"), 0.0, ens)
    # a martingale over one step: the precondition is inconclusive and, with a
    # positive sample drift, the envelope only meets u at the horizon
    ens3 = simulate_base(SIG, G20, 500, 1, seed=3)
    assert ens3.paths[:, 1, 0].mean() > 0
    with pytest.warns(UserWarning), pytest.raises(NoContactError):
        tangency_point(library.linear_payoff(role="candidate"), 0.0, ens3, FixedTime(1))


# comparison

def test_comparison_identical_and_shifted(base_small):
    u = library.sine_payoff(role="candidate")
    rep = comparison_experiment(u, u, base_small, points=5)
    assert rep.min_margin == 0.0 and rep.passed
    rep = comparison_experiment(u, u + 0.5, base_small, points=5)
    assert rep.min_margin == 0.5 and rep.max_margin == 0.5


def test_comparison_bsde_pair(base_small):
    drv = library.trig_driver()
    u = BsdeCandidate(drv, library.sine_payoff())
    v = BsdeCandidate(drv, library.sine_payoff() + 0.5)
    rep = comparison_experiment(u, v, base_small, points=20, seed=1)
    assert rep.passed and rep.min_margin > 0


def test_comparison_terminal_violation(base_small):
    u = library.sine_payoff(role="candidate")
    with pytest.raises(PreconditionError):
        comparison_experiment(u + 0.1, u, base_small)


def test_difference_mode(base_small):
    drv = library.trig_driver()
    u = BsdeCandidate(drv, library.sine_payoff())
    v = BsdeCandidate(drv, library.sine_payoff() + 0.5)
    rep = comparison_experiment(u, v, base_small, points=4, seed=2, L=0.8, window=3, jet_N=5000)
    diff = [c for c in rep.checks if c.name == "difference-residual"]
    assert len(diff) == 4 and all(c.verdict == "pass" for c in diff)


def test_report_serialisation(tmp_path, points):
    rep = martingale_property_test(SQ, "P-sub", points[:2], RULES[:1], N=500, seed=1)
    js = rep.write_json(tmp_path / "r.json").read_text()
    assert '"verdict": "pass"' in js
    rows = rep.write_csv(tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "name,path,index,margin,std_error,verdict" and len(rows) == 3
