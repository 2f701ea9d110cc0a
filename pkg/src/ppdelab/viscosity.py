"""Numerical checks of viscosity-solution properties on path space.

Everything here reduces to optimal stopping or conditional expectations on
conditional ensembles, so every verdict is a statistical one: a margin, its
standard error, and a tolerance of three standard errors (plus ``1e-6`` for
membership tests).
"""
from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bsde import (
    Estimate,
    _json_default,
    derived_seed,
    estimate_z,
    solve_bsde,
    value_functional,
)
from .errors import NoContactError, PreconditionError, ValidationError
from .paths import AdaptedFunctional, DiscretePath, PathEnsemble
from .sde import conditional_ensemble
from .snell import (
    FixedTime,
    SnellSolution,
    cross_fitted_value,
    materialise,
    snell_envelope,
    stopped_value,
)

MEMBER_ABS_TOL = 1e-6
MODES = ("P-sub", "P-super", "E-sub", "E-super")


@dataclass(frozen=True)
class TestJet:
    """Coefficients of the linear test process ``alpha t + beta . omega_t``."""

    __test__ = False  # keep pytest from collecting this class

    alpha: float
    beta: tuple = (0.0,)

    def __post_init__(self):
        beta = tuple(float(b) for b in np.atleast_1d(self.beta))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", beta)
        if not (np.isfinite(self.alpha) and np.all(np.isfinite(beta))):
            raise ValidationError("jet entries must be finite", field="jet")

    def __neg__(self) -> "TestJet":
        return TestJet(-self.alpha, tuple(-b for b in self.beta))

    def __add__(self, other: "TestJet") -> "TestJet":
        return TestJet(self.alpha + other.alpha, tuple(np.add(self.beta, other.beta)))

    def functional(self) -> AdaptedFunctional:
        a, b = self.alpha, np.asarray(self.beta)

        def fn(grid, i, w):
            return a * grid.t(i) + w[:, -1, :] @ b

        def proc(grid, paths):
            return a * grid.times[None, :] + paths @ b

        return AdaptedFunctional("candidate", fn, name=f"Q({a:g},{list(b)})", process=proc)


@dataclass(frozen=True, eq=False)
class SmoothTest:
    """A smooth test process with optional generator and path gradient."""

    __test__ = False

    value: AdaptedFunctional
    generator: AdaptedFunctional | None = None
    gradient: AdaptedFunctional | None = None

    def jet_at(self, i: int, omega: DiscretePath) -> TestJet:
        if self.generator is None or self.gradient is None:
            raise ValidationError("generator and gradient are needed for the classical jet")
        grad = np.asarray(self.gradient.fn(omega.grid, i, omega.stacked()[:, : i + 1]), dtype=float)
        beta = np.broadcast_to(grad.reshape(-1), (omega.d,))
        return TestJet(self.generator.on_path(i, omega), tuple(beta))


@dataclass(frozen=True)
class JetEstimate:
    alpha: float
    beta: tuple
    window: int
    alpha_dispersion: float
    beta_dispersion: float
    alpha_std_error: float
    beta_std_error: float

    def jet(self) -> TestJet:
        return TestJet(self.alpha, self.beta)


@dataclass(frozen=True)
class Check:
    name: str
    point: tuple  # (path label, time index)
    margin: float
    std_error: float
    verdict: str  # pass | fail | inconclusive
    detail: dict = field(default_factory=dict)


@dataclass
class ViscosityReport:
    name: str
    checks: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.verdict == "pass" for c in self.checks)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if c.verdict == "fail"]

    @property
    def min_margin(self) -> float:
        return float(min(c.margin for c in self.checks)) if self.checks else float("nan")

    @property
    def max_margin(self) -> float:
        return float(max(c.margin for c in self.checks)) if self.checks else float("nan")

    def summary(self) -> dict:
        verdicts = [c.verdict for c in self.checks]
        return {
            "name": self.name,
            "checks": len(self.checks),
            "passed": self.passed,
            "pass": verdicts.count("pass"),
            "fail": verdicts.count("fail"),
            "inconclusive": verdicts.count("inconclusive"),
            "min_margin": self.min_margin,
            "max_margin": self.max_margin,
            **self.meta,
        }

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "checks": [asdict(c) for c in self.checks]}

    def write_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default) + "\n")
        return path

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "path", "index", "margin", "std_error", "verdict"])
            for c in self.checks:
                w.writerow([c.name, c.point[0], c.point[1], repr(c.margin), repr(c.std_error), c.verdict])
        return path


def _verdict(ok: bool, se: float) -> str:
    if not np.isfinite(se):
        return "inconclusive"
    return "pass" if ok else "fail"


def sample_points(ens: PathEnsemble, count: int, seed: int = 0, interior: bool = True) -> list:
    """``count`` points ``(i, omega, label)`` drawn from an ensemble, sorted by index."""
    rng = np.random.default_rng(seed)
    lo, hi = (1, ens.n - 1) if interior else (0, ens.n)
    if hi < lo:
        raise ValidationError("grid too coarse for interior sample points")
    paths = rng.choice(ens.N, size=count, replace=count > ens.N)
    idx = rng.integers(lo, hi + 1, size=count)
    pts = [(int(i), ens.path(int(p)), int(p)) for p, i in zip(paths, idx)]
    return sorted(pts, key=lambda x: (x[0], x[2]))


def _psi_values(u: AdaptedFunctional, phi: AdaptedFunctional, ens: PathEnsemble) -> np.ndarray:
    return phi.along(ens.grid, ens.paths, ens.start) - u.along(ens.grid, ens.paths, ens.start)


@dataclass(frozen=True)
class GapResult:
    gap: float
    std_error: float
    tolerance: float
    member: bool
    side: str


def test_process_gap(
    u: AdaptedFunctional,
    test,
    L: float,
    i: int,
    omega: DiscretePath,
    steps: int,
    side: str = "sub",
    N: int = 20_000,
    seed: int = 0,
    basis=None,
    sigma: AdaptedFunctional | None = None,
    horizon=None,
) -> GapResult:
    """How far ``test - u`` is from attaining its optimal-stopping extremum at ``(i, omega)``.

    Sub side: ``min_tau E_lower[psi_tau] - psi_i`` with ``psi = test - u``,
    computed as ``-Snell_upper(-psi) - psi_i``.  Super side:
    ``psi_i - max_tau E_upper[psi_tau]``.  Both are ``<= 0`` since stopping
    at once is admissible; the test process is accepted iff the gap is within
    ``3 se + 1e-6`` of zero.
    """
    if side not in ("sub", "super"):
        raise ValidationError(f"side must be 'sub' or 'super', got {side!r}", field="side")
    if steps < 1:
        raise ValidationError("horizon steps must be >= 1", field="steps")
    from .library import identity_sigma

    sigma = sigma or identity_sigma()
    phi = test.functional() if isinstance(test, TestJet) else (test.value if isinstance(test, SmoothTest) else test)
    ens = conditional_ensemble(sigma, omega, i, N, seed)
    H = materialise(horizon if horizon is not None else FixedTime(steps), ens)
    psi = _psi_values(u, phi, ens)
    here = float(psi[0, i])
    if side == "sub":
        est = cross_fitted_value(-psi, L, ens, H, basis, sigma)
        gap = -est.value - here
    else:
        est = cross_fitted_value(psi, L, ens, H, basis, sigma)
        gap = here - est.value
    # stopping at once is admissible, so the gap is never positive
    gap = min(gap, 0.0)
    se = est.std_error
    tol = 3 * se + MEMBER_ABS_TOL
    return GapResult(float(gap), float(se), float(tol), bool(gap >= -tol), side)


test_process_gap.__test__ = False


def subsolution_residual(
    jet: TestJet,
    u_val: float,
    driver: AdaptedFunctional,
    sigma: AdaptedFunctional,
    i: int,
    omega: DiscretePath,
) -> float:
    """``-alpha - F(t_i, omega, u, sigma^T beta)``; subsolutions need it ``<= 0``."""
    s = np.asarray(sigma.on_path(i, omega))
    z = s.T @ np.asarray(jet.beta)
    return float(-jet.alpha - driver.on_path(i, omega, u_val, z))


def _margin_on(u, rule, L, mode, ens, basis, sigma) -> Estimate:
    tau = materialise(rule, ens)
    if mode.startswith("P"):
        vals = u.at(ens.grid, tau.index, ens.paths)
        return Estimate(ens.mean(vals), ens.std_error(vals))
    sol = stopped_value(u, tau, L, ens, basis, sigma, side="upper")
    return sol.estimate()


def martingale_property_test(
    u: AdaptedFunctional,
    mode: str,
    points: Sequence,
    rules: Sequence,
    N: int = 20_000,
    seed: int = 0,
    L: float = 0.0,
    basis=None,
    sigma: AdaptedFunctional | None = None,
    threads: int = 1,
) -> ViscosityReport:
    """Pathwise (sub/super)martingale check at sampled points and stopping rules.

    ``mode`` is one of ``P-sub``, ``P-super`` (plain conditional expectation)
    or ``E-sub``, ``E-super`` (upper expectation with bound ``L``).  Margins
    are ``E[u_tau] - u_i``; sub passes iff margin ``>= -3 se``, super iff
    ``<= 3 se``.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}", field="mode")
    from .library import identity_sigma

    sigma = sigma or identity_sigma()
    sub = mode.endswith("sub")

    def run(k):
        i, omega, label = _unpack(points[k], k)
        ens = conditional_ensemble(sigma, omega, i, N, derived_seed(seed, k))
        here = u.on_path(i, omega)
        out = []
        for r, rule in enumerate(rules):
            est = _margin_on(u, rule, L, mode, ens, basis, sigma)
            margin = est.value - here
            se = est.std_error
            ok = margin >= -3 * se if sub else margin <= 3 * se
            out.append(Check(f"{mode}:rule{r}", (label, i), float(margin), float(se), _verdict(ok, se)))
        return out

    checks = _ordered_map(run, range(len(points)), threads)
    return ViscosityReport(mode, [c for group in checks for c in group], {"L": L, "N": N, "seed": seed})


def _unpack(point, k):
    if len(point) == 3:
        return point
    i, omega = point
    return i, omega, k


def _ordered_map(fn, items, threads):
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _jet_from_process(ens: PathEnsemble, U: np.ndarray, i: int, window: int, Z=None, basis=None, sigma=None) -> JetEstimate:
    grid = ens.grid
    times = grid.times
    means = np.array([ens.mean(U[:, k]) for k in range(i, i + window + 1)])
    alpha = (means[-1] - means[0]) / (times[i + window] - times[i])
    alpha_steps = np.diff(means) / np.diff(times[i : i + window + 1])
    if Z is None:
        Z = np.stack([estimate_z(ens, k, U[:, k + 1], basis, sigma) for k in range(i, i + window)], axis=1)
    else:
        Z = Z[:, i : i + window]
    zbar = np.array([[ens.mean(Z[:, j, c]) for c in range(Z.shape[2])] for j in range(window)])
    beta = zbar.mean(axis=0)
    quotient = (U[:, i + window] - U[:, i]) / (times[i + window] - times[i])
    per_path_z = Z.mean(axis=1)
    beta_se = float(max(ens.std_error(per_path_z[:, c]) for c in range(per_path_z.shape[1])))
    return JetEstimate(
        alpha=float(alpha),
        beta=tuple(float(b) for b in beta),
        window=window,
        alpha_dispersion=float(np.std(alpha_steps)),
        beta_dispersion=float(np.max(np.std(zbar, axis=0))),
        alpha_std_error=float(ens.std_error(quotient)),
        beta_std_error=beta_se,
    )


def punctual_jet_estimate(
    u: AdaptedFunctional,
    i: int,
    omega: DiscretePath,
    window: int,
    N: int = 20_000,
    seed: int = 0,
    basis=None,
    sigma: AdaptedFunctional | None = None,
) -> JetEstimate:
    """Drift and gradient quotients of ``u`` over ``window`` steps after ``(i, omega)``.

    ``alpha`` is the mean increment of ``u`` divided by elapsed time, ``beta``
    the window average of the path-averaged representation integrand.  The
    dispersion fields are the spread of the one-step quotients; small values
    indicate the point behaves like a differentiability point.
    """
    from .library import identity_sigma

    if window < 1:
        raise ValidationError("window must be >= 1", field="window")
    if i + window > omega.grid.n:
        raise ValidationError(f"window exceeds grid: {i} + {window} > {omega.grid.n}", field="window")
    sigma = sigma or identity_sigma()
    ens = conditional_ensemble(sigma, omega, i, N, seed)
    U = u.along(ens.grid, ens.paths, i)
    return _jet_from_process(ens, U, i, window, basis=basis, sigma=sigma)


@dataclass(frozen=True, eq=False)
class TangencyPoint:
    path: int
    index: int
    time: float
    gap: float  # Snell value minus u at the point, >= 0
    precondition_margin: float
    precondition_std_error: float
    snell: SnellSolution = field(repr=False)

    def omega(self, ens: PathEnsemble) -> DiscretePath:
        return ens.path(self.path)


def tangency_point(
    u: AdaptedFunctional,
    L: float,
    ens: PathEnsemble,
    horizon=None,
    basis=None,
    sigma: AdaptedFunctional | None = None,
) -> TangencyPoint:
    """Point where the Snell envelope of ``u`` first touches ``u`` before the horizon.

    Requires ``u_0 > E_upper[u_H]``; a violation beyond three standard errors
    raises :class:`PreconditionError`, an inconclusive one only warns.
    """
    H = materialise(horizon, ens)
    pre = stopped_value(u, H, L, ens, basis, sigma)
    u0 = ens.mean(u.along(ens.grid, ens.paths, ens.start)[:, ens.start])
    margin = u0 - pre.y0
    se = pre.std_error
    if margin < -3 * se or (se == 0 and margin <= 0):
        raise PreconditionError(
            f"u at the start ({u0:.6g}) does not exceed the upper expectation at the horizon ({pre.y0:.6g})",
            field="u",
        )
    if margin <= 3 * se:
        warnings.warn(f"tangency precondition inconclusive: margin {margin:.3g} vs se {se:.3g}", stacklevel=2)
    s = snell_envelope(u, L, ens, H, basis, sigma)
    early = np.flatnonzero(s.tau.index < H.index)
    if early.size == 0:
        raise NoContactError("the Snell envelope touches u only at the horizon on every path")
    p = int(early[0])
    k = int(s.tau.index[p])
    return TangencyPoint(p, k, float(ens.grid.t(k)), float(s.Y[p, k] - s.X[p, k]), float(margin), float(se), s)


def submartingale_transform(u: AdaptedFunctional, L0: float, F0=None) -> AdaptedFunctional:
    """``u + int_0^t (L0 |u_s| + F0_s + 1) ds`` with a left-point rule on the grid.

    ``F0`` is the driver at ``y = 0, z = 0``: a driver functional, a constant or ``None``.
    """
    if not L0 >= 0:
        raise ValidationError("L0 must be >= 0", field="L0")

    def f0(grid, k, w):
        if F0 is None:
            return np.zeros(w.shape[0])
        if isinstance(F0, AdaptedFunctional):
            N, d = w.shape[0], w.shape[2]
            return F0(grid, k, w, np.zeros(N), np.zeros((N, d)))
        return np.full(w.shape[0], float(F0))

    def fn(grid, i, w):
        acc = np.zeros(w.shape[0])
        for k in range(i):
            uk = u(grid, k, w)
            acc = acc + grid.h * (L0 * np.abs(uk) + f0(grid, k, w) + 1.0)
        return u(grid, i, w) + acc

    def proc(grid, paths):
        U = u.along(grid, paths)
        rate = L0 * np.abs(U[:, :-1]) + np.stack([f0(grid, k, paths) for k in range(grid.n)], axis=1) + 1.0
        out = U.copy()
        acc = np.zeros(paths.shape[0])
        for k in range(grid.n):
            acc = acc + grid.h * rate[:, k]
            out[:, k + 1] += acc
        return out

    return AdaptedFunctional("candidate", fn, name=f"hat({u.name})", process=proc)


def value_candidate(
    sigma: AdaptedFunctional,
    driver: AdaptedFunctional,
    terminal: AdaptedFunctional,
    N: int,
    seed: int = 0,
    basis=None,
) -> AdaptedFunctional:
    """The candidate ``u(t_i, omega)`` computed by a fresh BSDE solve per path.

    Costs one conditional solve per evaluated path; meant for small checks.
    The inner seed depends only on ``(seed, i)``.
    """

    # the value is a pure function of the prefix, and conditional ensembles
    # share long prefixes, so solves are memoised on the prefix bytes
    memo: dict = {}

    def fn(grid, i, w):
        out = np.empty(w.shape[0])
        for p in range(w.shape[0]):
            key = (grid.n, grid.T, i, w[p].tobytes())
            if key not in memo:
                path = np.empty((grid.n + 1, w.shape[2]))
                path[: i + 1] = w[p]
                path[i + 1 :] = w[p, -1]
                memo[key] = value_functional(
                    sigma, driver, terminal, i, DiscretePath(grid, path), N, derived_seed(seed, i), basis
                ).value
            out[p] = memo[key]
        return out

    return AdaptedFunctional("candidate", fn, name=f"value({terminal.name})")


@dataclass(frozen=True, eq=False)
class BsdeCandidate:
    """A candidate given by a BSDE (driver, terminal) solved on a shared ensemble."""

    driver: AdaptedFunctional
    terminal: AdaptedFunctional
    name: str = ""

    def solve(self, ens, sigma=None, basis=None):
        return solve_bsde(sigma, self.driver, self.terminal, ens, basis)


def _side_values(c, ens, sigma, basis):
    """Values, per-index standard errors, Z (or None), terminal values."""
    if isinstance(c, BsdeCandidate):
        sol = c.solve(ens, sigma, basis)
        return sol.Y, sol.std_errors, sol.Z
    if isinstance(c, AdaptedFunctional):
        U = c.along(ens.grid, ens.paths, ens.start)
        return U, np.zeros(ens.n + 1), None
    raise ValidationError("candidates must be functionals or BsdeCandidate instances")


def comparison_experiment(
    u,
    v,
    ens: PathEnsemble,
    sigma: AdaptedFunctional | None = None,
    points: int = 20,
    seed: int = 0,
    times: Sequence[int] | None = None,
    basis=None,
    L: float | None = None,
    window: int | None = None,
    jet_N: int = 20_000,
) -> ViscosityReport:
    """Check ``u <= v`` at sampled paths and grid times, given ``u_T <= v_T``.

    ``u`` and ``v`` are closed-form candidates or :class:`BsdeCandidate`
    instances solved on ``ens``.  With ``L`` and ``window`` set, the
    difference ``w = u - v`` is also tested as a subsolution of
    ``-Lw - L|w| - L|sigma^T dw| <= 0`` through punctual jet estimates.
    """
    from .library import identity_sigma

    sigma = sigma or identity_sigma()
    U, se_u, Zu = _side_values(u, ens, sigma, basis)
    V, se_v, Zv = _side_values(v, ens, sigma, basis)
    n = ens.n
    bad = U[:, n] > V[:, n]
    if np.any(bad):
        p = int(np.argmax(bad))
        raise PreconditionError(
            f"terminal ordering violated on path {p}: u_T = {U[p, n]:.6g} > v_T = {V[p, n]:.6g}", field="terminal"
        )
    mode = "-".join(type(c).__name__ for c in (u, v))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(ens.N, size=min(points, ens.N), replace=False))
    times = list(range(ens.start, n + 1)) if times is None else list(times)
    checks = []
    known = _known_offset(u, v)
    for p in chosen:
        for k in times:
            margin = float(V[p, k] - U[p, k]) if known is None else known
            se = float(np.hypot(se_u[k], se_v[k]))
            checks.append(Check("order", (int(p), int(k)), margin, se, _verdict(margin >= -3 * se, se)))
    report = ViscosityReport("comparison", checks, {"mode": mode, "points": int(len(chosen)), "seed": seed})
    if L is not None and window is not None:
        report.checks.extend(_difference_checks(u, v, ens, sigma, chosen, L, window, jet_N, seed, basis))
    return report


def _known_offset(u, v) -> float | None:
    """``c`` when ``v`` was built as ``u + c`` (or ``u`` as ``v - c``), so the margin is exact."""
    if not (isinstance(u, AdaptedFunctional) and isinstance(v, AdaptedFunctional)):
        return None
    if v is u:
        return 0.0
    if v.offset_of is not None and v.offset_of[0] is u:
        return float(v.offset_of[1])
    if u.offset_of is not None and u.offset_of[0] is v:
        return -float(u.offset_of[1])
    return None


def _difference_checks(u, v, ens, sigma, chosen, L, window, N, seed, basis):
    """Residual ``-alpha_w - L|w| - L|sigma^T beta_w|`` at interior points of the chosen paths."""
    out = []
    rng = np.random.default_rng(derived_seed(seed, 7))
    for j, p in enumerate(chosen):
        i = int(rng.integers(ens.start, ens.n - window + 1))
        omega = ens.path(int(p))
        cens = conditional_ensemble(sigma, omega, i, N, derived_seed(seed, 8, j))
        U, _, Zu = _side_values(u, cens, sigma, basis)
        V, _, Zv = _side_values(v, cens, sigma, basis)
        W = U - V
        Zw = None if Zu is None or Zv is None else Zu - Zv
        jet = _jet_from_process(cens, W, i, window, Z=Zw, basis=basis, sigma=sigma)
        w_here = float(cens.mean(W[:, i]))
        s = np.asarray(sigma.on_path(i, omega))
        resid = -jet.alpha - L * abs(w_here) - L * float(np.linalg.norm(s.T @ np.asarray(jet.beta)))
        se = jet.alpha_std_error + L * jet.beta_std_error
        out.append(
            Check(
                "difference-residual",
                (int(p), i),
                float(-resid),
                float(se),
                _verdict(resid <= 3 * se + MEMBER_ABS_TOL, se),
                {"residual": float(resid), "alpha": jet.alpha, "beta": list(jet.beta), "dispersion": jet.alpha_dispersion},
            )
        )
    return out


__all__ = [
    "TestJet",
    "SmoothTest",
    "JetEstimate",
    "Check",
    "ViscosityReport",
    "GapResult",
    "TangencyPoint",
    "BsdeCandidate",
    "sample_points",
    "test_process_gap",
    "subsolution_residual",
    "martingale_property_test",
    "punctual_jet_estimate",
    "tangency_point",
    "submartingale_transform",
    "value_candidate",
    "comparison_experiment",
]
