"""Optimal stopping under the upper expectation via reflected backward induction.

Lower barrier (Snell envelope of an obstacle ``X``)::

    Y_H = X_H,   Y_i = max(X_i, C_i + h L |sigma^T Z_i|)

Upper barrier (the value of ``inf_tau E_L[u_tau]`` seen from ``-u``)::

    Y_H = u_H,   Y_i = min(u_i, C_i + h L |sigma^T Z_i|)

Reflection increments are the amount the barrier pushed the continuation, so
barrier respect and the Skorokhod condition hold exactly.  A binary-tree
oracle (one-step sup over drifts plus brute-force enumeration of stopping
rules) checks the regression scheme at small depth.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bsde import (
    CONTACT_TOL,
    BsdeSolution,
    Estimate,
    _identity_sigma,
    _sigma_t_z,
    abs_driver,
    backward_induction,
    nonlinear_expectation,
    terminal_values,
)
from .errors import AdaptednessError, ValidationError
from .paths import AdaptedFunctional, PathEnsemble, TimeGrid
from .sde import tree_ensemble


@dataclass(frozen=True, eq=False)
class StoppingRule:
    """Per-path stopping index on a specific ensemble."""

    index: np.ndarray
    name: str = ""

    def __post_init__(self):
        idx = np.asarray(self.index)
        if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
            raise ValidationError("stopping indices must be a 1-D integer array", field="index")
        idx = idx.copy()
        idx.setflags(write=False)
        object.__setattr__(self, "index", idx)

    def __len__(self):
        return self.index.shape[0]

    @property
    def mean(self) -> float:
        return float(self.index.mean())

    def minimum(self, other: "StoppingRule") -> "StoppingRule":
        return StoppingRule(np.minimum(self.index, other.index), f"min({self.name},{other.name})")


@dataclass(frozen=True)
class FixedTime:
    """Stop ``steps`` grid steps after the start (capped at the horizon)."""

    steps: int

    def rule(self, ens: PathEnsemble, start: int | None = None) -> StoppingRule:
        start = ens.start if start is None else start
        return StoppingRule(np.full(ens.N, min(start + int(self.steps), ens.n)), f"fixed({self.steps})")


@dataclass(frozen=True)
class LocalizingTime:
    """``min(start + steps, first exit of the path increment from a ball of radius)``."""

    steps: int
    radius: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("localizing step count must be >= 1", field="steps")
        if not self.radius > 0:
            raise ValidationError("localizing radius must be > 0", field="radius")

    @classmethod
    def default(cls, grid: TimeGrid) -> "LocalizingTime":
        return cls(max(1, grid.n // 10), 1.0)

    def rule(self, ens: PathEnsemble, start: int | None = None) -> StoppingRule:
        start = ens.start if start is None else start
        cap = min(start + int(self.steps), ens.n)
        moved = np.linalg.norm(ens.paths[:, start : cap + 1] - ens.paths[:, start : start + 1], axis=2)
        out = moved >= self.radius
        out[:, 0] = False
        first = np.where(out.any(axis=1), out.argmax(axis=1), cap - start)
        return StoppingRule(start + first, f"loc({self.steps},{self.radius:g})")


@dataclass(frozen=True)
class FirstEntry:
    """First index ``>= start`` at which ``level_fn >= level``; horizon otherwise."""

    functional: AdaptedFunctional
    level: float = 0.0

    def rule(self, ens: PathEnsemble, start: int | None = None) -> StoppingRule:
        start = ens.start if start is None else start
        vals = self.functional.along(ens.grid, ens.paths, start)[:, start:]
        hit = vals >= self.level
        first = np.where(hit.any(axis=1), hit.argmax(axis=1), ens.n - start)
        return StoppingRule(start + first, f"entry({self.functional.name}>={self.level:g})")


def materialise(rule, ens: PathEnsemble) -> StoppingRule:
    """Accept a StoppingRule, a rule factory, an int index or ``None`` (horizon)."""
    if rule is None:
        return StoppingRule(np.full(ens.N, ens.n), "horizon")
    if isinstance(rule, StoppingRule):
        if len(rule) != ens.N:
            raise ValidationError("stopping rule length does not match the ensemble")
        return rule
    if isinstance(rule, (int, np.integer)):
        return StoppingRule(np.full(ens.N, int(rule)), f"at({int(rule)})")
    return rule.rule(ens)


def probe_rule_adaptedness(factory, ens: PathEnsemble, trials: int = 4, seed: int = 0) -> None:
    """Rewrite each path after a random index and check earlier stop decisions are unchanged."""
    rng = np.random.default_rng(seed)
    base = factory.rule(ens).index
    for _ in range(trials):
        k = int(rng.integers(ens.start, ens.n))
        paths = ens.paths.copy()
        noise = rng.normal(scale=np.sqrt(ens.grid.h), size=(ens.N, ens.n - k, ens.d))
        paths[:, k + 1 :] = paths[:, k : k + 1] + np.cumsum(noise, axis=1)
        other = PathEnsemble(ens.grid, paths, ens.weights, tag=ens.tag, start=ens.start)
        alt = factory.rule(other).index
        early = base <= k
        if not np.array_equal(early, alt <= k) or not np.array_equal(base[early], alt[early]):
            raise AdaptednessError(f"stopping decision at or before index {k} depends on later values")


@dataclass(frozen=True, eq=False)
class SnellSolution:
    Y: np.ndarray  # (N, n+1)
    K: np.ndarray  # (N, n) reflection increments, >= 0
    X: np.ndarray  # (N, n+1) barrier values
    tau: StoppingRule
    horizon: StoppingRule
    value: float  # policy estimate of the value of tau*
    std_error: float
    side: str
    L: float
    bsde: BsdeSolution = field(repr=False)
    contact_tol: float = CONTACT_TOL

    @property
    def envelope_value(self) -> float:
        """Regression envelope at the start (biased towards the barrier's side)."""
        return self.bsde.y0

    @property
    def grid(self) -> TimeGrid:
        return self.bsde.grid

    @property
    def start(self) -> int:
        return self.bsde.start

    @property
    def Z(self) -> np.ndarray:
        return self.bsde.Z

    def estimate(self) -> Estimate:
        return Estimate(self.value, self.std_error)

    def k_modulus(self) -> float:
        """Largest empirical reflection rate ``dK / h``."""
        return float(np.max(self.K[:, self.start :], initial=0.0) / self.grid.h)

    def summary(self, **extra) -> dict:
        out = {
            "V0": self.value,
            "std_error": self.std_error,
            "envelope_V0": self.envelope_value,
            "mean_tau": self.tau.mean,
            "mean_tau_time": self.tau.mean * self.grid.h,
            "seed": self.bsde.seed,
            "N": self.bsde.N,
            "n": self.grid.n,
            "T": self.grid.T,
            "L": self.L,
            "side": self.side,
            "max_dK_over_h": self.k_modulus(),
        }
        out.update(extra)
        return out

    def write_csv(self, path, max_paths: int | None = None) -> Path:
        """Rows ``path, index, t, Y, X, dK, stopped``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        N = self.Y.shape[0] if max_paths is None else min(self.Y.shape[0], max_paths)
        n = self.grid.n
        times = self.grid.times
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "index", "t", "Y", "X", "dK", "stopped"])
            for p in range(N):
                for k in range(self.start, n + 1):
                    dk = repr(float(self.K[p, k])) if k < n else ""
                    w.writerow(
                        [p, k, repr(float(times[k])), repr(float(self.Y[p, k])), repr(float(self.X[p, k])), dk, int(k >= self.tau.index[p])]
                    )
        return path


def _barrier(obstacle, ens: PathEnsemble) -> np.ndarray:
    if isinstance(obstacle, AdaptedFunctional):
        X = obstacle.along(ens.grid, ens.paths, ens.start)
    else:
        X = np.array(np.broadcast_to(np.asarray(obstacle, dtype=float), (ens.N, ens.n + 1)))
    if not np.all(np.isfinite(X[:, ens.start :])):
        p = int(np.argmax(~np.all(np.isfinite(X[:, ens.start :]), axis=1)))
        from .errors import NumericalError

        raise NumericalError(f"non-finite obstacle on path {p}", path_index=p)
    return X


def _start_value(X: np.ndarray, ens: PathEnsemble) -> float:
    """Mean obstacle at the start; exact when every path shares the start point."""
    x = X[:, ens.start]
    return float(x[0]) if np.all(x == x[0]) else ens.mean(x)


def _reflected(obstacle, L, ens, horizon, basis, sigma, side, contact_tol) -> SnellSolution:
    if not L >= 0:
        raise ValidationError(f"L must be >= 0, got {L}", field="L")
    H = materialise(horizon, ens)
    if np.any(H.index < ens.start) or np.any(H.index > ens.n):
        raise ValidationError("horizon rule leaves the grid")
    X = _barrier(obstacle, ens)
    xi = X[np.arange(ens.N), H.index]
    sol = backward_induction(
        ens, abs_driver(L), xi, H.index, basis, sigma, barrier=X, side=side, contact_tol=contact_tol
    )
    tau = optimal_stopping_rule(sol.Y, X, H, ens.start, contact_tol, side)
    # Policy value of tau* from the pathwise sums; the envelope at the start
    # carries the upward bias of max() over noisy continuations.  Stopping
    # at once stays admissible, hence the clip at the start value.
    here = _start_value(X, ens)
    policy = ens.mean(sol.pathwise)
    value = max(here, policy) if side == "lower" else min(here, policy)
    return SnellSolution(
        Y=sol.Y,
        K=sol.K,
        X=X,
        tau=tau,
        horizon=H,
        value=float(value),
        std_error=sol.std_error,
        side=side,
        L=float(L),
        bsde=sol,
        contact_tol=contact_tol,
    )


def _replayed_rule(record, test, X, H, L, sigma, tol, side) -> StoppingRule:
    """Stopping rule on ``test`` paths from continuation fits trained elsewhere."""
    grid, h = test.grid, test.grid.h
    idx = H.index.copy()
    open_ = np.ones(test.N, dtype=bool)
    for k in range(test.start, grid.n):
        live = open_ & (k < H.index)
        if not np.any(live):
            break
        if k not in record:
            idx[live] = k
            break
        proj, fit, zfit = record[k]
        C = proj.predict(fit, test)
        zw = proj.predict(zfit, test).reshape(test.N, test.d)
        _, SZ = _sigma_t_z(sigma(grid, k, test.paths), zw)
        cont = C + h * L * np.linalg.norm(SZ, axis=1)
        stop = X[:, k] >= cont - tol if side == "lower" else X[:, k] <= cont + tol
        hit = live & stop
        idx[hit] = k
        open_ &= ~hit
    return StoppingRule(idx, "cross-fitted")


def cross_fitted_value(
    obstacle,
    L: float,
    ens: PathEnsemble,
    horizon=None,
    basis=None,
    sigma: AdaptedFunctional | None = None,
    side: str = "lower",
    contact_tol: float = CONTACT_TOL,
) -> Estimate:
    """Out-of-sample value of the regression stopping policy.

    The paths are split in two halves; the continuation fitted on one half
    drives the stopping decisions on the other, whose stopped obstacle is then
    valued independently.  The two folds are averaged.  Free of the look-ahead
    bias of the in-sample policy, so a lower (upper) side estimate is biased
    low (high) only through the policy being suboptimal.
    """
    if ens.N < 4:
        raise ValidationError("cross-fitting needs at least 4 paths", field="N")
    sigma = sigma or _identity_sigma(ens.d)
    halves = (np.arange(0, ens.N, 2), np.arange(1, ens.N, 2))
    X_all = _barrier(obstacle, ens)
    H_all = materialise(horizon, ens)
    values, ses = [], []
    for train_idx, test_idx in (halves, halves[::-1]):
        train, test = ens.subset(train_idx), ens.subset(test_idx)
        Xtr, Htr = X_all[train_idx], H_all.index[train_idx]
        record: dict = {}
        backward_induction(
            train, abs_driver(L), Xtr[np.arange(train.N), Htr], Htr, basis, sigma,
            barrier=Xtr, side=side, contact_tol=contact_tol, record=record,
        )
        Xte = X_all[test_idx]
        Hte = StoppingRule(H_all.index[test_idx], H_all.name)
        tau = _replayed_rule(record, test, Xte, Hte, L, sigma, contact_tol, side)
        sol = stopped_value(Xte, tau, L, test, basis, sigma, side="upper")
        values.append(sol.y0)
        ses.append(sol.std_error)
    here = _start_value(X_all, ens)
    value = float(np.mean(values))
    value = max(here, value) if side == "lower" else min(here, value)
    return Estimate(value, float(np.hypot(*ses) / 2))


def snell_envelope(
    obstacle,
    L: float,
    ens: PathEnsemble,
    horizon=None,
    basis=None,
    sigma: AdaptedFunctional | None = None,
    contact_tol: float = CONTACT_TOL,
) -> SnellSolution:
    """Snell envelope of ``obstacle`` under the upper expectation with bound ``L``.

    ``horizon`` is a stopping rule (or factory / fixed index); the envelope is
    frozen at the obstacle from the per-path horizon on.
    """
    return _reflected(obstacle, L, ens, horizon, basis, sigma, "lower", contact_tol)


def upper_snell_envelope(
    candidate,
    L: float,
    ens: PathEnsemble,
    horizon=None,
    basis=None,
    sigma: AdaptedFunctional | None = None,
    contact_tol: float = CONTACT_TOL,
) -> SnellSolution:
    """Largest process below ``candidate`` that is an upper-expectation martingale off contact."""
    return _reflected(candidate, L, ens, horizon, basis, sigma, "upper", contact_tol)


def optimal_stopping_rule(
    Y: np.ndarray,
    X: np.ndarray,
    horizon: StoppingRule,
    start: int = 0,
    tol: float = CONTACT_TOL,
    side: str = "lower",
) -> StoppingRule:
    """First index from ``start`` where the envelope touches the barrier, capped at the horizon."""
    gap = Y - X if side == "lower" else X - Y
    n = Y.shape[1] - 1
    k = np.arange(n + 1)
    touch = (gap <= tol) & (k >= start) & (k <= horizon.index[:, None])
    touch[np.arange(Y.shape[0]), horizon.index] = True
    return StoppingRule(touch.argmax(axis=1), "first-contact")


def stopped_value(
    obstacle,
    rule,
    L: float,
    ens: PathEnsemble,
    basis=None,
    sigma: AdaptedFunctional | None = None,
    side: str = "upper",
) -> BsdeSolution:
    """Nonlinear expectation of ``obstacle`` stopped at ``rule``."""
    rule = materialise(rule, ens)
    if isinstance(obstacle, AdaptedFunctional):
        vals = terminal_values(obstacle, ens, rule.index)
    else:
        vals = np.asarray(obstacle)[np.arange(ens.N), rule.index]
    return nonlinear_expectation(vals, L, ens, side, sigma, basis, stop=rule.index)


def optimal_drift(sigma_z: np.ndarray, L: float) -> np.ndarray:
    """Drift attaining ``sup_|lambda|<=L lambda . sigma^T Z``; zero where ``sigma^T Z = 0``."""
    norm = np.linalg.norm(sigma_z, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norm > 0, L * sigma_z / np.where(norm > 0, norm, 1.0), 0.0)


@dataclass(frozen=True, eq=False)
class TreeResult:
    value: float
    values: list  # per level, node values
    stop: list  # per level, boolean stop decision of the induction
    enumerated: float | None = None
    best_rule: np.ndarray | None = None  # stop flags over interior nodes, level-major


def _tree_obstacle(obstacle: AdaptedFunctional, depth: int, h: float) -> tuple[TimeGrid, list]:
    grid = TimeGrid(depth * h, depth)
    ens = tree_ensemble(grid)
    full = obstacle.along(grid, ens.paths)
    # node j at level k is the block of paths j * 2^(m-k) .. (j+1) * 2^(m-k) - 1
    levels = [full[:: 2 ** (depth - k), k].copy() for k in range(depth + 1)]
    return grid, levels


def _one_step(up, down, L, h):
    return 0.5 * (up + down) + L * np.sqrt(h) * np.abs(up - down) / 2


def brute_force_snell_tree(
    obstacle: AdaptedFunctional, L: float, depth: int, h: float, enumerate_rules: bool | None = None
) -> TreeResult:
    """Exact Snell value on the ``+-sqrt(h)`` binary tree.

    Backward induction uses the exact one-step sup over drifts; for depth
    ``<= 4`` every stop/continue assignment on interior nodes is also
    enumerated and the best value reported.
    """
    if not 1 <= depth <= 12:
        raise ValidationError("tree depth must be in 1..12", field="depth")
    if not L >= 0:
        raise ValidationError(f"L must be >= 0, got {L}", field="L")
    if enumerate_rules is None:
        enumerate_rules = depth <= 4
    if enumerate_rules and depth > 4:
        raise ValidationError("exhaustive enumeration is limited to depth 4", field="depth")
    _, X = _tree_obstacle(obstacle, depth, h)
    V = [None] * (depth + 1)
    stop = [None] * (depth + 1)
    V[depth] = X[depth]
    stop[depth] = np.ones_like(X[depth], dtype=bool)
    for k in range(depth - 1, -1, -1):
        cont = _one_step(V[k + 1][1::2], V[k + 1][0::2], L, h)
        V[k] = np.maximum(X[k], cont)
        stop[k] = X[k] >= cont
    result = TreeResult(float(V[0][0]), V, stop)
    if not enumerate_rules:
        return result
    value, best = _enumerate(X, L, h, depth)
    return TreeResult(result.value, V, stop, value, best)


def _enumerate(X: list, L: float, h: float, depth: int):
    interior = 2**depth - 1
    R = 2**interior
    bits = ((np.arange(R)[:, None] >> np.arange(interior)[None, :]) & 1).astype(bool)
    W = np.broadcast_to(X[depth], (R, X[depth].shape[0]))
    for k in range(depth - 1, -1, -1):
        lo = 2**k - 1
        flags = bits[:, lo : lo + 2**k]
        cont = _one_step(W[:, 1::2], W[:, 0::2], L, h)
        W = np.where(flags, X[k][None, :], cont)
    values = W[:, 0]
    r = int(np.argmax(values))
    return float(values[r]), bits[r]


def tree_monte_carlo(obstacle: AdaptedFunctional, L: float, depth: int, h: float) -> SnellSolution:
    """Run :func:`snell_envelope` on the enumerated tree with exact conditional means."""
    grid = TimeGrid(depth * h, depth)
    return snell_envelope(obstacle, L, tree_ensemble(grid))
