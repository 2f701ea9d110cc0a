"""Backward least-squares Monte Carlo for path-dependent BSDEs.

The scheme on an ensemble with driving increments ``dW`` is::

    Y_n   = xi
    C_i   = E[Y_{i+1} | F_i]                       (regression)
    s_i   = E[(Y_{i+1} - C_i) dW_i | F_i] / h      (= sigma^T Z_i)
    Y_i   = C_i + h F(t_i, omega, C_i, s_i)

``Z_i`` itself is recovered as ``pinv(sigma^T) s_i`` so that degenerate
``sigma`` gives ``Z = 0`` instead of a division by zero.  Subtracting ``C_i``
before multiplying by ``dW_i`` does not change the conditional mean (``C_i``
is ``F_i``-measurable) but removes most of the variance of the Z regression.

The same loop, with a per-step ``max``/``min`` against a barrier, gives the
reflected equations used by :mod:`ppdelab.snell`.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import NumericalError, ValidationError
from .paths import AdaptedFunctional, DiscretePath, PathEnsemble, TimeGrid
from .regression import ExactConditioner, RegressionBasis
from .sde import conditional_ensemble

CONTACT_TOL = 1e-9


class Estimate(NamedTuple):
    value: float
    std_error: float


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    grid: TimeGrid
    Y: np.ndarray  # (N, n+1); NaN before ``start``
    Z: np.ndarray  # (N, n, d)
    sigma_z: np.ndarray  # (N, n, d), sigma^T Z as fed to the driver
    residuals: np.ndarray  # (n,) regression residual norm of the Y regression
    std_errors: np.ndarray  # (n+1,)
    start: int
    stop: np.ndarray  # (N,) per-path terminal index
    weights: np.ndarray
    seed: int | None = None
    K: np.ndarray | None = None  # (N, n) reflection increments
    meta: dict = field(default_factory=dict)
    pathwise: np.ndarray | None = None  # (N,) value at the first contact (or terminal) plus h * sum F

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def y0(self) -> float:
        col = self.Y[:, self.start]
        if np.all(col == col[0]):
            return float(col[0])
        return float(np.dot(self.weights, col) / self.weights.sum())

    @property
    def std_error(self) -> float:
        return float(self.std_errors[self.start])

    def estimate(self) -> Estimate:
        return Estimate(self.y0, self.std_error)

    def summary(self, **extra) -> dict:
        out = {
            "Y0": self.y0,
            "std_error": self.std_error,
            "N": self.N,
            "n": self.grid.n,
            "T": self.grid.T,
            "start": self.start,
            "seed": self.seed,
        }
        out.update(self.meta)
        out.update(extra)
        return out


def abs_driver(L: float) -> AdaptedFunctional:
    """``F(z) = L |z|`` with ``z = sigma^T Z``: generator of the upper expectation."""
    L = float(L)
    return AdaptedFunctional(
        "driver", lambda grid, i, w, y, z: L * np.linalg.norm(z, axis=1), name=f"abs({L:g})"
    )


ZERO_DRIVER = AdaptedFunctional("driver", lambda grid, i, w, y, z: np.zeros_like(y), name="zero")


def _identity_sigma(d: int) -> AdaptedFunctional:
    return AdaptedFunctional("sigma", lambda grid, i, w: np.eye(d), name="identity")


def _sigma_t_z(s: np.ndarray, zw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map the noise-integrand ``zw`` to ``(Z, sigma^T Z)`` via ``pinv(sigma^T)``."""
    if s.strides[0] == 0:
        s0 = s[0]
        P = np.linalg.pinv(s0.T)
        Z = zw @ P.T
        return Z, Z @ s0
    P = np.linalg.pinv(np.transpose(s, (0, 2, 1)))
    Z = np.einsum("nij,nj->ni", P, zw)
    return Z, np.einsum("nji,nj->ni", s, Z)


def _z_step(ens, k, target, C, proj, s):
    if ens.increments is None:
        raise ValidationError("ensemble carries no driving increments; Z is not identifiable")
    h = ens.grid.h
    zt = ((target - C) / h)[:, None] * ens.increments[:, k]
    fit = proj.fit(zt)
    zw = np.asarray(fit.prediction).reshape(ens.N, ens.d)
    return (*_sigma_t_z(s, zw), fit)


def _default_basis(ens, basis):
    if basis is not None:
        return basis
    return ExactConditioner() if ens.tag == "tree" else RegressionBasis()


def estimate_z(
    ens: PathEnsemble,
    i: int,
    targets,
    basis=None,
    sigma: AdaptedFunctional | None = None,
) -> np.ndarray:
    """Regression estimate of the representation integrand ``Z_i`` of ``targets`` (= Y_{i+1})."""
    basis = _default_basis(ens, basis)
    sigma = sigma or _identity_sigma(ens.d)
    target = np.asarray(targets, dtype=float)
    proj = basis.prepare(ens, i)
    C = proj.fit(target).prediction
    Z, _, _ = _z_step(ens, i, target, C, proj, sigma(ens.grid, i, ens.paths))
    return Z


def terminal_values(terminal, ens: PathEnsemble, stop: np.ndarray) -> np.ndarray:
    if isinstance(terminal, AdaptedFunctional):
        vals = terminal.at(ens.grid, stop, ens.paths)
    else:
        vals = np.array(np.broadcast_to(np.asarray(terminal, dtype=float), (ens.N,)))
    if not np.all(np.isfinite(vals)):
        p = int(np.argmax(~np.isfinite(vals)))
        raise NumericalError(f"non-finite terminal value on path {p}", path_index=p)
    return vals


def _resolve_stop(ens: PathEnsemble, end=None, stop=None) -> np.ndarray:
    n = ens.grid.n
    if stop is not None:
        s = np.asarray(getattr(stop, "index", stop), dtype=int)
        s = np.broadcast_to(s, (ens.N,)).copy()
    else:
        s = np.full(ens.N, n if end is None else int(end))
    if np.any(s < ens.start) or np.any(s > n):
        raise ValidationError(f"terminal indices must lie in {ens.start}..{n}")
    return s


def backward_induction(
    ens: PathEnsemble,
    driver: AdaptedFunctional,
    terminal: np.ndarray,
    stop: np.ndarray,
    basis=None,
    sigma: AdaptedFunctional | None = None,
    barrier: np.ndarray | None = None,
    side: str | None = None,
    contact_tol: float = CONTACT_TOL,
    record: dict | None = None,
) -> BsdeSolution:
    """Shared backward loop for plain, lower-reflected and upper-reflected equations.

    ``terminal[p]`` is the value at ``stop[p]``; paths are frozen after their
    stop index.  ``barrier`` is an ``(N, n+1)`` array, used with ``side`` in
    ``{"lower", "upper"}``.  If ``record`` is a dict it receives, per step,
    the projection and the fits of the continuation and of ``Z`` so they can
    be replayed on other paths.
    """
    basis = _default_basis(ens, basis)
    sigma = sigma or _identity_sigma(ens.d)
    grid = ens.grid
    n, h, N, d, start = grid.n, grid.h, ens.N, ens.d, ens.start
    if side not in (None, "lower", "upper"):
        raise ValidationError(f"unknown barrier side {side!r}")

    Y = np.full((N, n + 1), np.nan)
    Y[:, start:] = terminal[:, None]
    Z = np.zeros((N, n, d))
    SZ = np.zeros((N, n, d))
    K = np.zeros((N, n)) if side else None
    residuals = np.zeros(n)
    std_errors = np.full(n + 1, np.nan)
    # pathwise representation R_k = Y at the next contact (or terminal) + sum h F
    acc = terminal.astype(float).copy()
    stop_all = bool(np.all(stop == n))
    std_errors[n] = ens.std_error(acc - Y[:, n])

    for k in range(n - 1, start - 1, -1):
        active = stop > k
        if not np.any(active):
            std_errors[k] = ens.std_error(acc - Y[:, k])
            continue
        target = Y[:, k + 1]
        proj = basis.prepare(ens, k, None if stop_all else active)
        fit = proj.fit(target)
        C = np.asarray(fit.prediction)
        residuals[k] = fit.residual_norm
        s = sigma(grid, k, ens.paths)
        Zk, SZk, zfit = _z_step(ens, k, target, C, proj, s)
        if record is not None:
            record[k] = (proj, fit, zfit)
        with np.errstate(over="ignore", invalid="ignore"):
            # non-finite output is reported with its location just below
            F = np.asarray(driver(grid, k, ens.paths, C, SZk), dtype=float)
        if not np.all(np.isfinite(F[active])):
            p = int(np.argmax(~np.isfinite(F) & active))
            raise NumericalError(f"non-finite driver on path {p} at step {k}", path_index=p, step=k)
        cont = C + h * F
        if side == "lower":
            new = np.maximum(barrier[:, k], cont)
            dK = new - cont
            contact = new - barrier[:, k] <= contact_tol
        elif side == "upper":
            new = np.minimum(barrier[:, k], cont)
            dK = cont - new
            contact = barrier[:, k] - new <= contact_tol
        else:
            new = cont
            contact = np.zeros(N, dtype=bool)
        Y[:, k] = np.where(active, new, Y[:, k + 1])
        Z[:, k] = np.where(active[:, None], Zk, 0.0)
        SZ[:, k] = np.where(active[:, None], SZk, 0.0)
        if side:
            K[:, k] = np.where(active, dK, 0.0)
        acc = np.where(active, np.where(contact, Y[:, k], acc + h * F), acc)
        std_errors[k] = ens.std_error(acc - Y[:, k]) if k > start else ens.std_error(acc)

    if not np.all(np.isfinite(Y[:, start:])):
        raise NumericalError("non-finite values in the backward solution")
    return BsdeSolution(
        grid=grid,
        Y=Y,
        Z=Z,
        sigma_z=SZ,
        residuals=residuals,
        std_errors=std_errors,
        start=start,
        stop=stop,
        weights=ens.weights,
        seed=ens.seed,
        K=K,
        meta={"driver": driver.name},
        pathwise=acc,
    )


def solve_many(
    ens: PathEnsemble,
    problems: Sequence[tuple[AdaptedFunctional, object]],
    basis=None,
    sigma: AdaptedFunctional | None = None,
    full: bool = True,
) -> list:
    """Solve several ``(driver, terminal)`` problems on one ensemble in a single pass.

    Every backward step factors the regression once and fits all
    continuations and integrands together, which is what dominates the cost.
    Each solution matches :func:`solve_bsde` up to round-off.  With
    ``full=False`` only the current step is kept in memory and the result is
    one :class:`Estimate` per problem.
    """
    basis = _default_basis(ens, basis)
    sigma = sigma or _identity_sigma(ens.d)
    if not problems:
        return []
    if ens.increments is None:
        raise ValidationError("ensemble carries no driving increments; Z is not identifiable")
    grid = ens.grid
    n, h, N, d, start = grid.n, grid.h, ens.N, ens.d, ens.start
    m = len(problems)
    stop = np.full(N, n)
    xi = np.stack([terminal_values(t, ens, stop) for _, t in problems], axis=1)
    if full:
        Y = np.full((N, n + 1, m), np.nan)
        Y[:, n] = xi
        Z = np.zeros((N, n, d, m))
        SZ = np.zeros((N, n, d, m))
        std_errors = np.full((n + 1, m), np.nan)
        std_errors[n] = 0.0
    residuals = np.zeros((n, m))
    acc = xi.copy()
    nxt = xi.copy()
    for k in range(n - 1, start - 1, -1):
        proj = basis.prepare(ens, k, None)
        fit = proj.fit(nxt)
        C = np.asarray(fit.prediction).reshape(N, m)
        resid = nxt - C
        s = sigma(grid, k, ens.paths)
        zt = (resid / h)[:, :, None] * ens.increments[:, k][:, None, :]
        zw = np.asarray(proj.fit(zt.reshape(N, m * d)).prediction).reshape(N, m, d)
        cur = np.empty_like(nxt)
        for j, (driver, _) in enumerate(problems):
            residuals[k, j] = np.sqrt(ens.mean(resid[:, j] ** 2))
            Zk, SZk = _sigma_t_z(s, zw[:, j])
            with np.errstate(over="ignore", invalid="ignore"):
                F = np.asarray(driver(grid, k, ens.paths, C[:, j], SZk), dtype=float)
            if not np.all(np.isfinite(F)):
                p = int(np.argmax(~np.isfinite(F)))
                raise NumericalError(f"non-finite driver on path {p} at step {k}", path_index=p, step=k)
            cur[:, j] = C[:, j] + h * F
            acc[:, j] += h * F
            if full:
                Z[:, k, :, j] = Zk
                SZ[:, k, :, j] = SZk
                std_errors[k, j] = ens.std_error(acc[:, j] - cur[:, j]) if k > start else ens.std_error(acc[:, j])
        if full:
            Y[:, k] = cur
        nxt = cur
    if not np.all(np.isfinite(nxt)):
        raise NumericalError("non-finite values in the backward solution")
    if not full:
        out = []
        for j in range(m):
            y = nxt[:, j]
            y0 = float(y[0]) if np.all(y == y[0]) else ens.mean(y)
            out.append(Estimate(y0, ens.std_error(acc[:, j])))
        return out
    return [
        BsdeSolution(
            grid=grid,
            Y=np.ascontiguousarray(Y[:, :, j]),
            Z=np.ascontiguousarray(Z[..., j]),
            sigma_z=np.ascontiguousarray(SZ[..., j]),
            residuals=residuals[:, j],
            std_errors=std_errors[:, j],
            start=start,
            stop=stop,
            weights=ens.weights,
            seed=ens.seed,
            meta={"driver": drv.name},
            pathwise=acc[:, j],
        )
        for j, (drv, _) in enumerate(problems)
    ]


def solve_bsde(
    sigma: AdaptedFunctional | None,
    driver: AdaptedFunctional,
    terminal,
    ens: PathEnsemble,
    basis=None,
    end: int | None = None,
    stop=None,
) -> BsdeSolution:
    """Solve ``Y = xi + int F(Y, sigma^T Z) dt - int Z dB`` backward on ``ens``.

    ``terminal`` is a functional (evaluated at the terminal index) or an array
    of per-path values; ``end``/``stop`` move the terminal index before ``n``.
    """
    if driver.role != "driver":
        raise ValidationError(f"expected a driver, got role {driver.role!r}", field="driver")
    s = _resolve_stop(ens, end, stop)
    xi = terminal_values(terminal, ens, s)
    return backward_induction(ens, driver, xi, s, basis, sigma)


def nonlinear_expectation(
    target,
    L: float,
    ens: PathEnsemble,
    side: str = "upper",
    sigma: AdaptedFunctional | None = None,
    basis=None,
    stop=None,
) -> BsdeSolution:
    """Upper/lower expectation over drifts ``|lambda| <= L`` via the driver ``+-L|sigma^T Z|``.

    ``target`` may be a functional or per-path values, optionally stopped at a
    per-path ``stop`` index.  The lower side is computed as ``-upper(-target)``.
    """
    if not L >= 0:
        raise ValidationError(f"L must be >= 0, got {L}", field="L")
    if side == "lower":
        sol = nonlinear_expectation(_negate(target), L, ens, "upper", sigma, basis, stop)
        return _negate_solution(sol)
    if side != "upper":
        raise ValidationError(f"side must be 'upper' or 'lower', got {side!r}", field="side")
    s = _resolve_stop(ens, None, stop)
    xi = terminal_values(target, ens, s)
    sol = backward_induction(ens, abs_driver(L), xi, s, basis, sigma)
    sol.meta.update({"L": float(L), "side": side})
    return sol


def _negate(target):
    if isinstance(target, AdaptedFunctional):
        return -target
    return -np.asarray(target, dtype=float)


def _negate_solution(sol: BsdeSolution) -> BsdeSolution:
    meta = dict(sol.meta)
    meta["side"] = "lower"
    return BsdeSolution(
        grid=sol.grid,
        Y=-sol.Y,
        Z=-sol.Z,
        sigma_z=-sol.sigma_z,
        residuals=sol.residuals,
        std_errors=sol.std_errors,
        start=sol.start,
        stop=sol.stop,
        weights=sol.weights,
        seed=sol.seed,
        K=None if sol.K is None else -sol.K,
        meta=meta,
        pathwise=None if sol.pathwise is None else -sol.pathwise,
    )


def value_functional(
    sigma: AdaptedFunctional,
    driver: AdaptedFunctional,
    terminal: AdaptedFunctional,
    i: int,
    omega: DiscretePath,
    N: int,
    seed: int = 0,
    basis=None,
    threads: int = 1,
) -> Estimate:
    """``u(t_i, omega)``: BSDE value on a fresh conditional ensemble at ``(i, omega)``."""
    omega.grid.check_index(i)
    if i == omega.grid.n:
        return Estimate(terminal.on_path(i, omega), 0.0)
    ens = conditional_ensemble(sigma, omega, i, N, seed, threads)
    return solve_bsde(sigma, driver, terminal, ens, basis).estimate()


def derived_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for nested simulations."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1, np.uint32)[0])


class DppResult(NamedTuple):
    residual: float
    std_error: float
    direct: float
    composed: float


def dpp_residual(
    sigma: AdaptedFunctional,
    driver: AdaptedFunctional,
    terminal: AdaptedFunctional,
    i: int,
    omega: DiscretePath,
    j: int,
    N: int,
    seed: int = 0,
    basis=None,
    inner_N: int | None = None,
    perturb: float = 0.0,
) -> DppResult:
    """``|u(t_i, omega) - Y_{t_i}(t_j, u(t_j, .))|`` with ``u`` from :func:`value_functional`.

    The composed side solves on ``[t_i, t_j]`` with terminal data ``u(t_j, .) +
    perturb`` obtained by a nested value-functional call per suffix path.
    """
    grid = omega.grid
    grid.check_index(i)
    grid.check_index(j)
    if j < i:
        raise ValidationError("intermediate index must satisfy j >= i", field="j")
    if j == i and perturb == 0.0:
        return DppResult(0.0, 0.0, np.nan, np.nan)
    inner_N = inner_N or N
    direct = value_functional(sigma, driver, terminal, i, omega, N, seed, basis)
    ens = conditional_ensemble(sigma, omega, i, N, derived_seed(seed, 1))
    mid = np.empty(N)
    mid_se = np.zeros(N)
    for p in range(N):
        est = value_functional(sigma, driver, terminal, j, ens.path(p), inner_N, derived_seed(seed, 2, p), basis)
        mid[p], mid_se[p] = est
    composed = solve_bsde(sigma, driver, mid + perturb, ens, basis, end=j)
    # nested estimates add their own noise on top of the outer standard error
    se = float(np.sqrt(direct.std_error**2 + composed.std_error**2 + np.mean(mid_se**2)))
    return DppResult(abs(direct.value - composed.y0), se, direct.value, composed.y0)


def write_solution_csv(sol: BsdeSolution, path, max_paths: int | None = None) -> Path:
    """Rows ``path, index, t, Y, Z_0..Z_{d-1}`` (Z empty at the last index)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = sol.Z.shape[2]
    N = sol.N if max_paths is None else min(sol.N, max_paths)
    times = sol.grid.times
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "index", "t", "Y", *[f"Z{c}" for c in range(d)]])
        for p in range(N):
            for k in range(sol.start, sol.grid.n + 1):
                z = [repr(float(v)) for v in sol.Z[p, k]] if k < sol.grid.n else [""] * d
                w.writerow([p, k, repr(float(times[k])), repr(float(sol.Y[p, k])), *z])
    return path


def write_summary(summary: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


Driver = Callable[..., np.ndarray]
