"""Conditional-expectation estimators used by the backward schemes.

Two interchangeable estimators share the ``conditional_mean`` contract:

* :class:`RegressionBasis` -- weighted ridge least squares on polynomial
  features of the path up to the current index (Longstaff-Schwartz style);
* :class:`ExactConditioner` -- exact averages over paths sharing the same
  prefix, for enumerated (tree) ensembles.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg

from .errors import RegressionError, ValidationError
from .paths import PathEnsemble


class Fit(NamedTuple):
    prediction: np.ndarray  # (N,) or (N, k)
    residual_norm: float
    coef: np.ndarray | None = None
    intercept: np.ndarray | None = None


def _as_columns(targets) -> tuple[np.ndarray, bool]:
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        return y[:, None], True
    return y, False


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial features of adapted path statistics at index ``i``.

    Raw features: the state ``omega_{t_i}``, the running max ``||omega||_{t_i}``
    and the running integral of ``omega`` up to ``t_i``; all monomials up to
    ``degree`` of those (plus an intercept) span the regression space.
    ``ridge`` is relative: the penalty is ``ridge * sum(weights)`` on
    standardised features, so it does not shrink the intercept.  ``refine``
    rounds of iterated ridge pull the coefficients back towards the plain
    least-squares fit wherever the design is well determined, while
    near-null directions stay pinned by the penalty.
    """

    degree: int = 3
    ridge: float = 1e-8
    state: bool = True
    running_max: bool = True
    running_integral: bool = True
    extra: Callable | None = None
    refine: int = 2

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 1:
            raise ValidationError(f"basis degree must be an integer >= 1, got {self.degree}", field="degree")
        if not self.ridge >= 0:
            raise ValidationError(f"ridge must be >= 0, got {self.ridge}", field="ridge")

    def raw_features(self, ens: PathEnsemble, i: int) -> np.ndarray:
        cols = []
        if self.state:
            cols.append(ens.paths[:, i, :])
        if self.running_max:
            cols.append(ens.running_max[:, i : i + 1])
        if self.running_integral:
            cols.append(ens.running_integral[:, i, :])
        if self.extra is not None:
            cols.append(np.asarray(self.extra(ens, i), dtype=float).reshape(ens.N, -1))
        if not cols:
            return np.empty((ens.N, 0))
        return np.concatenate(cols, axis=1)

    def design(self, ens: PathEnsemble, i: int) -> np.ndarray:
        """All non-constant monomials of the raw features up to ``degree``, shape ``(m, N)``."""
        raw = np.ascontiguousarray(self.raw_features(ens, i).T)
        m = raw.shape[0]
        combos = [c for deg in range(1, self.degree + 1) for c in combinations_with_replacement(range(m), deg)]
        out = np.empty((len(combos), ens.N))
        index = {}
        for r, combo in enumerate(combos):
            if len(combo) == 1:
                out[r] = raw[combo[0]]
            else:
                np.multiply(out[index[combo[:-1]]], raw[combo[-1]], out=out[r])
            index[combo] = r
        return out

    def prepare(self, ens: PathEnsemble, i: int, active=None) -> "Projection":
        """Factor the weighted normal equations at index ``i`` once for several targets."""
        w = ens.weights if active is None else ens.weights * np.asarray(active, dtype=float)
        sw = float(w.sum())
        if sw <= 0:
            raise RegressionError("no paths carry positive weight", step=i)
        X = self.design(ens, i)
        unit = bool(np.all(w == 1.0))
        mu = scale = keep = None
        if X.shape[0]:
            mu = (X @ w) / sw
            X -= mu[:, None]
            sq = np.einsum("ij,ij->i", X, X) if unit else np.einsum("ij,ij,j->i", X, X, w)
            scale = np.sqrt(sq / sw)
            keep = scale > 1e-12 * (1.0 + np.abs(mu))
            if not np.all(keep):
                X, scale = X[keep], scale[keep]
            X /= scale[:, None]
        Xw = X if unit else X * w
        factor = None
        G = None
        if X.shape[0]:
            G = Xw @ X.T
            G[np.diag_indices_from(G)] += self.ridge * sw
            try:
                factor = scipy.linalg.cho_factor(G, check_finite=False)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
                cond = float(np.linalg.cond(G))
                raise RegressionError(
                    f"singular normal equations at index {i} (condition ~ {cond:.3g})",
                    condition=cond,
                    step=i,
                ) from exc
            if not np.all(np.isfinite(factor[0])):
                raise RegressionError(f"non-finite normal equations at index {i}", step=i)
        return Projection(i, w, sw, X, Xw, factor, G, self.ridge * sw, self.refine, self, mu, scale, keep)

    def conditional_mean(self, ens: PathEnsemble, i: int, targets, active=None) -> Fit:
        y, _ = _as_columns(targets)
        w = ens.weights if active is None else ens.weights * np.asarray(active, dtype=float)
        live = w > 0
        if np.any(live) and np.all(y[live] == y[live][0]):
            return _passthrough(targets, live)
        return self.prepare(ens, i, active).fit(targets)


def _passthrough(targets, live) -> Fit:
    y, flat = _as_columns(targets)
    pred = np.empty_like(y)
    pred[:] = y[live][0]
    return Fit(pred[:, 0] if flat else pred, 0.0, None, y[live][0].copy())


@dataclass(frozen=True, eq=False)
class Projection:
    """Factored weighted least-squares problem on standardised features."""

    step: int
    w: np.ndarray
    sw: float
    X: np.ndarray  # (m, N)
    Xw: np.ndarray
    factor: tuple | None
    gram: np.ndarray | None = None  # regularised normal matrix
    shift: float = 0.0
    refine: int = 0
    basis: RegressionBasis | None = None
    mu: np.ndarray | None = None
    scale: np.ndarray | None = None
    keep: np.ndarray | None = None

    def predict(self, fit: Fit, ens: PathEnsemble) -> np.ndarray:
        """Apply a fit from this projection to the paths of another ensemble."""
        b0 = np.asarray(fit.intercept)
        if fit.coef is None or fit.coef.shape[0] == 0:
            out = np.broadcast_to(b0, (ens.N,) + b0.shape).copy()
        else:
            X = self.basis.design(ens, self.step)[self.keep]
            X -= self.mu[self.keep, None]
            X /= self.scale[:, None]
            out = b0 + X.T @ fit.coef
        return out[:, 0] if out.ndim == 2 and np.ndim(fit.prediction) == 1 else out

    def fit(self, targets) -> Fit:
        y, flat = _as_columns(targets)
        w, sw, live = self.w, self.sw, self.w > 0
        if not np.all(np.isfinite(y[live])):
            raise RegressionError("non-finite regression targets", step=self.step)
        const = np.all(y[live] == y[live][0], axis=0)
        if np.all(const):
            return _passthrough(targets, live)
        ybar = (w @ y) / sw
        yc = y - ybar
        if self.factor is None:
            coef = np.zeros((0, y.shape[1]))
            pred = np.broadcast_to(ybar, y.shape).copy()
            intercept = ybar
        else:
            rhs = self.Xw @ yc
            coef = scipy.linalg.cho_solve(self.factor, rhs, check_finite=False)
            for _ in range(self.refine):
                resid = rhs - (self.gram @ coef - self.shift * coef)
                coef = coef + scipy.linalg.cho_solve(self.factor, resid, check_finite=False)
            pred = ybar + self.X.T @ coef
            intercept = ybar
        # exact pass-through for columns that are constant on the live paths
        if np.any(const):
            pred[:, const] = y[live][0, const]
        if not np.all(np.isfinite(pred)):
            raise RegressionError(f"non-finite regression prediction at index {self.step}", step=self.step)
        resid = np.sqrt(np.sum(w[:, None] * (y - pred) ** 2) / sw)
        if np.any(const):
            # constant columns predict their constant everywhere
            intercept = np.where(const, y[live][0], intercept)
            coef = coef.copy()
            coef[:, const] = 0.0
        return Fit(pred[:, 0] if flat else pred, float(resid), coef, intercept)


@dataclass(frozen=True)
class ExactConditioner:
    """Exact conditional means over paths sharing a prefix (tree ensembles)."""

    def prepare(self, ens: PathEnsemble, i: int, active=None) -> "GroupAverage":
        w = ens.weights if active is None else ens.weights * np.asarray(active, dtype=float)
        prefix = ens.paths[:, : i + 1, :].reshape(ens.N, -1)
        _, group = np.unique(prefix, axis=0, return_inverse=True)
        group = group.ravel()
        return GroupAverage(w, group, np.bincount(group, weights=w))

    def conditional_mean(self, ens: PathEnsemble, i: int, targets, active=None) -> Fit:
        return self.prepare(ens, i, active).fit(targets)


@dataclass(frozen=True, eq=False)
class GroupAverage:
    w: np.ndarray
    group: np.ndarray
    sw: np.ndarray

    def fit(self, targets) -> Fit:
        y, flat = _as_columns(targets)
        w, group, sw = self.w, self.group, self.sw
        pred = np.empty_like(y)
        for c in range(y.shape[1]):
            s = np.bincount(group, weights=w * y[:, c])
            with np.errstate(invalid="ignore", divide="ignore"):
                m = np.where(sw > 0, s / np.where(sw > 0, sw, 1.0), 0.0)
            pred[:, c] = m[group]
        resid = float(np.sqrt(np.sum(w[:, None] * (y - pred) ** 2) / max(w.sum(), 1e-300)))
        return Fit(pred[:, 0] if flat else pred, resid)


def regress(ens: PathEnsemble, i: int, targets, basis: RegressionBasis | None = None) -> Fit:
    """Weighted ridge regression of ``targets`` on the basis features at ``i``."""
    basis = basis or RegressionBasis()
    return basis.conditional_mean(ens, i, targets)
