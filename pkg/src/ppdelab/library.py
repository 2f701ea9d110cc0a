"""Named coefficients, drivers and payoffs.

Every entry is an :class:`AdaptedFunctional`; path functionals also carry a
vectorised ``process`` so whole-grid evaluation costs one pass.
"""
from __future__ import annotations

import numpy as np

from .bsde import abs_driver
from .errors import ValidationError
from .paths import AdaptedFunctional


def identity_sigma() -> AdaptedFunctional:
    return AdaptedFunctional("sigma", lambda grid, i, w: 1.0, name="identity")


def constant_sigma(value) -> AdaptedFunctional:
    """Constant diffusion: a scalar (times the identity) or a ``d x d`` matrix."""
    m = np.asarray(value, dtype=float)
    if m.ndim not in (0, 2) or (m.ndim == 2 and m.shape[0] != m.shape[1]):
        raise ValidationError("constant sigma must be a scalar or a square matrix", field="sigma")
    return AdaptedFunctional("sigma", lambda grid, i, w: m, name=f"const({m.tolist()})")


def tanh_sigma(c: float) -> AdaptedFunctional:
    """``1 + c tanh(||omega||_t)`` times the identity (path dependent through the running max)."""
    c = float(c)

    def fn(grid, i, w):
        return 1.0 + c * np.tanh(np.max(np.linalg.norm(w, axis=2), axis=1))

    return AdaptedFunctional("sigma", fn, name=f"tanh({c:g})")


def zero_driver() -> AdaptedFunctional:
    return AdaptedFunctional("driver", lambda grid, i, w, y, z: np.zeros_like(y), name="zero")


def constant_driver(c: float) -> AdaptedFunctional:
    c = float(c)
    return AdaptedFunctional("driver", lambda grid, i, w, y, z: np.full_like(y, c), name=f"const({c:g})")


def linear_driver(a: float = 0.0, b=0.0) -> AdaptedFunctional:
    """``a y + b . z``; ``b`` is a scalar (applied to every component) or a vector."""
    a = float(a)
    b = np.asarray(b, dtype=float)

    def fn(grid, i, w, y, z):
        return a * y + (z @ b if b.ndim else b * z.sum(axis=1))

    return AdaptedFunctional("driver", fn, name=f"linear({a:g},{b.tolist()})")


def trig_driver(a: float = 0.5, b: float = 0.3) -> AdaptedFunctional:
    """``a cos(y) + b . z`` (Lipschitz in both slots)."""
    a, b = float(a), float(b)
    return AdaptedFunctional(
        "driver", lambda grid, i, w, y, z: a * np.cos(y) + b * z.sum(axis=1), name=f"trig({a:g},{b:g})"
    )


def _direction(e):
    return np.atleast_1d(np.asarray(e, dtype=float))


def _state_functional(role, name, value, e=1.0):
    """Functional ``value(omega_t . e)`` of the current state."""
    e = _direction(e)

    def fn(grid, i, w):
        return value(w[:, -1, :] @ np.broadcast_to(e, (w.shape[2],)))

    def proc(grid, paths):
        return value(paths @ np.broadcast_to(e, (paths.shape[2],)))

    return AdaptedFunctional(role, fn, name=name, process=proc)


def linear_payoff(e=1.0, role: str = "terminal") -> AdaptedFunctional:
    """``omega_t . e``."""
    return _state_functional(role, f"linear({np.atleast_1d(e).tolist()})", lambda x: x, e)


def sine_payoff(e=1.0, role: str = "terminal") -> AdaptedFunctional:
    return _state_functional(role, f"sine({np.atleast_1d(e).tolist()})", np.sin, e)


def square_payoff(role: str = "terminal") -> AdaptedFunctional:
    """``|omega_t|^2``."""

    def fn(grid, i, w):
        return np.sum(w[:, -1, :] ** 2, axis=1)

    def proc(grid, paths):
        return np.sum(paths**2, axis=2)

    return AdaptedFunctional(role, fn, name="square", process=proc)


def abs_payoff(role: str = "obstacle") -> AdaptedFunctional:
    def fn(grid, i, w):
        return np.linalg.norm(w[:, -1, :], axis=1)

    def proc(grid, paths):
        return np.linalg.norm(paths, axis=2)

    return AdaptedFunctional(role, fn, name="abs", process=proc)


def running_max_payoff(role: str = "terminal") -> AdaptedFunctional:
    """``||omega||_t``, the running maximum of the Euclidean norm."""

    def fn(grid, i, w):
        return np.max(np.linalg.norm(w, axis=2), axis=1)

    def proc(grid, paths):
        return np.maximum.accumulate(np.linalg.norm(paths, axis=2), axis=1)

    return AdaptedFunctional(role, fn, name="running_max", process=proc)


def integral_average_payoff(e=1.0, role: str = "terminal") -> AdaptedFunctional:
    """``(1/t) int_0^t omega_s . e ds`` (left Riemann sum); zero at ``t = 0``."""
    e = _direction(e)

    def fn(grid, i, w):
        if i == 0:
            return np.zeros(w.shape[0])
        x = w[:, :i, :] @ np.broadcast_to(e, (w.shape[2],))
        return x.sum(axis=1) * grid.h / grid.t(i)

    def proc(grid, paths):
        x = paths @ np.broadcast_to(e, (paths.shape[2],))
        out = np.zeros_like(x)
        out[:, 1:] = np.cumsum(x[:, :-1], axis=1) * grid.h / grid.times[None, 1:]
        return out

    return AdaptedFunctional(role, fn, name="integral_average", process=proc)


def time_functional(fn_of_t, name: str, role: str = "candidate") -> AdaptedFunctional:
    """Deterministic functional ``f(t)`` of time only."""

    def fn(grid, i, w):
        return np.full(w.shape[0], float(fn_of_t(grid.t(i))))

    def proc(grid, paths):
        vals = np.array([float(fn_of_t(t)) for t in grid.times])
        return np.broadcast_to(vals, (paths.shape[0], grid.n + 1))

    return AdaptedFunctional(role, fn, name=name, process=proc)


def heat_solution(role: str = "candidate") -> AdaptedFunctional:
    """``|omega_t|^2 + d (T - t)``: the heat-equation value of the square payoff."""

    def fn(grid, i, w):
        return np.sum(w[:, -1, :] ** 2, axis=1) + w.shape[2] * (grid.T - grid.t(i))

    def proc(grid, paths):
        return np.sum(paths**2, axis=2) + paths.shape[2] * (grid.T - grid.times[None, :])

    return AdaptedFunctional(role, fn, name="heat", process=proc)


def discounted_heat_solution(a: float, role: str = "candidate") -> AdaptedFunctional:
    """``exp(a (T - t)) (|omega_t|^2 + d (T - t))``: value under the driver ``a y``."""
    a = float(a)

    def fn(grid, i, w):
        tau = grid.T - grid.t(i)
        return np.exp(a * tau) * (np.sum(w[:, -1, :] ** 2, axis=1) + w.shape[2] * tau)

    def proc(grid, paths):
        tau = grid.T - grid.times[None, :]
        return np.exp(a * tau) * (np.sum(paths**2, axis=2) + paths.shape[2] * tau)

    return AdaptedFunctional(role, fn, name=f"heat_exp({a:g})", process=proc)


SIGMAS = {
    "identity": lambda **p: identity_sigma(),
    "constant": lambda value=1.0, **p: constant_sigma(value),
    "tanh": lambda c=0.5, **p: tanh_sigma(c),
}

DRIVERS = {
    "zero": lambda **p: zero_driver(),
    "constant": lambda c=0.0, **p: constant_driver(c),
    "linear": lambda a=0.0, b=0.0, **p: linear_driver(a, b),
    "absolute": lambda L=0.0, **p: abs_driver(L),
    "trig": lambda a=0.5, b=0.3, **p: trig_driver(a, b),
}

PAYOFFS = {
    "linear": lambda e=1.0, role="terminal", **p: linear_payoff(e, role),
    "square": lambda role="terminal", **p: square_payoff(role),
    "running_max": lambda role="terminal", **p: running_max_payoff(role),
    "integral_average": lambda e=1.0, role="terminal", **p: integral_average_payoff(e, role),
    "sine": lambda e=1.0, role="terminal", **p: sine_payoff(e, role),
    "abs": lambda role="obstacle", **p: abs_payoff(role),
    "heat": lambda role="candidate", **p: heat_solution(role),
    "neg_time": lambda role="candidate", **p: time_functional(lambda t: -t, "neg_time", role),
    "time": lambda role="candidate", **p: time_functional(lambda t: t, "time", role),
    "bump": lambda peak=0.45, role="candidate", **p: time_functional(
        lambda t: -((t - peak - 0.05) ** 2) - t / 10, f"bump({peak:g})", role
    ),
}


def _resolve(table, kind, name, params):
    if name not in table:
        raise ValidationError(f"unknown {kind} {name!r}; choose from {sorted(table)}", field=f"{kind}.name")
    try:
        return table[name](**params)
    except TypeError as exc:
        raise ValidationError(f"bad parameters for {kind} {name!r}: {exc}", field=f"{kind}.params") from exc


def make_sigma(name: str, **params) -> AdaptedFunctional:
    return _resolve(SIGMAS, "sigma", name, params)


def make_driver(name: str, **params) -> AdaptedFunctional:
    return _resolve(DRIVERS, "driver", name, params)


def make_payoff(name: str, **params) -> AdaptedFunctional:
    return _resolve(PAYOFFS, "payoff", name, params)
