"""Discretised path space: grids, paths, ensembles and adapted functionals.

A path is stored as ``n + 1`` points in ``R^d`` on a uniform grid and always
starts at the origin.  Functionals are evaluated on *prefixes*: the evaluator
for index ``i`` only ever receives ``values[:, :i + 1]``, which makes every
:class:`AdaptedFunctional` adapted by construction as long as it does not
close over outside path data.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import AdaptednessError, ControlBoundError, GridError, ValidationError

ROLES = ("sigma", "driver", "terminal", "control", "obstacle", "candidate")
MEASURE_TAGS = ("base", "drifted", "conditional", "tree")


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise GridError(f"horizon T must be > 0, got {self.T}", field="T")
        if int(self.n) != self.n or self.n < 1:
            raise GridError(f"step count n must be an integer >= 1, got {self.n}", field="n")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n", int(self.n))

    @property
    def h(self) -> float:
        return self.T / self.n

    @cached_property
    def times(self) -> np.ndarray:
        t = np.arange(self.n + 1) * self.h
        t[-1] = self.T
        t.flags.writeable = False
        return t

    def t(self, i: int) -> float:
        return float(self.times[i])

    def check_index(self, i: int) -> int:
        if not 0 <= i <= self.n:
            raise GridError(f"time index {i} outside 0..{self.n}")
        return int(i)

    def suffix(self, i: int) -> "TimeGrid":
        """Grid of the remaining ``n - i`` steps after index ``i``."""
        self.check_index(i)
        if i == self.n:
            raise GridError("no steps remain after the horizon")
        return TimeGrid(self.T - self.t(i), self.n - i)

    def compatible(self, other: "TimeGrid") -> bool:
        return self.n == other.n and np.isclose(self.T, other.T, rtol=1e-12, atol=0.0)


def _as_points(values, d=None) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValidationError(f"path values must be 1-D or 2-D, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise ValidationError(f"expected dimension {d}, got {arr.shape[1]}")
    return arr


@dataclass(frozen=True, eq=False)
class DiscretePath:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = _as_points(self.values).copy()
        if v.shape[0] != self.grid.n + 1:
            raise GridError(f"path has {v.shape[0]} points, grid needs {self.grid.n + 1}")
        if v.shape[1] < 1:
            raise ValidationError("path dimension must be >= 1")
        if np.any(v[0] != 0.0):
            raise ValidationError("paths must start at the origin")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def from_values(cls, values, T: float | None = None) -> "DiscretePath":
        """Build a path on ``[0, T]`` (default ``T = n``, unit steps)."""
        v = _as_points(values)
        n = v.shape[0] - 1
        return cls(TimeGrid(float(n) if T is None else T, n), v)

    @classmethod
    def zero(cls, grid: TimeGrid, d: int = 1) -> "DiscretePath":
        return cls(grid, np.zeros((grid.n + 1, d)))

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def stacked(self) -> np.ndarray:
        """Values as a one-path batch of shape ``(1, n + 1, d)``."""
        return self.values[None, :, :]


def concat(omega: DiscretePath, i: int, suffix) -> DiscretePath:
    """``omega`` up to index ``i``, then ``omega[i] + suffix`` (Dupire concatenation)."""
    grid = omega.grid
    grid.check_index(i)
    s = _as_points(suffix.values if isinstance(suffix, DiscretePath) else suffix)
    if s.shape[0] != grid.n - i + 1:
        raise GridError(f"suffix has {s.shape[0]} points, expected {grid.n - i + 1}")
    if s.shape[1] != omega.d:
        raise ValidationError(f"suffix dimension {s.shape[1]} != path dimension {omega.d}")
    if np.any(s[0] != 0.0):
        raise ValidationError("suffix must start at zero")
    if isinstance(suffix, DiscretePath) and not np.isclose(
        suffix.grid.h, grid.h, rtol=1e-12, atol=0.0
    ):
        raise GridError("suffix grid spacing differs from the path grid")
    out = np.empty_like(omega.values)
    out[: i + 1] = omega.values[: i + 1]
    out[i + 1 :] = omega.values[i] + s[1:]
    return DiscretePath(grid, out)


def sup_norm(omega: DiscretePath, i: int) -> float:
    """Running sup ``max_{j<=i} |omega_j|``."""
    omega.grid.check_index(i)
    return float(np.max(np.linalg.norm(omega.values[: i + 1], axis=1)))


def pseudo_distance(a: tuple[int, DiscretePath], b: tuple[int, DiscretePath]) -> float:
    (i, w), (j, v) = a, b
    if not w.grid.compatible(v.grid):
        raise GridError("points live on different grids")
    if w.d != v.d:
        raise ValidationError("points have different dimensions")
    w.grid.check_index(i)
    v.grid.check_index(j)
    k = np.arange(w.grid.n + 1)
    stopped_w = w.values[np.minimum(k, i)]
    stopped_v = v.values[np.minimum(k, j)]
    return abs(w.grid.t(i) - v.grid.t(j)) + float(
        np.max(np.linalg.norm(stopped_w - stopped_v, axis=1))
    )


@dataclass(frozen=True, eq=False)
class AdaptedFunctional:
    """A map ``(i, omega[, y, z]) -> value`` evaluated on path prefixes.

    ``fn(grid, i, prefix, *extra)`` receives ``prefix`` of shape ``(N, i + 1, d)``
    and returns something broadcastable to ``(N, d, d)`` (sigma), ``(N, d)``
    (control) or ``(N,)`` (every other role).  Drivers additionally receive
    ``y`` of shape ``(N,)`` and ``z = sigma^T Z`` of shape ``(N, d)``.

    ``process``, when given, computes the values at every index in one pass,
    ``process(grid, paths) -> (N, n + 1)``; it must agree with ``fn``.
    """

    role: str
    fn: Callable
    name: str = ""
    bound: float | None = None
    process: Callable | None = None
    offset_of: tuple | None = field(default=None, repr=False, compare=False)  # (base, c) for base + c

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}", field="role")
        if self.role == "control" and (self.bound is None or self.bound < 0):
            raise ValidationError("control functionals need a bound L >= 0", field="bound")

    def __call__(self, grid: TimeGrid, i: int, paths: np.ndarray, *extra) -> np.ndarray:
        paths = np.asarray(paths)
        N, _, d = paths.shape
        out = np.asarray(self.fn(grid, i, paths[:, : i + 1], *extra), dtype=float)
        if self.role == "sigma":
            if out.ndim == 0:
                out = out * np.eye(d)
            elif out.ndim == 1:
                # one scalar per path
                out = out[:, None, None] * np.eye(d)
            return np.broadcast_to(out, (N, d, d))
        if self.role == "control":
            return np.broadcast_to(out if out.ndim != 1 or out.shape[0] == d else out[:, None], (N, d))
        return np.broadcast_to(out, (N,))

    def along(self, grid: TimeGrid, paths: np.ndarray, start: int = 0) -> np.ndarray:
        """Scalar-role values at every index ``>= start``; earlier entries are NaN."""
        paths = np.asarray(paths)
        N = paths.shape[0]
        if self.process is not None:
            out = np.array(self.process(grid, paths), dtype=float, copy=True)
            out = np.broadcast_to(out, (N, grid.n + 1)).copy()
        else:
            out = np.empty((N, grid.n + 1))
            for i in range(start, grid.n + 1):
                out[:, i] = self(grid, i, paths)
        out[:, :start] = np.nan
        return out

    def at(self, grid: TimeGrid, index: np.ndarray, paths: np.ndarray) -> np.ndarray:
        """Values at a per-path index (e.g. a stopping time)."""
        index = np.asarray(index)
        out = np.empty(paths.shape[0])
        for j in np.unique(index):
            mask = index == j
            out[mask] = self(grid, int(j), paths[mask])
        return out

    def on_path(self, i: int, omega: DiscretePath, *extra):
        extra = tuple(np.atleast_1d(np.asarray(e, dtype=float)) for e in extra)
        if len(extra) == 2:
            extra = (extra[0], extra[1].reshape(1, -1))
        out = self(omega.grid, i, omega.stacked(), *extra)
        return out[0] if self.role in ("sigma", "control") else float(out[0])

    def __neg__(self) -> "AdaptedFunctional":
        proc = None
        if self.process is not None:
            proc = lambda grid, paths, p=self.process: -np.asarray(p(grid, paths))  # noqa: E731
        return AdaptedFunctional(
            self.role,
            lambda grid, i, w, *a, f=self.fn: -np.asarray(f(grid, i, w, *a)),
            name=f"-{self.name}",
            process=proc,
        )

    def __add__(self, other) -> "AdaptedFunctional":
        if isinstance(other, AdaptedFunctional):
            proc = None
            if self.process is not None and other.process is not None:
                proc = lambda g, p, a=self.process, b=other.process: np.asarray(a(g, p)) + np.asarray(b(g, p))  # noqa: E731
            return AdaptedFunctional(
                self.role,
                lambda g, i, w, *x, a=self.fn, b=other.fn: np.asarray(a(g, i, w, *x)) + np.asarray(b(g, i, w, *x)),
                name=f"({self.name}+{other.name})",
                process=proc,
            )
        c = float(other)
        proc = None
        if self.process is not None:
            proc = lambda g, p, a=self.process: np.asarray(a(g, p)) + c  # noqa: E731
        base, total = (self, c) if self.offset_of is None else (self.offset_of[0], self.offset_of[1] + c)
        return AdaptedFunctional(
            self.role,
            lambda g, i, w, *x, a=self.fn: np.asarray(a(g, i, w, *x)) + c,
            name=f"({self.name}+{c:g})",
            process=proc,
            offset_of=(base, total),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "AdaptedFunctional":
        return self + (-other)

    def __mul__(self, c) -> "AdaptedFunctional":
        c = float(c)
        proc = None
        if self.process is not None:
            proc = lambda g, p, a=self.process: c * np.asarray(a(g, p))  # noqa: E731
        return AdaptedFunctional(
            self.role,
            lambda g, i, w, *x, a=self.fn: c * np.asarray(a(g, i, w, *x)),
            name=f"{c:g}*{self.name}",
            process=proc,
        )

    __rmul__ = __mul__

    def with_role(self, role: str) -> "AdaptedFunctional":
        return replace(self, role=role)


def constant(role: str, value, name: str = "", bound: float | None = None) -> AdaptedFunctional:
    value = np.asarray(value, dtype=float)
    if role == "driver":
        fn = lambda grid, i, w, y, z: np.full(w.shape[0], float(value))  # noqa: E731
    else:
        fn = lambda grid, i, w, *a: value  # noqa: E731
    proc = None
    if role in ("terminal", "obstacle", "candidate") and value.ndim == 0:
        proc = lambda grid, paths: np.full((paths.shape[0], grid.n + 1), float(value))  # noqa: E731
    return AdaptedFunctional(role, fn, name=name or f"const({value})", bound=bound, process=proc)


def shift_eval(f: AdaptedFunctional, i: int, omega: DiscretePath, suffix, s: int | None = None, *extra):
    """Evaluate the shifted functional ``f^{t_i, omega}`` at suffix index ``s``.

    Defaults to the last suffix index, i.e. the horizon.
    """
    joined = concat(omega, i, suffix)
    if s is None:
        s = joined.grid.n - i
    return f.on_path(i + s, joined, *extra)


def probe_adaptedness(
    f: AdaptedFunctional, grid: TimeGrid, d: int = 1, trials: int = 8, seed: int = 0
) -> None:
    """Randomised prefix-agreement probe; raises :class:`AdaptednessError`."""
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        base = np.vstack([np.zeros((1, d)), np.cumsum(rng.normal(size=(grid.n, d)), axis=0)])
        i = int(rng.integers(0, grid.n))
        other = base.copy()
        other[i + 1 :] = base[i] + np.cumsum(rng.normal(size=(grid.n - i, d)), axis=0)
        paths = np.stack([base, other])
        extra = ()
        if f.role == "driver":
            y = np.repeat(rng.normal(), 2)
            z = np.repeat(rng.normal(size=(1, d)), 2, axis=0)
            extra = (y, z)
        for j in range(i + 1):
            a = np.asarray(f(grid, j, paths, *extra))
            if not np.array_equal(a[0], a[1], equal_nan=True):
                raise AdaptednessError(
                    f"{f.name or f.role} at index {j} depends on the path after index {i}"
                )


def probe_control_bound(control: AdaptedFunctional, grid: TimeGrid, paths: np.ndarray, samples: int = 16) -> None:
    if control.role != "control":
        raise ValidationError("expected a control functional")
    idx = np.unique(np.linspace(0, grid.n - 1, min(samples, grid.n)).astype(int))
    for i in idx:
        lam = control(grid, int(i), paths)
        norm = np.linalg.norm(lam, axis=1)
        if not np.all(np.isfinite(norm)):
            raise ControlBoundError(f"non-finite control at index {i}")
        if np.any(norm > control.bound * (1 + 1e-12) + 1e-15):
            k = int(np.argmax(norm))
            raise ControlBoundError(
                f"|lambda| = {norm[k]:.6g} exceeds bound {control.bound} at index {i}, path {k}"
            )


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """A Monte-Carlo sample of paths, optionally weighted.

    ``increments`` holds the driving Gaussian increments (shape ``(N, n, d)``)
    whenever the ensemble was simulated; regression-based ``Z`` estimation
    needs them.  ``start`` is the index from which the paths are random
    (non-zero for conditional ensembles).
    """

    grid: TimeGrid
    paths: np.ndarray
    weights: np.ndarray | None = None
    seed: int | None = None
    tag: str = "base"
    increments: np.ndarray | None = None
    start: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.paths, dtype=float)
        if p.ndim == 2:
            p = p[:, :, None]
        if p.ndim != 3 or p.shape[0] < 1:
            raise ValidationError(f"paths must have shape (N, n+1, d) with N >= 1, got {p.shape}")
        if p.shape[1] != self.grid.n + 1:
            raise GridError(f"paths have {p.shape[1]} points, grid needs {self.grid.n + 1}")
        if self.tag not in MEASURE_TAGS:
            raise ValidationError(f"unknown measure tag {self.tag!r}")
        w = np.ones(p.shape[0]) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (p.shape[0],) or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValidationError("weights must be N finite nonnegative reals")
        p.flags.writeable = False
        w = w.copy() if self.weights is not None else w
        w.flags.writeable = False
        object.__setattr__(self, "paths", p)
        object.__setattr__(self, "weights", w)
        if self.increments is not None:
            inc = np.asarray(self.increments, dtype=float)
            if inc.shape != (p.shape[0], self.grid.n, p.shape[2]):
                raise ValidationError(f"increments shape {inc.shape} does not match paths")
            inc.flags.writeable = False
            object.__setattr__(self, "increments", inc)

    @property
    def N(self) -> int:
        return self.paths.shape[0]

    @property
    def d(self) -> int:
        return self.paths.shape[2]

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def unit_weights(self) -> bool:
        return bool(np.all(self.weights == 1.0))

    @cached_property
    def running_max(self) -> np.ndarray:
        r = np.maximum.accumulate(np.linalg.norm(self.paths, axis=2), axis=1)
        r.flags.writeable = False
        return r

    @cached_property
    def running_integral(self) -> np.ndarray:
        """Left Riemann sum ``h * sum_{k<i} omega_k``, shape ``(N, n + 1, d)``."""
        r = np.zeros_like(self.paths)
        r[:, 1:] = np.cumsum(self.paths[:, :-1], axis=1) * self.grid.h
        r.flags.writeable = False
        return r

    def path(self, k: int) -> DiscretePath:
        return DiscretePath(self.grid, self.paths[k])

    def subset(self, index) -> "PathEnsemble":
        """Ensemble restricted to the given path indices (same grid, seed and tag)."""
        index = np.asarray(index)
        return replace(
            self,
            paths=self.paths[index],
            weights=self.weights[index],
            increments=None if self.increments is None else self.increments[index],
        )

    def with_weights(self, weights) -> "PathEnsemble":
        return replace(self, weights=np.asarray(weights, dtype=float))

    def mean(self, x: np.ndarray) -> float:
        w = self.weights
        live = w > 0
        if np.any(live) and np.all(x[live] == x[live][0]):
            return float(x[live][0])  # exact for deterministic columns
        return float(np.dot(w, x) / w.sum())

    def std_error(self, x: np.ndarray) -> float:
        """Standard error of the (self-normalised) weighted mean of ``x``."""
        w = self.weights
        live = w > 0
        if not np.any(live) or np.all(x[live] == x[live][0]):
            return 0.0
        sw = w.sum()
        m = np.dot(w, x) / sw
        return float(np.sqrt(np.dot(w**2, (x - m) ** 2)) / sw)

    def metadata(self) -> dict:
        return {
            "N": self.N,
            "n": self.n,
            "T": self.grid.T,
            "d": self.d,
            "seed": self.seed,
            "tag": self.tag,
            "start": self.start,
            "meta": self.meta,
        }


def save_ensemble(ens: PathEnsemble, prefix) -> tuple[Path, Path]:
    """Columnar little-endian float64 dump plus a JSON sidecar.

    Column order: weights, then one column of N values per (component, index)
    of the paths, then the same for the driving increments when present.
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    cols = [ens.weights[None, :]]
    cols.append(np.transpose(ens.paths, (2, 1, 0)).reshape(-1, ens.N))
    if ens.increments is not None:
        cols.append(np.transpose(ens.increments, (2, 1, 0)).reshape(-1, ens.N))
    data = np.concatenate(cols, axis=0).astype("<f8")
    bin_path = prefix.with_suffix(".bin")
    bin_path.write_bytes(data.tobytes(order="C"))
    side = ens.metadata() | {
        "dtype": "<f8",
        "layout": "column-major: weights[N]; paths[d][n+1][N]; increments[d][n][N] (optional)",
        "has_increments": ens.increments is not None,
        "file": bin_path.name,
    }
    json_path = prefix.with_suffix(".json")
    json_path.write_text(json.dumps(side, indent=2, sort_keys=True, default=str))
    return bin_path, json_path


def load_ensemble(prefix) -> PathEnsemble:
    prefix = Path(prefix)
    side = json.loads(prefix.with_suffix(".json").read_text())
    N, n, d = side["N"], side["n"], side["d"]
    raw = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8").reshape(-1, N)
    weights = raw[0]
    k = d * (n + 1)
    paths = np.transpose(raw[1 : 1 + k].reshape(d, n + 1, N), (2, 1, 0))
    inc = None
    if side["has_increments"]:
        inc = np.transpose(raw[1 + k : 1 + k + d * n].reshape(d, n, N), (2, 1, 0))
    return PathEnsemble(
        TimeGrid(side["T"], n),
        paths.copy(),
        weights=weights.copy(),
        seed=side["seed"],
        tag=side["tag"],
        increments=None if inc is None else inc.copy(),
        start=side["start"],
        meta=side.get("meta", {}),
    )


def stack_paths(paths: Sequence[DiscretePath]) -> np.ndarray:
    return np.stack([p.values for p in paths])
