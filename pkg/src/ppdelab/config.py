"""Experiment configuration: TOML sections mapped onto dataclasses."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ValidationError


@dataclass
class GridConfig:
    T: float = 1.0
    n: int = 100


@dataclass
class ModelConfig:
    sigma: str = "identity"
    sigma_params: dict = field(default_factory=dict)
    d: int = 1
    L: float = 0.5
    L0: float = 0.0


@dataclass
class DriverConfig:
    name: str = "zero"
    params: dict = field(default_factory=dict)


@dataclass
class PayoffConfig:
    name: str = "linear"
    params: dict = field(default_factory=dict)


@dataclass
class SolverConfig:
    N: int = 20_000
    seed: int = 0
    degree: int = 3
    ridge: float = 1e-8
    contact_tol: float = 1e-9


@dataclass
class OutputConfig:
    directory: str = "out"
    formats: list = field(default_factory=lambda: ["csv", "json"])
    csv_paths: int = 50


@dataclass
class ExpectationConfig:
    side: str = "upper"


@dataclass
class SnellConfig:
    side: str = "lower"
    horizon_steps: int | None = None


@dataclass
class ViscosityConfig:
    check: str = "martingale"  # martingale | gap | jet | tangency
    mode: str = "P-sub"
    candidate: str = "heat"
    candidate_params: dict = field(default_factory=dict)
    points: int = 20
    rules: list = field(default_factory=lambda: [2, 5, 10])
    inner_N: int = 20_000
    alpha: float = 0.0
    beta: list = field(default_factory=lambda: [0.0])
    side: str = "sub"
    window: int = 5


@dataclass
class CompareConfig:
    shift: float = 0.5
    points: int = 20
    difference_window: int | None = None


@dataclass
class ConvergeConfig:
    experiment: str = "expectation"  # expectation | bsde | snell
    levels: list = field(default_factory=lambda: [[20_000, 25], [20_000, 50], [20_000, 100]])


@dataclass
class ExperimentConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    driver: DriverConfig = field(default_factory=DriverConfig)
    payoff: PayoffConfig = field(default_factory=PayoffConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    expectation: ExpectationConfig = field(default_factory=ExpectationConfig)
    snell: SnellConfig = field(default_factory=SnellConfig)
    viscosity: ViscosityConfig = field(default_factory=ViscosityConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    converge: ConvergeConfig = field(default_factory=ConvergeConfig)

    def validate(self) -> "ExperimentConfig":
        g, m, s = self.grid, self.model, self.solver
        _require(isinstance(g.T, (int, float)) and g.T > 0, "grid.T", f"T must be > 0, got {g.T}")
        _require(_is_int(g.n) and g.n >= 1, "grid.n", f"n must be an integer >= 1, got {g.n}")
        _require(_is_int(m.d) and m.d >= 1, "model.d", f"d must be an integer >= 1, got {m.d}")
        _require(m.L >= 0, "model.L", f"L must be >= 0, got {m.L}")
        _require(m.L0 >= 0, "model.L0", f"L0 must be >= 0, got {m.L0}")
        _require(_is_int(s.N) and s.N >= 1, "solver.N", f"N must be an integer >= 1, got {s.N}")
        _require(_is_int(s.seed) and 0 <= s.seed < 2**64, "solver.seed", "seed must be an unsigned 64-bit integer")
        _require(_is_int(s.degree) and s.degree >= 1, "solver.degree", "degree must be an integer >= 1")
        _require(s.ridge >= 0, "solver.ridge", "ridge must be >= 0")
        _require(s.contact_tol >= 0, "solver.contact_tol", "contact_tol must be >= 0")
        _require(self.output.csv_paths >= 0, "output.csv_paths", "csv_paths must be >= 0")
        _require(self.expectation.side in ("upper", "lower"), "expectation.side", "side must be upper or lower")
        _require(self.snell.side in ("lower", "upper"), "snell.side", "side must be lower or upper")
        hs = self.snell.horizon_steps
        _require(hs is None or (_is_int(hs) and 0 <= hs <= g.n), "snell.horizon_steps", "horizon_steps must lie in 0..n")
        _require(self.viscosity.points >= 1, "viscosity.points", "points must be >= 1")
        for lv in self.converge.levels:
            _require(
                isinstance(lv, (list, tuple)) and len(lv) == 2 and all(_is_int(x) and x >= 1 for x in lv),
                "converge.levels",
                "levels must be [N, n] pairs of positive integers",
            )
        # resolve names now so typos fail before any work starts
        from . import library

        library.make_sigma(m.sigma, **m.sigma_params)
        library.make_driver(self.driver.name, **self.driver.params)
        library.make_payoff(self.payoff.name, **self.payoff.params)
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _require(ok: bool, name: str, msg: str):
    if not ok:
        raise ValidationError(f"{name}: {msg}", field=name)


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ValidationError(f"section [{prefix}] must be a table", field=prefix)
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValidationError(f"unknown keys in [{prefix}]: {sorted(unknown)}", field=f"{prefix}.{sorted(unknown)[0]}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate() if data else ExperimentConfig().validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}", field="config") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"invalid TOML in {path}: {exc}", field="config") from exc
    return from_dict(data)
