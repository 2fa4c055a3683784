"""Scenario configuration documents.

A scenario is one JSON object.  Coefficients are given as a constant, a
vector (one entry per asset) or a knot list ``[[t0, v0], [t1, v1], ...]`` of a
piecewise-constant curve that takes the value of the last knot at or before t.
Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .engine import TimeGrid
from .market import MarketSpec, PreferenceSpec, TimeFunction

CASES = ("linear", "higher-rate", "large-investor", "long-short")


def _normalize_coefficient(value, name: str):
    """Number, tuple of numbers, or tuple of (t, value) knots."""
    if value is None:
        return None
    if isinstance(value, bool):
        raise ValueError(f"{name}: boolean is not a coefficient")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, (list, tuple)) or not value:
        raise ValueError(f"{name}: expected a number, a vector or a knot list")
    if all(isinstance(v, (list, tuple)) for v in value):
        knots = []
        for knot in value:
            if len(knot) != 2:
                raise ValueError(f"{name}: knots are [t, value] pairs")
            t, v = knot
            v = _normalize_coefficient(v, name)
            if isinstance(v, tuple) and v and isinstance(v[0], tuple):
                raise ValueError(f"{name}: nested knot lists")
            knots.append((float(t), v))
        return tuple(knots)
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        return tuple(float(v) for v in value)
    raise ValueError(f"{name}: mixed vector and knot entries")


def _is_knots(value) -> bool:
    return isinstance(value, tuple) and bool(value) and isinstance(value[0], tuple)


def _to_time_function(value) -> TimeFunction | None:
    if value is None:
        return None
    if _is_knots(value):
        return TimeFunction.from_knots(value)
    return TimeFunction.constant(value)


def _to_json(value):
    if isinstance(value, tuple):
        return [_to_json(v) for v in value]
    return value


@dataclass(frozen=True)
class ScenarioConfig:
    case: str
    alpha: float
    K: object
    b: object = None
    dim: int = 1
    horizon: float = 1.0
    r: object = 0.0
    R: object = None
    eps: object = None
    theta_long: object = None
    theta_short: object = None
    x0: float = 1.0
    n_paths: int = 100_000
    n_steps: int = 2000
    seed: int = 0
    out: str | None = None
    csv: str | None = None
    dump_paths: int = 100
    dump_stride: int = 1
    tolerance_scale: float = 1.0
    n_perturbations: int = 50
    n_alt: int = 10
    refinement_paths: int = 2000

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"case must be one of {', '.join(CASES)}")
        for name in ("K", "b", "r", "R", "eps", "theta_long", "theta_short"):
            object.__setattr__(self, name, _normalize_coefficient(getattr(self, name), name))
        for name in ("dim", "n_paths", "n_steps", "seed", "dump_paths", "dump_stride", "n_perturbations",
                     "n_alt", "refinement_paths"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value:
                raise ValueError(f"{name} must be an integer")
            object.__setattr__(self, name, int(value))
        for name in ("alpha", "horizon", "x0", "tolerance_scale"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.n_paths < 1 or self.n_steps < 1:
            raise ValueError("n_paths and n_steps must be positive")
        if self.x0 <= 0:
            raise ValueError("x0 must be positive")
        if self.tolerance_scale < 0:
            raise ValueError("tolerance_scale must be nonnegative")
        if _is_knots(self.K) or _is_knots(self.eps):
            raise ValueError("K and eps are constant in time")
        # re-validates every market and preference invariant
        self.market()
        self.preferences()

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ValueError("scenario must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {k: _to_json(v) for k, v in asdict(self).items()}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    def market(self) -> MarketSpec:
        return MarketSpec(
            dim=self.dim,
            horizon=self.horizon,
            drift=self.case,
            rate_r=_to_time_function(self.r),
            appreciation_b=_to_time_function(self.b),
            rate_R=_to_time_function(self.R),
            impact_eps=self.eps,
            long_rate=_to_time_function(self.theta_long),
            short_rate=_to_time_function(self.theta_short),
        )

    def preferences(self) -> PreferenceSpec:
        K = self.K if isinstance(self.K, tuple) else (self.K,) * self.dim
        if len(K) != self.dim:
            raise ValueError("K must have length dim")
        return PreferenceSpec(self.alpha, K)

    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.n_steps)
