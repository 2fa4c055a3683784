"""Market, preference and ambiguity model inputs.

Drift coefficients b(t, x, q) of the wealth equation

    dX_t = b(t, X_t, q_t) dt + q_t' dW_t,      q = sigma' pi,  sigma = I,

their Fenchel-Legendre conjugates

    b~(t, mu, nu) = sup_{x, q} [ b(t, x, q) - x mu - q' nu ],

the power utility u(x) = x^alpha / alpha with its marginal inverse and convex
dual, and the K-ignorance driver f(t, y, z) = -K'|z|.

Conjugates of the named drift cases are indicator functions of convex sets, so
their values are either 0 or ``math.inf``.  ``math.inf`` is the extended-real
sentinel used throughout the package; no large finite float ever stands in
for +infinity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

INF = math.inf
_TIME_TOL = 1e-12


class DriftCase(str, Enum):
    LINEAR = "linear"
    HIGHER_RATE = "higher-rate"
    LARGE_INVESTOR = "large-investor"
    LONG_SHORT = "long-short"
    CUSTOM_CONCAVE = "custom-concave"


class UseNumericConjugate(ValueError):
    """Raised when no closed-form conjugate exists for a drift (custom case)."""


@dataclass(frozen=True)
class TimeFunction:
    """Piecewise-constant function of time.

    ``times`` are increasing knot times starting at 0; the value at ``t`` is the
    value of the last knot at or before ``t``.  Values are scalars or tuples of
    length d (vector-valued coefficients).
    """

    times: tuple[float, ...]
    values: tuple

    def __post_init__(self):
        if len(self.times) == 0 or len(self.times) != len(self.values):
            raise ValueError("time function needs one value per knot")
        if self.times[0] != 0.0:
            raise ValueError("first knot must be at t = 0")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("knot times must be strictly increasing")
        arr = self.array
        if not np.all(np.isfinite(arr)):
            raise ValueError("time function values must be finite")
        if arr.ndim not in (1, 2):
            raise ValueError("values must be scalars or flat vectors")

    @classmethod
    def constant(cls, value) -> "TimeFunction":
        return cls.from_knots([(0.0, value)])

    @classmethod
    def from_knots(cls, knots) -> "TimeFunction":
        times, values = [], []
        for t, v in knots:
            times.append(float(t))
            if np.ndim(v) == 0:
                values.append(float(v))
            else:
                values.append(tuple(float(c) for c in v))
        return cls(tuple(times), tuple(values))

    @property
    def array(self) -> NDArray[np.float64]:
        return np.asarray(self.values, dtype=float)

    @property
    def size(self) -> int | None:
        """Vector length, or None for a scalar function."""
        arr = self.array
        return None if arr.ndim == 1 else arr.shape[1]

    def knots(self) -> list:
        return [[t, list(v) if isinstance(v, tuple) else v] for t, v in zip(self.times, self.values)]

    def __call__(self, t):
        # a knot time hit up to rounding (i * dt) counts as reached
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(np.asarray(self.times), t + _TIME_TOL * np.maximum(1.0, np.abs(t)), side="right") - 1
        return self.array[np.clip(idx, 0, None)]


def breakpoints(horizon: float, *functions: TimeFunction | None) -> NDArray[np.float64]:
    """Sorted union of knot times in [0, horizon) of the given functions."""
    pts = {0.0}
    for fn in functions:
        if fn is not None:
            pts.update(t for t in fn.times if t < horizon)
    return np.array(sorted(pts))


def _as_time_function(value, vector: bool, dim: int | None = None) -> TimeFunction:
    if isinstance(value, TimeFunction):
        fn = value
    else:
        v = value
        if vector and np.ndim(v) == 0 and dim is not None:
            v = [v] * dim
        fn = TimeFunction.constant(v)
    if vector and fn.size is None:
        if dim is None:
            raise ValueError("vector coefficient needs a dimension")
        fn = TimeFunction(fn.times, tuple((v,) * dim for v in fn.values))
    return fn


@dataclass(frozen=True)
class MarketSpec:
    """Market coefficients with sigma fixed to the identity.

    Only the coefficients used by ``drift`` need to be set: ``rate_R`` for the
    higher-rate case, ``impact_eps`` for the large investor, ``long_rate`` /
    ``short_rate`` for the long/short case and ``custom_drift`` for a
    user-supplied concave drift.  ``long_rate`` is the upper slope (charged on
    short positions q^-) and ``short_rate`` the lower slope (earned on q^+).
    """

    dim: int
    horizon: float
    drift: DriftCase
    rate_r: TimeFunction = field(default_factory=lambda: TimeFunction.constant(0.0))
    appreciation_b: TimeFunction | None = None
    rate_R: TimeFunction | None = None
    impact_eps: tuple[float, ...] | None = None
    long_rate: TimeFunction | None = None
    short_rate: TimeFunction | None = None
    custom_drift: Callable | None = None

    def __post_init__(self):
        set_ = lambda name, val: object.__setattr__(self, name, val)  # noqa: E731
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError("dim must be a positive integer")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        set_("drift", DriftCase(self.drift))
        set_("rate_r", _as_time_function(self.rate_r, vector=False))
        if self.rate_r.size is not None:
            raise ValueError("rate_r must be scalar-valued")
        if self.appreciation_b is not None:
            set_("appreciation_b", _as_time_function(self.appreciation_b, True, self.dim))
        if self.rate_R is not None:
            set_("rate_R", _as_time_function(self.rate_R, vector=False))
        for name in ("long_rate", "short_rate"):
            if getattr(self, name) is not None:
                set_(name, _as_time_function(getattr(self, name), True, self.dim))
        if self.impact_eps is not None:
            eps = np.broadcast_to(np.asarray(self.impact_eps, dtype=float), (self.dim,))
            set_("impact_eps", tuple(float(e) for e in eps))
        self._validate()

    def _validate(self):
        case = self.drift
        needs_b = case in (DriftCase.LINEAR, DriftCase.HIGHER_RATE, DriftCase.LARGE_INVESTOR)
        if needs_b and self.appreciation_b is None:
            raise ValueError(f"{case.value} drift needs appreciation_b")
        if self.appreciation_b is not None and self.appreciation_b.size != self.dim:
            raise ValueError("appreciation_b must have length dim")
        pts = breakpoints(self.horizon, self.rate_r, self.rate_R, self.long_rate, self.short_rate)
        if case is DriftCase.HIGHER_RATE:
            if self.dim != 1:
                raise ValueError("higher-rate drift is one-dimensional")
            if self.rate_R is None:
                raise ValueError("higher-rate drift needs rate_R")
            if np.any(self.rate_R(pts) < self.rate_r(pts)):
                raise ValueError("borrowing rate R must be >= r at all times")
        if case is DriftCase.LARGE_INVESTOR:
            if self.impact_eps is None:
                raise ValueError("large-investor drift needs impact_eps")
            if min(self.impact_eps) < 0:
                raise ValueError("impact_eps must be nonnegative")
        if case is DriftCase.LONG_SHORT:
            if self.long_rate is None or self.short_rate is None:
                raise ValueError("long-short drift needs long_rate and short_rate")
            if self.long_rate.size != self.dim or self.short_rate.size != self.dim:
                raise ValueError("long/short rates must have length dim")
            if np.any(self.long_rate(pts) < self.short_rate(pts)):
                raise ValueError("long_rate must be >= short_rate componentwise")
        if case is DriftCase.CUSTOM_CONCAVE:
            if self.custom_drift is None:
                raise ValueError("custom-concave drift needs custom_drift")
            check_concave(self, n_samples=200, seed=0)

    @property
    def eps(self) -> NDArray[np.float64]:
        return np.asarray(self.impact_eps if self.impact_eps is not None else (0.0,) * self.dim)

    def time_functions(self) -> list[TimeFunction]:
        fns = [self.rate_r, self.appreciation_b, self.rate_R, self.long_rate, self.short_rate]
        return [f for f in fns if f is not None]


@dataclass(frozen=True)
class PreferenceSpec:
    """Power utility exponent ``alpha`` and K-ignorance bound ``K``."""

    alpha: float
    K: tuple[float, ...]

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        K = tuple(float(k) for k in np.atleast_1d(np.asarray(self.K, dtype=float)))
        if any(k < 0 or not math.isfinite(k) for k in K):
            raise ValueError("K must be finite and nonnegative")
        object.__setattr__(self, "K", K)

    @property
    def dim(self) -> int:
        return len(self.K)

    @property
    def K_array(self) -> NDArray[np.float64]:
        return np.asarray(self.K)


@dataclass(frozen=True)
class ConjugatePoint:
    mu: float
    nu: tuple[float, ...]
    value: float


@dataclass(frozen=True)
class GridSpec:
    """Box [-half_width, half_width] per coordinate sampled with ``step``."""

    half_width: float = 10.0
    step: float = 0.01
    growth_margin: float = 1e-6

    def axis(self) -> NDArray[np.float64]:
        n = int(round(self.half_width / self.step))
        if n < 1:
            raise ValueError("empty grid")
        return np.arange(-n, n + 1) * self.step


def _check_time(spec: MarketSpec, t) -> None:
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < -_TIME_TOL) or np.any(t_arr > spec.horizon + _TIME_TOL):
        raise ValueError(f"t outside [0, {spec.horizon}]")


def _check_dim(q: NDArray, dim: int, name: str = "q") -> None:
    if q.ndim == 0 or q.shape[-1] != dim:
        raise ValueError(f"{name} must have trailing dimension {dim}")


def drift_eval(spec: MarketSpec, t: float, x: ArrayLike, q: ArrayLike):
    """Evaluate b(t, x, q); broadcasts over leading axes of ``x`` and ``q``."""
    _check_time(spec, t)
    x = np.asarray(x, dtype=float)
    q = np.asarray(q, dtype=float)
    _check_dim(q, spec.dim)
    r = float(spec.rate_r(t))
    case = spec.drift
    if case is DriftCase.CUSTOM_CONCAVE:
        out = np.asarray(spec.custom_drift(t, x, q), dtype=float)
    elif case is DriftCase.LONG_SHORT:
        out = r * x + np.maximum(q, 0.0) @ spec.short_rate(t) - np.maximum(-q, 0.0) @ spec.long_rate(t)
    else:
        excess = spec.appreciation_b(t) - r
        out = r * x + q @ excess
        if case is DriftCase.HIGHER_RATE:
            R = float(spec.rate_R(t))
            out = out - (R - r) * np.maximum(q.sum(axis=-1) - x, 0.0)
        elif case is DriftCase.LARGE_INVESTOR:
            out = out - np.abs(q) @ spec.eps
    return float(out) if out.ndim == 0 else out


def drift_conjugate(spec: MarketSpec, t: float, mu: float, nu: ArrayLike, atol: float = 1e-12) -> float:
    """Closed-form b~(t, mu, nu): 0 on the effective domain, ``INF`` outside."""
    _check_time(spec, t)
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    _check_dim(nu, spec.dim, "nu")
    r = float(spec.rate_r(t))
    case = spec.drift
    if case is DriftCase.CUSTOM_CONCAVE:
        raise UseNumericConjugate("custom drift has no closed-form conjugate; use drift_conjugate_numeric")
    if case is DriftCase.LINEAR:
        inside = abs(mu - r) <= atol and np.all(np.abs(nu - (spec.appreciation_b(t) - r)) <= atol)
    elif case is DriftCase.HIGHER_RATE:
        R = float(spec.rate_R(t))
        b = float(spec.appreciation_b(t)[0])
        inside = r - atol <= mu <= R + atol and abs(mu + nu[0] - b) <= atol
    elif case is DriftCase.LARGE_INVESTOR:
        # {mu = r, nu = b - r - delta, |delta| <= eps}
        delta = spec.appreciation_b(t) - r - nu
        inside = abs(mu - r) <= atol and np.all(np.abs(delta) <= spec.eps + atol)
    else:
        inside = (
            abs(mu - r) <= atol
            and np.all(nu >= spec.short_rate(t) - atol)
            and np.all(nu <= spec.long_rate(t) + atol)
        )
    return 0.0 if inside else INF


def conjugate_point(spec: MarketSpec, t: float, mu: float, nu: ArrayLike) -> ConjugatePoint:
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    return ConjugatePoint(float(mu), tuple(nu.tolist()), drift_conjugate(spec, t, mu, nu))


def lipschitz_constant(spec: MarketSpec) -> float:
    """Lipschitz constant C1 of (x, q) -> b(t, x, q) w.r.t. |dx| + ||dq||, sup over t.

    Computed from the coefficients; for a custom drift it is estimated from
    finite-difference slopes on a unit-spaced sample grid.
    """
    case = spec.drift
    if case is DriftCase.CUSTOM_CONCAVE:
        return _estimate_lipschitz(spec)
    pts = breakpoints(spec.horizon, *spec.time_functions())
    best = 0.0
    for t in pts:
        r = float(spec.rate_r(t))
        if case is DriftCase.LINEAR:
            mu_max, nu_max = abs(r), np.linalg.norm(spec.appreciation_b(t) - r)
        elif case is DriftCase.HIGHER_RATE:
            R = float(spec.rate_R(t))
            b = float(spec.appreciation_b(t)[0])
            mu_max, nu_max = max(abs(r), abs(R)), max(abs(b - r), abs(b - R))
        elif case is DriftCase.LARGE_INVESTOR:
            mu_max = abs(r)
            nu_max = np.linalg.norm(np.abs(spec.appreciation_b(t) - r) + spec.eps)
        else:
            mu_max = abs(r)
            nu_max = np.linalg.norm(np.maximum(np.abs(spec.long_rate(t)), np.abs(spec.short_rate(t))))
        best = max(best, mu_max, float(nu_max))
    return best


def _estimate_lipschitz(spec: MarketSpec, n: int = 2000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, spec.horizon, n)
    z1 = rng.uniform(-5, 5, (n, spec.dim + 1))
    z2 = z1 + rng.normal(0, 1e-3, z1.shape)
    best = 0.0
    for i in range(n):
        b1 = drift_eval(spec, t[i], z1[i, 0], z1[i, 1:])
        b2 = drift_eval(spec, t[i], z2[i, 0], z2[i, 1:])
        dist = abs(z1[i, 0] - z2[i, 0]) + np.linalg.norm(z1[i, 1:] - z2[i, 1:])
        best = max(best, abs(b1 - b2) / dist)
    return float(best)


def check_concave(spec: MarketSpec, n_samples: int = 200, seed: int = 0, tol: float = 1e-9,
                  box: float = 10.0) -> None:
    """Midpoint test of concavity of (x, q) -> b(t, x, q) at random points.

    Raises ValueError on the first violation.
    """
    rng = np.random.default_rng(seed)
    for _ in range(n_samples):
        t = rng.uniform(0, spec.horizon)
        x1, x2 = rng.uniform(-box, box, 2)
        q1, q2 = rng.uniform(-box, box, (2, spec.dim))
        mid = drift_eval(spec, t, 0.5 * (x1 + x2), 0.5 * (q1 + q2))
        avg = 0.5 * (drift_eval(spec, t, x1, q1) + drift_eval(spec, t, x2, q2))
        if mid < avg - tol:
            raise ValueError(f"drift is not concave at t={t:.4g}: midpoint {mid} < average {avg}")


class NumericConjugate:
    """Grid oracle for b~ at a fixed time.

    Samples b(t, x, q) once on the (x, q) grid; each query then maximizes the
    objective b - x mu - q' nu over the samples.  A query is reported as
    ``INF`` when the best boundary value beats the best interior value by more
    than ``grid.growth_margin``: a concave objective that is bounded above
    peaks inside a large enough box, an unbounded one climbs to the boundary.
    """

    max_points = 50_000_000

    def __init__(self, spec: MarketSpec, t: float, grid: GridSpec = GridSpec()):
        _check_time(spec, t)
        axis = grid.axis()
        n_points = axis.size ** (spec.dim + 1)
        if n_points > self.max_points:
            raise ValueError(f"grid has {n_points} points; use a coarser step or smaller box")
        self.grid = grid
        self.dim = spec.dim
        mesh = np.meshgrid(*([axis] * (spec.dim + 1)), indexing="ij")
        self.x = mesh[0].ravel()
        self.q = np.stack([m.ravel() for m in mesh[1:]], axis=-1)
        self.values = np.asarray(drift_eval(spec, t, self.x, self.q), dtype=float)
        edge = axis[-1]
        coords = np.column_stack([self.x, self.q])
        self.boundary = np.any(np.abs(coords) >= edge, axis=1)

    def __call__(self, mu: float, nu: ArrayLike) -> float:
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        _check_dim(nu, self.dim, "nu")
        obj = self.values - self.x * mu - self.q @ nu
        interior = obj[~self.boundary].max()
        boundary = obj[self.boundary].max()
        if boundary > interior + self.grid.growth_margin:
            return INF
        return float(max(interior, boundary))


def drift_conjugate_numeric(spec: MarketSpec, t: float, mu: float, nu: ArrayLike,
                            grid: GridSpec = GridSpec()) -> float:
    """Brute-force grid supremum of b(t, x, q) - x mu - q' nu."""
    return NumericConjugate(spec, t, grid)(mu, nu)


def effective_domain_grid(spec: MarketSpec, t: float, step: float = 0.01):
    """Points (mu, nu) covering the effective domain of b~(t, ., .), vertices included.

    Returns ``(mu, nu)`` with shapes (k,) and (k, d).
    """
    _check_time(spec, t)
    r = float(spec.rate_r(t))
    d = spec.dim

    def segment(lo, hi):
        n = max(1, int(math.ceil((hi - lo) / step))) if hi > lo else 0
        return np.linspace(lo, hi, n + 1)

    def box(lo, hi):
        axes = [segment(a, b) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    case = spec.drift
    if case is DriftCase.LINEAR:
        nu = (spec.appreciation_b(t) - r)[None, :]
        mu = np.array([r])
    elif case is DriftCase.HIGHER_RATE:
        mu = segment(r, float(spec.rate_R(t)))
        nu = (float(spec.appreciation_b(t)[0]) - mu)[:, None]
    elif case is DriftCase.LARGE_INVESTOR:
        delta = box(-spec.eps, spec.eps)
        nu = spec.appreciation_b(t) - r - delta
        mu = np.full(len(nu), r)
    elif case is DriftCase.LONG_SHORT:
        nu = box(spec.short_rate(t), spec.long_rate(t))
        mu = np.full(len(nu), r)
    else:
        raise UseNumericConjugate("custom drift: supply a dual grid to duality_roundtrip")
    if len(mu) == 0:
        raise ValueError("empty effective-domain grid")
    return mu, nu.reshape(len(mu), d)


def duality_roundtrip(spec: MarketSpec, t: float, x: float, q: ArrayLike, step: float = 0.01,
                      dual_grid: GridSpec | None = None, primal_grid: GridSpec | None = None) -> float:
    """inf over the effective domain of b~(t, mu, nu) + x mu + q' nu.

    Named cases use the closed-form conjugate on ``effective_domain_grid``.  A
    custom drift needs ``dual_grid`` (box of (mu, nu) candidates) and
    ``primal_grid`` (grid of the numeric conjugate).
    """
    q = np.atleast_1d(np.asarray(q, dtype=float))
    _check_dim(q, spec.dim)
    if spec.drift is DriftCase.CUSTOM_CONCAVE:
        if dual_grid is None or primal_grid is None:
            raise UseNumericConjugate("custom drift needs dual_grid and primal_grid")
        oracle = NumericConjugate(spec, t, primal_grid)
        axis = dual_grid.axis()
        mesh = np.meshgrid(*([axis] * (spec.dim + 1)), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        best = INF
        for p in pts:
            val = oracle(p[0], p[1:])
            if val < INF:
                best = min(best, val + x * p[0] + q @ p[1:])
        if best == INF:
            raise ValueError("empty effective-domain grid")
        return float(best)
    mu, nu = effective_domain_grid(spec, t, step)
    return float(np.min(x * mu + nu @ q))


# --- preferences -----------------------------------------------------------


def utility(pref: PreferenceSpec, x: ArrayLike):
    """u(x) = x^alpha / alpha."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("utility is defined for x >= 0")
    out = x**pref.alpha / pref.alpha
    return float(out) if out.ndim == 0 else out


def marginal_utility(pref: PreferenceSpec, x: ArrayLike):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("marginal utility is defined for x > 0")
    out = x ** (pref.alpha - 1.0)
    return float(out) if out.ndim == 0 else out


def marginal_inverse(pref: PreferenceSpec, zeta: ArrayLike):
    """I(zeta) = zeta^(1/(alpha-1)), the inverse of u'."""
    zeta = np.asarray(zeta, dtype=float)
    if np.any(zeta <= 0):
        raise ValueError("zeta must be positive")
    out = zeta ** (1.0 / (pref.alpha - 1.0))
    return float(out) if out.ndim == 0 else out


def utility_conjugate(pref: PreferenceSpec, zeta: ArrayLike):
    """u~(zeta) = max_x [u(x) - zeta x] = ((1-alpha)/alpha) zeta^(alpha/(alpha-1))."""
    zeta = np.asarray(zeta, dtype=float)
    if np.any(zeta <= 0):
        raise ValueError("zeta must be positive")
    a = pref.alpha
    out = (1.0 - a) / a * zeta ** (a / (a - 1.0))
    return float(out) if out.ndim == 0 else out


def driver_eval(pref: PreferenceSpec, t: float, y: float, z: ArrayLike):
    """K-ignorance driver f(t, y, z) = -K'|z|."""
    z = np.asarray(z, dtype=float)
    _check_dim(z, pref.dim, "z")
    out = -(np.abs(z) @ pref.K_array)
    return float(out) if np.ndim(out) == 0 else out


def driver_domain_contains(pref: PreferenceSpec, beta: ArrayLike, gamma: ArrayLike, atol: float = 0.0) -> bool:
    """Membership of (beta, gamma) in the domain of F, i.e. beta = 0 and |gamma| <= K."""
    gamma = np.asarray(gamma, dtype=float)
    _check_dim(gamma, pref.dim, "gamma")
    beta = np.asarray(beta, dtype=float)
    return bool(np.all(np.abs(beta) <= atol) and np.all(np.abs(gamma) <= pref.K_array + atol))


def driver_conjugate(pref: PreferenceSpec, t: float, beta: ArrayLike, gamma: ArrayLike) -> float:
    """F(t, beta, gamma): 0 on {beta = 0, |gamma| <= K}, ``INF`` elsewhere."""
    return 0.0 if driver_domain_contains(pref, beta, gamma) else INF


def vector(values: Sequence[float] | float, dim: int) -> NDArray[np.float64]:
    return np.broadcast_to(np.asarray(values, dtype=float), (dim,)).copy()
