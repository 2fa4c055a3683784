"""Dual minimizers, the deterministic Y~ curve, zeta-hat and the saddle point.

With power utility u(x) = x^a / a, deterministic coefficients and the
K-ignorance driver, every drift case reduces to the same pointwise problem.
Writing c = a / (2 (1-a)^2), the generator is

    g(t, z) = min  c |nu + gamma|^2 + a/(1-a) mu
                   + z'(gamma + a nu)/(1-a) + |z|^2 / 2

over gamma in [-K, K] and (mu, nu) in the conjugate domain of the drift.
Since Z~ = 0 for deterministic coefficients, the solver works at z = 0 and
E[N^(a/(a-1)) Gamma^(1/(1-a))] = exp(Y~_0) with Y~_t = int_t^T g(s, 0) ds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .engine import McEstimate, PathBatch, TimeGrid, stoch_exp_Gamma, stoch_exp_N
from .market import (
    DriftCase,
    MarketSpec,
    PreferenceSpec,
    breakpoints,
    utility,
)

_KNOT_TOL = 1e-12


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")


def _quad_coef(alpha: float) -> float:
    return alpha / (2.0 * (1.0 - alpha) ** 2)


def gamma_hat_linear(b_t: ArrayLike, K: ArrayLike, alpha: float, z: ArrayLike) -> NDArray[np.float64]:
    """Clip -b - ((1-a)/a) z to the box [-K, K]."""
    b_t, K, z = (np.asarray(v, dtype=float) for v in (b_t, K, z))
    return np.clip(-b_t - (1.0 - alpha) / alpha * z, -K, K)


def _box_qp_2d(c, p, lu, lv, u_lo, u_hi, v_lo, v_hi):
    """Exact minimum of c (p + u - v)^2 + lu u + lv v over a box, vectorized.

    The objective is convex and either strictly monotone along (1, 1) or
    constant along it, so a minimizer lies on the boundary.  Candidates are
    the corners and the clipped stationary point of each edge.
    """
    p, lu, lv, u_lo, u_hi, v_lo, v_hi = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (p, lu, lv, u_lo, u_hi, v_lo, v_hi)))
    cand_u, cand_v = [], []
    for v in (v_lo, v_hi):
        cand_u += [u_lo, u_hi, np.clip(v - p - lu / (2 * c), u_lo, u_hi)]
        cand_v += [v, v, v]
    for u in (u_lo, u_hi):
        cand_u.append(u)
        cand_v.append(np.clip(p + u - lv / (2 * c), v_lo, v_hi))
    U = np.stack(cand_u)
    V = np.stack(cand_v)
    obj = c * (p + U - V) ** 2 + lu * U + lv * V
    best = np.argmin(obj, axis=0)
    take = lambda a: np.take_along_axis(a, best[None], axis=0)[0]  # noqa: E731
    return take(obj), take(U), take(V)


@dataclass(frozen=True)
class GeneratorPoint:
    value: float
    gamma: NDArray[np.float64]
    mu: float
    nu: NDArray[np.float64]
    partner: NDArray[np.float64] | float | None


def _z_vec(z, dim):
    return np.broadcast_to(np.asarray(z, dtype=float), (dim,))


def _finish(alpha, nu, gamma, mu, z):
    c = _quad_coef(alpha)
    val = c * np.sum((nu + gamma) ** 2) + alpha / (1 - alpha) * mu
    val += z @ (gamma + alpha * nu) / (1 - alpha) + 0.5 * z @ z
    return float(val)


def g_linear(t: float, z: ArrayLike, spec: MarketSpec, pref: PreferenceSpec) -> GeneratorPoint:
    _check_alpha(pref.alpha)
    a = pref.alpha
    z = _z_vec(z, spec.dim)
    r = float(spec.rate_r(t))
    nu = spec.appreciation_b(t) - r
    gamma = gamma_hat_linear(nu, pref.K_array, a, z)
    return GeneratorPoint(_finish(a, nu, gamma, r, z), gamma, r, nu, None)


def g_higher(t: float, z: ArrayLike, spec: MarketSpec, pref: PreferenceSpec) -> GeneratorPoint:
    """Minimize over mu in [r, R], gamma in [-K, K] with nu = b - mu (d = 1)."""
    _check_alpha(pref.alpha)
    if spec.dim != 1:
        raise ValueError("higher-rate generator is one-dimensional")
    a = pref.alpha
    z = _z_vec(z, 1)
    r, R = float(spec.rate_r(t)), float(spec.rate_R(t))
    if r > R:
        raise ValueError("r_t > R_t")
    b = float(spec.appreciation_b(t)[0])
    K = pref.K[0]
    zz = float(z[0])
    _, gamma, mu = _box_qp_2d(_quad_coef(a), b, zz / (1 - a), a / (1 - a) * (1 - zz), -K, K, r, R)
    gamma = np.array([float(gamma)])
    mu = float(mu)
    nu = np.array([b - mu])
    return GeneratorPoint(_finish(a, nu, gamma, mu, z), gamma, mu, nu, mu)


def _large_tie(p, K, eps):
    """Deterministic minimizer of (p + gamma - delta)^2 on the box at z = 0."""
    delta = np.clip(p, -eps, eps)
    gamma = delta - p
    hi, lo = p > K + eps, p < -(K + eps)
    delta = np.where(hi, eps, np.where(lo, -eps, delta))
    gamma = np.where(hi, -K, np.where(lo, K, gamma))
    return gamma, delta


def g_large(t: float, z: ArrayLike, spec: MarketSpec, pref: PreferenceSpec) -> GeneratorPoint:
    """Minimize over gamma in [-K, K], delta in [-eps, eps] with nu = b - r - delta."""
    _check_alpha(pref.alpha)
    a = pref.alpha
    z = _z_vec(z, spec.dim)
    r = float(spec.rate_r(t))
    p = spec.appreciation_b(t) - r
    K, eps = pref.K_array, spec.eps
    if np.all(z == 0):
        gamma, delta = _large_tie(p, K, eps)
    else:
        _, gamma, delta = _box_qp_2d(_quad_coef(a), p, z / (1 - a), -a * z / (1 - a), -K, K, -eps, eps)
    nu = p - delta
    return GeneratorPoint(_finish(a, nu, gamma, r, z), gamma, r, nu, delta)


def g_long_short(t: float, z: ArrayLike, spec: MarketSpec, pref: PreferenceSpec) -> GeneratorPoint:
    """Minimize over gamma in [-K, K], nu in [short_rate, long_rate], mu = r."""
    _check_alpha(pref.alpha)
    a = pref.alpha
    z = _z_vec(z, spec.dim)
    r = float(spec.rate_r(t))
    lo, hi = spec.short_rate(t), spec.long_rate(t)
    K = pref.K_array
    if np.all(z == 0):
        nu = np.clip(0.0, lo, hi)
        gamma = np.clip(-nu, -K, K)
    else:
        # substitute v = -nu so the objective has the c (u - v)^2 form
        _, gamma, v = _box_qp_2d(_quad_coef(a), 0.0, z / (1 - a), -a * z / (1 - a), -K, K, -hi, -lo)
        nu = -v
    return GeneratorPoint(_finish(a, nu, gamma, r, z), gamma, r, nu, nu)


_GENERATORS = {
    DriftCase.LINEAR: g_linear,
    DriftCase.HIGHER_RATE: g_higher,
    DriftCase.LARGE_INVESTOR: g_large,
    DriftCase.LONG_SHORT: g_long_short,
}


def generator(spec: MarketSpec, pref: PreferenceSpec, t: float, z: ArrayLike = 0.0) -> GeneratorPoint:
    if pref.dim != spec.dim:
        raise ValueError("K must have length dim")
    try:
        fn = _GENERATORS[spec.drift]
    except KeyError:
        raise ValueError(f"no generator for drift case {spec.drift.value}") from None
    return fn(t, z, spec, pref)


@dataclass(frozen=True)
class GeneratorCurve:
    """Generator at z = 0 and its minimizers on each step of a grid (left knot)."""

    case: DriftCase
    grid: TimeGrid
    value: NDArray[np.float64]  # (steps,)
    gamma: NDArray[np.float64]  # (steps, d)
    mu: NDArray[np.float64]  # (steps,)
    nu: NDArray[np.float64]  # (steps, d)
    partner: NDArray[np.float64] | None


def _segments(spec: MarketSpec, grid: TimeGrid):
    """Distinct coefficient segments and the segment of every step."""
    starts = breakpoints(spec.horizon, *spec.time_functions())
    t_left = grid.knots[:-1]
    seg = np.searchsorted(starts, t_left + _KNOT_TOL * spec.horizon, side="right") - 1
    return starts, seg


def generator_curve(spec: MarketSpec, pref: PreferenceSpec, grid: TimeGrid) -> GeneratorCurve:
    if abs(grid.horizon - spec.horizon) > 1e-12 * spec.horizon:
        raise ValueError("grid horizon differs from the market horizon")
    starts, seg = _segments(spec, grid)
    points = [generator(spec, pref, float(s)) for s in starts]
    pick = lambda f: np.array([f(points[i]) for i in range(len(points))])[seg]  # noqa: E731
    partner = None
    if spec.drift is not DriftCase.LINEAR:
        partner = pick(lambda p: p.partner)
        if spec.drift is DriftCase.HIGHER_RATE:
            partner = partner.reshape(-1)
    return GeneratorCurve(
        case=spec.drift,
        grid=grid,
        value=pick(lambda p: p.value),
        gamma=pick(lambda p: p.gamma).reshape(grid.steps, spec.dim),
        mu=pick(lambda p: p.mu),
        nu=pick(lambda p: p.nu).reshape(grid.steps, spec.dim),
        partner=partner,
    )


@dataclass(frozen=True)
class YTildeCurve:
    knots: NDArray[np.float64]
    values: NDArray[np.float64]  # (steps + 1,), values[-1] == 0

    @property
    def initial(self) -> float:
        return float(self.values[0])


def integrate_y_tilde(g: ArrayLike, grid: TimeGrid) -> YTildeCurve:
    """Y~_{t_i} = sum_{j >= i} g_j dt (left rule), Y~_T = 0."""
    g = np.asarray(g, dtype=float)
    if g.shape != (grid.steps,):
        raise ValueError("one generator value per step is required")
    tail = np.concatenate([np.cumsum((g * grid.dt)[::-1])[::-1], [0.0]])
    return YTildeCurve(grid.knots, tail)


def zeta_hat_closed(x: float, alpha: float, E_dual: float) -> float:
    """zeta-hat = x^(a-1) E^(1-a)."""
    _check_alpha(alpha)
    if not (x > 0 and E_dual > 0):
        raise ValueError("x and E_dual must be positive")
    return float(x ** (alpha - 1.0) * E_dual ** (1.0 - alpha))


def _mean(value) -> float:
    return value.mean if isinstance(value, McEstimate) else float(value)


def zeta_hat_bisect(x: float, v_tilde_prime: Callable[[float], float | McEstimate], zeta0: float = 1.0,
                    rtol: float = 1e-10, max_doublings: int = 60, max_iter: int = 400) -> float:
    """Root of V~'(zeta) + x = 0 by bracketing and bisection.

    ``v_tilde_prime`` may return a float or an ``McEstimate`` (its mean is
    used).  V~' must be nondecreasing.  Use rtol around 1e-4 for MC input.
    """
    if not x > 0:
        raise ValueError("x must be positive")
    h = lambda z: _mean(v_tilde_prime(z)) + x  # noqa: E731
    lo, hi = zeta0, zeta0
    h_lo = h(lo)
    for _ in range(max_doublings):
        if h_lo <= 0:
            break
        hi, lo = lo, lo / 2.0
        h_lo = h(lo)
    else:
        raise ValueError("no sign change: V~'(zeta) + x stays positive")
    h_hi = h(hi) if hi != lo else h_lo
    for _ in range(max_doublings):
        if h_hi >= 0:
            break
        lo, hi = hi, hi * 2.0
        h_hi = h(hi)
    else:
        raise ValueError("no sign change: V~'(zeta) + x stays negative")
    if h_lo == 0:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if hi - lo < rtol * mid:
            return mid
        if h(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def propagated_root_se(v_tilde_prime: Callable[[float], McEstimate], zeta: float, rel_step: float = 1e-3) -> float:
    """SE of the root: SE of V~'(zeta) divided by the slope of its mean."""
    est = v_tilde_prime(zeta)
    up = _mean(v_tilde_prime(zeta * (1 + rel_step)))
    dn = _mean(v_tilde_prime(zeta * (1 - rel_step)))
    slope = (up - dn) / (2 * rel_step * zeta)
    if slope <= 0:
        raise ValueError("V~' is not increasing around the root")
    return est.std_error / slope


def v_tilde(pref: PreferenceSpec, zeta: ArrayLike, E_dual: float):
    """V~(zeta) = ((1-a)/a) zeta^(a/(a-1)) E."""
    a = pref.alpha
    out = (1 - a) / a * np.asarray(zeta, dtype=float) ** (a / (a - 1)) * E_dual
    return float(out) if np.ndim(out) == 0 else out


def v_tilde_prime_closed(pref: PreferenceSpec, E_dual: float) -> Callable[[float], float]:
    """zeta -> V~'(zeta) = -zeta^(1/(a-1)) E."""
    a = pref.alpha
    return lambda zeta: -(zeta ** (1.0 / (a - 1.0))) * E_dual


@dataclass(frozen=True)
class DualPoint:
    x: float
    zeta_hat: float
    curve: GeneratorCurve
    y_tilde: YTildeCurve
    E_dual: float
    dual_value: float

    @property
    def gamma_hat(self) -> NDArray[np.float64]:
        return self.curve.gamma

    @property
    def partner_hat(self):
        return self.curve.partner


def solve_dual(spec: MarketSpec, pref: PreferenceSpec, x: float, grid: TimeGrid) -> DualPoint:
    """Deterministic route: generator curve, Y~, E = exp(Y~_0), closed-form zeta-hat."""
    if not x > 0:
        raise ValueError("x must be positive")
    curve = generator_curve(spec, pref, grid)
    y = integrate_y_tilde(curve.value, grid)
    E = math.exp(y.initial)
    zeta = zeta_hat_closed(x, pref.alpha, E)
    value = v_tilde(pref, zeta, E) + zeta * x
    return DualPoint(x=x, zeta_hat=zeta, curve=curve, y_tilde=y, E_dual=E, dual_value=value)


@dataclass(frozen=True)
class SaddlePoint:
    dual: DualPoint
    xi_hat: NDArray[np.float64]
    log_N_T: NDArray[np.float64]
    log_Gamma_T: NDArray[np.float64]


def terminal_logs(dual: DualPoint, batch: PathBatch, workers: int = 1):
    """log N_{0,T} and log Gamma_{0,T} under the optimal controls, per path."""
    c = dual.curve
    if batch.grid != c.grid:
        raise ValueError("batch grid differs from the dual grid")
    end = [batch.grid.steps]
    log_N = stoch_exp_N(batch, c.mu, c.nu, knots=end, log=True, workers=workers)[:, 0]
    log_G = stoch_exp_Gamma(batch, 0.0, c.gamma, knots=end, log=True, workers=workers)[:, 0]
    return log_N, log_G


def xi_from_logs(pref: PreferenceSpec, zeta: float, log_N, log_G) -> NDArray[np.float64]:
    """I(zeta N / Gamma) computed in log space."""
    return np.exp((math.log(zeta) + np.asarray(log_N) - np.asarray(log_G)) / (pref.alpha - 1.0))


def assemble_saddle(spec: MarketSpec, pref: PreferenceSpec, x: float, batch: PathBatch,
                    dual: DualPoint | None = None, workers: int = 1) -> SaddlePoint:
    if dual is None:
        dual = solve_dual(spec, pref, x, batch.grid)
    log_N, log_G = terminal_logs(dual, batch, workers)
    xi = xi_from_logs(pref, dual.zeta_hat, log_N, log_G)
    return SaddlePoint(dual=dual, xi_hat=xi, log_N_T=log_N, log_Gamma_T=log_G)


def optimal_wealth(pref: PreferenceSpec, dual: DualPoint, batch: PathBatch, knots=None, workers: int = 1):
    """X-hat_t = x exp(-int_0^t g) (Gamma_t / N_t)^(1/(1-a)) at the selected knots.

    Returns ``(knots, X)`` with X of shape (n_paths, n_knots).  The optimal
    position is X-hat (nu-hat + gamma-hat) / (1 - a) on each step.
    """
    c = dual.curve
    a = pref.alpha
    idx = np.arange(batch.grid.steps + 1) if knots is None else np.atleast_1d(np.asarray(knots))
    log_N = stoch_exp_N(batch, c.mu, c.nu, knots=idx, log=True, workers=workers)
    log_G = stoch_exp_Gamma(batch, 0.0, c.gamma, knots=idx, log=True, workers=workers)
    y = dual.y_tilde.values
    return idx, dual.x * np.exp(y[idx] - y[0] + (log_G - log_N) / (1 - a))


def optimal_fraction(pref: PreferenceSpec, curve: GeneratorCurve) -> NDArray[np.float64]:
    """Fraction of wealth held in each asset on each step, (nu-hat + gamma-hat)/(1-a)."""
    return (curve.nu + curve.gamma) / (1.0 - pref.alpha)


def exact_y_tilde(spec: MarketSpec, pref: PreferenceSpec, t: float) -> float:
    """int_t^T g(s, 0) ds integrated exactly over piecewise-constant coefficients."""
    if not -_KNOT_TOL <= t <= spec.horizon + _KNOT_TOL:
        raise ValueError(f"t outside [0, {spec.horizon}]")
    starts = breakpoints(spec.horizon, *spec.time_functions())
    ends = np.append(starts[1:], spec.horizon)
    total = 0.0
    for s, e in zip(starts, ends):
        lo = max(s, t)
        if e > lo:
            total += generator(spec, pref, float(s)).value * (e - lo)
    return total


@dataclass(frozen=True)
class LargeInvestorSolution:
    """Closed-form dynamic solution for the large-investor drift."""

    spec: MarketSpec
    pref: PreferenceSpec
    t: float
    x: float
    v: float

    def excess(self, s: float) -> NDArray[np.float64]:
        """b + gamma-hat - delta-hat - r at time s."""
        pt = generator(self.spec, self.pref, s)
        return pt.nu + pt.gamma

    def value(self, s: float, x: ArrayLike):
        """v(s, x) = u(x) exp((1-a) Y~_s)."""
        return utility(self.pref, x) * math.exp((1 - self.pref.alpha) * exact_y_tilde(self.spec, self.pref, s))

    def pi_hat(self, s: float, X: ArrayLike) -> NDArray[np.float64]:
        X = np.asarray(X, dtype=float)
        return X[..., None] * self.excess(s) / (1 - self.pref.alpha)

    def Z_hat(self, s: float, X: ArrayLike) -> NDArray[np.float64]:
        a = self.pref.alpha
        X = np.asarray(X, dtype=float)
        scale = X**a * math.exp((1 - a) * exact_y_tilde(self.spec, self.pref, s)) / (1 - a)
        return scale[..., None] * self.excess(s)

    def X_hat(self, batch: PathBatch, knots=None, workers: int = 1):
        """Optimal wealth from (t, x) along the batch paths; the batch grid starts at t."""
        if self.t != 0.0:
            raise NotImplementedError("pathwise wealth is available from t = 0")
        dual = solve_dual(self.spec, self.pref, self.x, batch.grid)
        return optimal_wealth(self.pref, dual, batch, knots, workers)


def large_investor_closed_form(spec: MarketSpec, pref: PreferenceSpec, t: float, x: float) -> LargeInvestorSolution:
    if spec.drift is not DriftCase.LARGE_INVESTOR:
        raise ValueError("closed form applies to the large-investor drift only")
    if not x > 0:
        raise ValueError("x must be positive")
    v = utility(pref, x) * math.exp((1 - pref.alpha) * exact_y_tilde(spec, pref, t))
    return LargeInvestorSolution(spec=spec, pref=pref, t=t, x=x, v=v)


def expected_utility_dual(pref: PreferenceSpec, dual: DualPoint) -> float:
    """E[Gamma-hat u(xi-hat)] implied by the closed forms; equals the dual value."""
    a = pref.alpha
    return dual.x**a / a * dual.E_dual ** (1 - a)


__all__ = [
    "DualPoint",
    "GeneratorCurve",
    "GeneratorPoint",
    "LargeInvestorSolution",
    "SaddlePoint",
    "YTildeCurve",
    "assemble_saddle",
    "exact_y_tilde",
    "expected_utility_dual",
    "g_higher",
    "g_large",
    "g_linear",
    "g_long_short",
    "gamma_hat_linear",
    "generator",
    "generator_curve",
    "integrate_y_tilde",
    "large_investor_closed_form",
    "optimal_fraction",
    "optimal_wealth",
    "propagated_root_se",
    "solve_dual",
    "terminal_logs",
    "v_tilde",
    "v_tilde_prime_closed",
    "xi_from_logs",
    "zeta_hat_bisect",
    "zeta_hat_closed",
]
