"""Executable checks of the duality results on desk-scale instances.

Monte Carlo checks use the 3-SE rule: a result passes when the measured value
is within max(tolerance, 3 * std_error) of the target (one-sided for
inequalities).  Comparisons that share paths use paired differences, so the
reported SE is the SE of the difference.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .engine import PathBatch, TimeGrid, estimate, euler_chunk, euler_wealth, path_map
from .market import DriftCase, MarketSpec, PreferenceSpec, utility
from .solver import (
    DualPoint,
    SaddlePoint,
    exact_y_tilde,
    g_higher,
    g_large,
    g_linear,
    generator,
    large_investor_closed_form,
    optimal_fraction,
    solve_dual,
    v_tilde,
    v_tilde_prime_closed,
    xi_from_logs,
    zeta_hat_bisect,
    zeta_hat_closed,
)

SE_MULTIPLIER = 3.0
ROUNDOFF = 1e-12
# pathwise Euler error allowed at dt = 5e-4 is 0.02; the bound scales as sqrt(dt)
PATHWISE_CONSTANT = 0.02 / math.sqrt(5e-4)


@dataclass(frozen=True)
class CheckResult:
    name: str
    measured: float
    target: float
    tolerance: float
    std_error: float | None
    passed: bool
    runtime_ms: int
    relation: str = "eq"  # "eq": |m - t| within band, "le": m <= t + band, "ge": m >= t - band

    def to_dict(self, timing: bool = True) -> dict:
        out = asdict(self)
        if not timing:
            out["runtime_ms"] = None
        return out


def judge(measured: float, target: float, tolerance: float, std_error: float | None = None,
          relation: str = "eq", se_multiplier: float = SE_MULTIPLIER) -> bool:
    band = tolerance
    if std_error is not None:
        band = max(band, se_multiplier * std_error)
    if not math.isfinite(measured):
        return False
    if relation == "eq":
        return abs(measured - target) <= band
    if relation == "le":
        return measured <= target + band
    if relation == "ge":
        return measured >= target - band
    raise ValueError(f"unknown relation {relation!r}")


def make_check(name, measured, target, tolerance, std_error=None, relation="eq", started=None,
               scale: float = 1.0) -> CheckResult:
    tol = tolerance * scale
    passed = judge(measured, target, tol, std_error, relation, SE_MULTIPLIER * scale)
    ms = 0 if started is None else int(round(1000 * (time.perf_counter() - started)))
    se = None if std_error is None else float(std_error)
    return CheckResult(name, float(measured), float(target), float(tol), se, bool(passed), ms, relation)


@dataclass(frozen=True)
class VerificationReport:
    scenario: dict
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self, timing: bool = True) -> dict:
        return {
            "scenario": self.scenario,
            "passed": self.passed,
            "checks": [c.to_dict(timing) for c in self.checks],
        }


def report(scenario: dict, checks: Sequence[CheckResult]) -> VerificationReport:
    return VerificationReport(scenario, tuple(sorted(checks, key=lambda c: c.name)))


# --- one streaming pass over the batch --------------------------------------


@dataclass(frozen=True)
class Controls:
    """Deterministic per-step controls (mu (n,), nu (n, d), gamma (n, d))."""

    mu: NDArray[np.float64]
    nu: NDArray[np.float64]
    gamma: NDArray[np.float64]


@dataclass(frozen=True)
class PathScan:
    knots: NDArray[np.int64]
    log_N: NDArray[np.float64]  # (n_controls, n_paths, n_knots)
    log_G: NDArray[np.float64]
    blocks: NDArray[np.float64] | None  # (n_paths, n_blocks, d) Brownian block sums


def scan_paths(batch: PathBatch, controls: Sequence[Controls], knots, n_blocks: int | None = None,
               workers: int = 1) -> PathScan:
    """log N and log Gamma at ``knots`` for each control set, plus block sums, in one pass."""
    grid = batch.grid
    n, d = grid.steps, batch.dim
    knots = np.asarray(sorted(set(int(k) for k in knots)), dtype=np.int64)
    if knots[0] < 0 or knots[-1] > n:
        raise ValueError("knot outside the grid")
    if n_blocks is not None and n % n_blocks:
        raise ValueError(f"{n} steps do not split into {n_blocks} blocks")
    nu = np.stack([np.broadcast_to(c.nu, (n, d)) for c in controls])  # (k, n, d)
    gam = np.stack([np.broadcast_to(c.gamma, (n, d)) for c in controls])
    mu = np.stack([np.broadcast_to(c.mu, (n,)) for c in controls])
    det_N = -np.cumsum((mu + 0.5 * np.sum(nu**2, axis=2)) * grid.dt, axis=1)
    det_G = -np.cumsum(0.5 * np.sum(gam**2, axis=2) * grid.dt, axis=1)
    pad = lambda a: np.concatenate([np.zeros((len(a), 1)), a], axis=1)[:, knots]  # noqa: E731
    det_N, det_G = pad(det_N), pad(det_G)
    edges = np.concatenate([[0], knots])
    n_ctrl = len(controls)
    vol = np.concatenate([-nu, gam], axis=0)  # (2k, n, d)

    def fn(_, incr):
        m = len(incr)
        sums = np.zeros((m, 2 * n_ctrl, len(knots)))
        for j in range(len(knots)):
            a, b = edges[j], edges[j + 1]
            if b > a:
                seg = incr[:, a:b, :].reshape(m, -1)
                sums[:, :, j] = seg @ vol[:, a:b, :].reshape(2 * n_ctrl, -1).T
        sums = np.cumsum(sums, axis=2)
        if n_blocks is None:
            return sums
        blk = incr.reshape(m, n_blocks, n // n_blocks, d).sum(axis=2)
        return sums, blk

    out = path_map(batch, fn, workers)
    sums, blocks = (out, None) if n_blocks is None else out
    log_N = np.moveaxis(sums[:, :n_ctrl], 1, 0) + det_N[:, None, :]
    log_G = np.moveaxis(sums[:, n_ctrl:], 1, 0) + det_G[:, None, :]
    return PathScan(knots, log_N, log_G, blocks)


def optimal_controls(dual: DualPoint) -> Controls:
    c = dual.curve
    return Controls(c.mu, c.nu, c.gamma)


def saddle_from_scan(pref: PreferenceSpec, dual: DualPoint, scan: PathScan, batch: PathBatch) -> SaddlePoint:
    if scan.knots[-1] != batch.grid.steps:
        raise ValueError("scan does not reach the terminal knot")
    log_N, log_G = scan.log_N[0, :, -1], scan.log_G[0, :, -1]
    xi = xi_from_logs(pref, dual.zeta_hat, log_N, log_G)
    return SaddlePoint(dual=dual, xi_hat=xi, log_N_T=log_N, log_Gamma_T=log_G)


# --- individual checks -----------------------------------------------------


def check_budget(saddle: SaddlePoint, batch: PathBatch, x: float, xi: NDArray | None = None,
                 scale: float = 1.0) -> CheckResult:
    """E[xi N_{0,T}] = x (the conjugate term vanishes on the optimal controls)."""
    t0 = time.perf_counter()
    xi = saddle.xi_hat if xi is None else np.asarray(xi)
    if len(xi) != batch.n_paths:
        raise ValueError("one terminal wealth per path is required")
    est = estimate(xi * np.exp(saddle.log_N_T))
    return make_check("budget_identity", est.mean, x, 0.0, est.std_error, "eq", t0, scale)


def check_no_gap(pref: PreferenceSpec, saddle: SaddlePoint, scale: float = 1.0) -> CheckResult:
    """Primal value E[Gamma-hat u(xi-hat)] against the dual value V~(zeta-hat) + zeta-hat x."""
    t0 = time.perf_counter()
    est = estimate(np.exp(saddle.log_Gamma_T) * utility(pref, saddle.xi_hat))
    return make_check("no_duality_gap", est.mean, saddle.dual.dual_value, 0.0, est.std_error, "eq", t0, scale)


def check_dual_expectation(pref: PreferenceSpec, saddle: SaddlePoint, scale: float = 1.0) -> CheckResult:
    """MC E[N^(a/(a-1)) Gamma^(1/(1-a))] against exp(Y~_0)."""
    t0 = time.perf_counter()
    a = pref.alpha
    est = estimate(np.exp(a / (a - 1) * saddle.log_N_T + saddle.log_Gamma_T / (1 - a)))
    return make_check("dual_expectation", est.mean, saddle.dual.E_dual, 0.0, est.std_error, "eq", t0, scale)


ZETA_FACTORS = (0.5, 0.8, 0.9, 1.1, 1.25, 2.0)


def check_zeta(pref: PreferenceSpec, dual: DualPoint, scale: float = 1.0) -> list[CheckResult]:
    """zeta-hat minimizes V~(zeta) + zeta x and is the root found by bisection."""
    t0 = time.perf_counter()
    x, z, E = dual.x, dual.zeta_hat, dual.E_dual
    obj = lambda s: v_tilde(pref, s, E) + s * x  # noqa: E731
    margin = min(obj(z * f) - obj(z) for f in ZETA_FACTORS)
    opt = make_check("zeta_optimality", margin, 0.0, 0.0, None, "ge", t0, scale)
    t1 = time.perf_counter()
    root = zeta_hat_bisect(x, v_tilde_prime_closed(pref, E), rtol=1e-10)
    closed = zeta_hat_closed(x, pref.alpha, E)
    rel = abs(root - closed) / closed
    bis = make_check("zeta_bisection", rel, 0.0, 1e-6, None, "eq", t1, scale)
    return [opt, bis]


def _schedule(rng, n_blocks: int, max_segments: int = 5) -> NDArray[np.int64]:
    """Random piecewise-constant segment label per block."""
    k = int(rng.integers(1, max_segments + 1))
    cuts = np.sort(rng.choice(np.arange(1, n_blocks), size=k - 1, replace=False)) if k > 1 else []
    return np.searchsorted(cuts, np.arange(n_blocks), side="right")


def candidate_fractions(rng, base: NDArray, n: int) -> list[NDArray]:
    """Fractions of wealth per block (n_blocks, d): half near ``base``, half wide."""
    n_blocks, d = base.shape
    out = []
    for i in range(n):
        seg = _schedule(rng, n_blocks)
        k = seg.max() + 1
        if i < n // 2:
            levels = rng.normal(0.0, 0.15, (k, d))
            out.append(base + levels[seg])
        else:
            levels = rng.uniform(-1.0, 1.5, (k, d))
            out.append(levels[seg])
    return out


def saddle_gaps(spec: MarketSpec, pref: PreferenceSpec, saddle: SaddlePoint, batch: PathBatch,
                blocks: NDArray, fractions: Sequence[NDArray], gammas: Sequence[NDArray],
                enforce_domain: bool = True):
    """Paired-difference estimates for both saddle inequalities.

    Left: E[Gamma-hat (u(xi) - u(xi-hat))] for xi the Euler wealth of each
    fraction schedule on the block grid.  Right: E[(Gamma-hat - Gamma^gamma) u(xi-hat)]
    for each per-block gamma (n_blocks, d).  Both should be <= 0.
    """
    T = batch.grid.horizon
    n_blocks = blocks.shape[1]
    cgrid = TimeGrid(T, n_blocks)
    dt = cgrid.dt
    G_hat = np.exp(saddle.log_Gamma_T)
    u_hat = utility(pref, saddle.xi_hat)
    base = G_hat * u_hat
    x = saddle.dual.x
    left = []
    for frac in fractions:
        def strategy(t, X, frac=frac):
            i = min(int(round(t / dt)), n_blocks - 1)
            return X[:, None] * frac[i]

        X, _, dead = euler_chunk(spec, cgrid, blocks, strategy, x, np.array([n_blocks]), False)
        left.append((estimate(G_hat * utility(pref, X[:, 0]) - base), int(dead.sum())))
    right = []
    if gammas:
        gam = np.stack(gammas)  # (k, B, d)
        if enforce_domain and np.any(np.abs(gam) > pref.K_array + 1e-12):
            raise ValueError("perturbation leaves the driver domain |gamma| <= K")
        m = len(blocks)
        stoch = blocks.reshape(m, -1) @ gam.reshape(len(gam), -1).T  # (paths, k)
        det = -0.5 * np.sum(gam**2, axis=(1, 2)) * dt
        for j in range(len(gam)):
            G = np.exp(stoch[:, j] + det[j])
            right.append(estimate(base - G * u_hat))
    return left, right


def check_saddle(spec: MarketSpec, pref: PreferenceSpec, saddle: SaddlePoint, batch: PathBatch,
                 n_perturbations: int = 50, seed: int = 0, blocks: NDArray | None = None,
                 n_blocks: int = 100, enforce_domain: bool = True, gammas: Sequence[NDArray] | None = None,
                 scale: float = 1.0, workers: int = 1) -> list[CheckResult]:
    """Both saddle inequalities for random feasible xi and in-domain gamma, plus equality controls."""
    t0 = time.perf_counter()
    if blocks is None:
        from .engine import block_sums

        blocks = block_sums(batch, n_blocks, workers)
    n_blocks = blocks.shape[1]
    rng = np.random.default_rng(seed)
    per = batch.grid.steps // n_blocks
    dual = saddle.dual
    frac_hat = optimal_fraction(pref, dual.curve)[::per]
    gamma_hat = dual.curve.gamma[::per]
    fractions = candidate_fractions(rng, frac_hat, n_perturbations)
    if gammas is None:
        gammas = []
        for _ in range(n_perturbations):
            seg = _schedule(rng, n_blocks)
            levels = rng.uniform(-pref.K_array, pref.K_array, (seg.max() + 1, spec.dim))
            gammas.append(levels[seg])
    left, right = saddle_gaps(spec, pref, saddle, batch, blocks, fractions, list(gammas) + [gamma_hat],
                              enforce_domain)
    out = []
    for i, (est, _) in enumerate(left):
        out.append(make_check(f"saddle_left_{i:03d}", est.mean, 0.0, 0.0, est.std_error, "le", t0, scale))
    for i, est in enumerate(right[:-1]):
        out.append(make_check(f"saddle_right_{i:03d}", est.mean, 0.0, 0.0, est.std_error, "le", t0, scale))
    same_xi = estimate(np.zeros(batch.n_paths))
    out.append(make_check("saddle_left_equality", same_xi.mean, 0.0, 0.0, same_xi.std_error, "eq", t0, scale))
    eq = right[-1]
    # block sums and the fine-grid exponent agree only up to round-off
    out.append(make_check("saddle_right_equality", eq.mean, 0.0, ROUNDOFF, eq.std_error, "eq", t0, scale))
    return out


def random_alternative(spec: MarketSpec, pref: PreferenceSpec, grid: TimeGrid, rng, n_blocks: int = 5) -> Controls:
    """Random in-domain controls, piecewise constant on ``n_blocks`` time blocks."""
    n, d = grid.steps, spec.dim
    block = np.minimum(np.arange(n) * n_blocks // n, n_blocks - 1)
    gamma = rng.uniform(-pref.K_array, pref.K_array, (n_blocks, d))[block]
    u = rng.uniform(0.0, 1.0, (n_blocks, d))[block]
    t = grid.knots[:-1]
    r = spec.rate_r(t)
    case = spec.drift
    if case is DriftCase.LINEAR:
        mu, nu = r, spec.appreciation_b(t) - r[:, None]
    elif case is DriftCase.HIGHER_RATE:
        mu = r + u[:, 0] * (spec.rate_R(t) - r)
        nu = spec.appreciation_b(t) - mu[:, None]
    elif case is DriftCase.LARGE_INVESTOR:
        mu = r
        nu = spec.appreciation_b(t) - r[:, None] - spec.eps * (2 * u - 1)
    elif case is DriftCase.LONG_SHORT:
        lo, hi = spec.short_rate(t), spec.long_rate(t)
        mu, nu = r, lo + u * (hi - lo)
    else:
        raise ValueError("martingale check needs a named drift case")
    return Controls(np.asarray(mu, dtype=float), np.asarray(nu, dtype=float), gamma)


def martingale_knots(grid: TimeGrid, n_pairs: int = 5) -> NDArray[np.int64]:
    return np.round(np.linspace(0, grid.steps, n_pairs + 1)).astype(np.int64)


def check_martingale(spec: MarketSpec, pref: PreferenceSpec, dual: DualPoint, batch: PathBatch,
                     n_alt: int = 10, seed: int = 0, zeta: float | None = None,
                     alternatives: Sequence[Controls] | None = None, scan: PathScan | None = None,
                     scale: float = 1.0, workers: int = 1) -> list[CheckResult]:
    """Increments of the conjectured dual value process at 5 knot pairs.

    Index 0 of ``scan`` must hold the optimal controls, followed by the
    alternatives in order.  Optimal increments must vanish within 3 SE;
    alternative increments must be >= -3 SE.
    """
    t0 = time.perf_counter()
    a = pref.alpha
    zeta = dual.zeta_hat if zeta is None else zeta
    if scan is None:
        if alternatives is None:
            rng = np.random.default_rng(seed)
            alternatives = [random_alternative(spec, pref, batch.grid, rng) for _ in range(n_alt)]
        controls = [optimal_controls(dual)] + list(alternatives)
        scan = scan_paths(batch, controls, martingale_knots(batch.grid), workers=workers)
    y = dual.y_tilde.values[scan.knots]
    factor = (1 - a) / a * zeta ** (a / (a - 1))
    V = factor * np.exp(a / (a - 1) * scan.log_N + scan.log_G / (1 - a) + y)  # (k, paths, knots)
    out = []
    for c in range(V.shape[0]):
        for j in range(V.shape[2] - 1):
            est = estimate(V[c, :, j + 1] - V[c, :, j])
            pair = f"{scan.knots[j]}_{scan.knots[j + 1]}"
            if c == 0:
                out.append(make_check(f"martingale_opt_{pair}", est.mean, 0.0, 0.0, est.std_error, "eq", t0, scale))
            else:
                out.append(make_check(f"martingale_alt{c - 1:02d}_{pair}", est.mean, 0.0, 0.0, est.std_error,
                                      "ge", t0, scale))
    return out


@dataclass(frozen=True)
class HJBSurface:
    """Closed-form v and its derivatives, optionally perturbed by (1 + eta (T - t))."""

    spec: MarketSpec
    pref: PreferenceSpec
    eta: float = 0.0

    def parts(self, t: float, x: NDArray):
        a = self.pref.alpha
        T = self.spec.horizon
        y = exact_y_tilde(self.spec, self.pref, t)
        g = generator(self.spec, self.pref, min(t, T)).value
        m = 1.0 + self.eta * (T - t)
        E = math.exp((1 - a) * y)
        v = x**a / a * E
        v_t = -(1 - a) * g * v * m - self.eta * v
        return v * m, v_t, x ** (a - 1) * E * m, (a - 1) * x ** (a - 2) * E * m


def check_hjb(spec: MarketSpec, pref: PreferenceSpec, n_t: int = 21, n_x: int = 21,
              x_range: tuple[float, float] = (0.5, 2.0), n_pi: int = 4001, eta: float = 0.0,
              scale: float = 1.0) -> list[CheckResult]:
    """Residuals of both HJB equations for the closed-form value function."""
    if spec.drift is not DriftCase.LARGE_INVESTOR:
        raise ValueError("HJB check applies to the large-investor drift")
    t0 = time.perf_counter()
    surf = HJBSurface(spec, pref, eta)
    K, eps = pref.K_array, spec.eps
    ts = np.linspace(0.0, spec.horizon, n_t)
    xs = np.linspace(*x_range, n_x)
    res_g = res_c = arg_err = 0.0
    step_max = 0.0
    for t in ts:
        r = float(spec.rate_r(t))
        b = spec.appreciation_b(t)
        k = generator(spec, pref, t)
        k = k.nu + k.gamma
        for x in xs:
            v, v_t, v_x, v_xx = surf.parts(t, x)
            pi_hat = -v_x / v_xx * k
            scale_t = 1.0 + abs(v_t)
            total = v_x * r * x
            for i in range(spec.dim):
                half = 3.0 * abs(pi_hat[i]) if pi_hat[i] != 0 else 3.0 * x
                grid = np.linspace(-half, half, n_pi)
                h = v_x * (grid * (b[i] - r) - eps[i] * np.abs(grid)) + 0.5 * v_xx * grid**2 - K[i] * np.abs(v_x * grid)
                j = int(np.argmax(h))
                if j in (0, n_pi - 1):
                    raise ValueError(f"HJB argmax on the pi-grid boundary at t={t}, x={x}")
                total += h[j]
                step = grid[1] - grid[0]
                step_max = max(step_max, step)
                arg_err = max(arg_err, abs(grid[j] - pi_hat[i]) / step)
            res_g = max(res_g, abs(v_t + total) / scale_t)
            closed = v_x * r * x - v_x**2 * float(k @ k) / (2 * v_xx)
            res_c = max(res_c, abs(v_t + closed) / scale_t)
    terminal = max(abs(surf.parts(spec.horizon, x)[0] - utility(pref, x)) for x in xs)
    return [
        make_check("hjb_general_residual", res_g, 0.0, 1e-6, None, "eq", t0, scale),
        make_check("hjb_closed_residual", res_c, 0.0, 1e-6, None, "eq", t0, scale),
        make_check("hjb_argmax_steps", arg_err, 0.0, 1.0, None, "eq", t0, scale),
        make_check("hjb_terminal", terminal, 0.0, ROUNDOFF, None, "eq", t0, scale),
    ]


def fraction_strategy(pref: PreferenceSpec, dual: DualPoint) -> Callable:
    """Feedback pi(t, X) = X (nu-hat + gamma-hat)/(1-a) on the dual's grid."""
    frac = optimal_fraction(pref, dual.curve)
    grid = dual.curve.grid
    n = grid.steps

    def strategy(t, X):
        i = min(int(round(t / grid.dt)), n - 1)
        return np.asarray(X)[:, None] * frac[i]

    return strategy


def check_forward_backward(spec: MarketSpec, pref: PreferenceSpec, x: float, batch: PathBatch,
                           saddle: SaddlePoint | None = None, strategy: Callable | None = None,
                           scale: float = 1.0, workers: int = 1) -> list[CheckResult]:
    """Euler wealth under pi-hat against X-hat_T = xi-hat, and its utility against v(0, x)."""
    if spec.drift is not DriftCase.LARGE_INVESTOR:
        raise ValueError("forward-backward check applies to the large-investor drift")
    t0 = time.perf_counter()
    if saddle is None:
        from .solver import assemble_saddle

        saddle = assemble_saddle(spec, pref, x, batch, workers=workers)
    if strategy is None:
        strategy = fraction_strategy(pref, saddle.dual)
    wealth = euler_wealth(spec, batch, strategy, x, knots=[batch.grid.steps], workers=workers)
    if wealth.bankrupt.any():
        raise ValueError(f"{int(wealth.bankrupt.sum())} Euler paths hit zero wealth")
    X_T = wealth.X[:, 0]
    rel = float(np.max(np.abs(X_T - saddle.xi_hat) / saddle.xi_hat))
    dt = batch.grid.dt
    path = make_check("forward_backward_pathwise", rel, 0.0, PATHWISE_CONSTANT * math.sqrt(dt), None, "eq", t0,
                      scale)
    v0 = large_investor_closed_form(spec, pref, 0.0, x).v
    est = estimate(np.exp(saddle.log_Gamma_T) * utility(pref, X_T))
    value = make_check("forward_backward_value", est.mean, v0, 0.01 * v0, est.std_error, "eq", t0, scale)
    return [path, value]


def euler_refinement_errors(spec: MarketSpec, pref: PreferenceSpec, x: float, n_paths: int, seed: int,
                            base_steps: int = 2000, halvings: int = 2, workers: int = 1):
    """Max pathwise relative error of Euler vs X-hat_T at base_steps * 2^j steps, j = 0..halvings.

    All levels use the same Brownian paths (coarse sums of one fine draw grid).
    Returns a list of (dt, max relative error).
    """
    from .engine import simulate_brownian

    factor = 2**halvings
    fine = simulate_brownian(TimeGrid(spec.horizon, base_steps * factor), n_paths, spec.dim, seed)
    levels = []
    for j in range(halvings + 1):
        grid = TimeGrid(spec.horizon, base_steps * 2**j)
        dual = solve_dual(spec, pref, x, grid)
        levels.append((grid, dual, fraction_strategy(pref, dual), factor // 2**j))

    def fn(_, incr):
        m, _, d = incr.shape
        errs = []
        for grid, dual, strat, agg in levels:
            inc = incr.reshape(m, grid.steps, agg, d).sum(axis=2) if agg > 1 else incr
            c = dual.curve
            stoch_N = -np.einsum("msd,sd->m", inc, c.nu)
            stoch_G = np.einsum("msd,sd->m", inc, c.gamma)
            log_N = stoch_N - np.sum(c.mu + 0.5 * np.sum(c.nu**2, axis=1)) * grid.dt
            log_G = stoch_G - 0.5 * np.sum(c.gamma**2) * grid.dt
            xi = xi_from_logs(pref, dual.zeta_hat, log_N, log_G)
            X, _, dead = euler_chunk(spec, grid, inc, strat, x, np.array([grid.steps]), False)
            if dead.any():
                raise ValueError("Euler path hit zero wealth")
            errs.append(np.abs(X[:, 0] - xi) / xi)
        return np.stack(errs, axis=1)

    err = path_map(fine, fn, workers)
    return [(lv[0].dt, float(err[:, j].max())) for j, lv in enumerate(levels)]


def check_refinement(spec, pref, x, n_paths, seed, base_steps=2000, halvings=2, scale=1.0,
                     workers: int = 1) -> CheckResult:
    """Pathwise Euler error must decrease under each dt-halving."""
    t0 = time.perf_counter()
    errs = euler_refinement_errors(spec, pref, x, n_paths, seed, base_steps, halvings, workers)
    worst_ratio = max(e2 / e1 for (_, e1), (_, e2) in zip(errs, errs[1:]))
    # measured is the largest error ratio between successive levels; < 1 means monotone decrease
    passed = worst_ratio < 1.0
    ms = int(round(1000 * (time.perf_counter() - t0)))
    return CheckResult("forward_backward_refinement", worst_ratio, 1.0, 0.0, None, passed, ms, "le")


def _draw_alpha(rng):
    return float(rng.uniform(0.1, 0.9))


def check_propositions(n_draws: int = 100, seed: int = 0, scale: float = 1.0) -> list[CheckResult]:
    """Stated closed-form minimizers against the solver on random parameter draws."""
    rng = np.random.default_rng(seed)
    tol = 1e-12
    out = []

    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_draws):
        d = int(rng.integers(1, 4))
        b, K, a = rng.uniform(-1, 1, d), rng.uniform(0, 0.5, d), _draw_alpha(rng)
        spec = MarketSpec(dim=d, horizon=1.0, drift="linear", appreciation_b=tuple(b))
        got = g_linear(0.0, 0.0, spec, PreferenceSpec(a, tuple(K))).gamma
        worst = max(worst, float(np.max(np.abs(got - np.maximum(-K, np.minimum(-b, K))))))
    out.append(make_check("proposition_linear_gamma", worst, 0.0, tol, None, "eq", t0, scale))

    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_draws):
        a = _draw_alpha(rng)
        r = rng.uniform(0, 0.05)
        R = r + rng.uniform(0, 0.1)
        b = rng.uniform(-0.5, 1.0)
        spec = MarketSpec(dim=1, horizon=1.0, drift="higher-rate", appreciation_b=b, rate_r=r, rate_R=R)
        pt = g_higher(0.0, 0.0, spec, PreferenceSpec(a, 0.0))
        worst = max(worst, abs(pt.mu - max(r, min(b - 1 + a, R))), abs(pt.gamma[0]))
    out.append(make_check("proposition_higher_no_ambiguity", worst, 0.0, tol, None, "eq", t0, scale))

    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_draws):
        a = _draw_alpha(rng)
        K = (1 - a) / 2 + rng.uniform(0, 0.3)
        r = rng.uniform(0, 0.05)
        R = r + rng.uniform(0, 0.1)
        b = R + K + rng.uniform(0, 0.5)
        spec = MarketSpec(dim=1, horizon=1.0, drift="higher-rate", appreciation_b=b, rate_r=r, rate_R=R)
        pt = g_higher(0.0, 0.0, spec, PreferenceSpec(a, K))
        worst = max(worst, abs(pt.gamma[0] + K), abs(pt.mu - max(r, min(b - K - 1 + a, R))))
    out.append(make_check("proposition_higher_ambiguity", worst, 0.0, tol, None, "eq", t0, scale))

    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_draws):
        d = int(rng.integers(1, 4))
        b = rng.uniform(-0.6, 0.6, d)
        K, eps = rng.uniform(0, 0.3, d), rng.uniform(0, 0.2, d)
        spec = MarketSpec(dim=d, horizon=1.0, drift="large-investor", appreciation_b=tuple(b),
                          impact_eps=tuple(eps))
        pt = g_large(0.0, 0.0, spec, PreferenceSpec(_draw_alpha(rng), tuple(K)))
        got = pt.nu + pt.gamma  # b + gamma - delta (r = 0)
        want = np.where(b > K + eps, b - K - eps, np.where(b < -(K + eps), b + K + eps, 0.0))
        worst = max(worst, float(np.max(np.abs(got - want))))
    out.append(make_check("proposition_large_unique_excess", worst, 0.0, tol, None, "eq", t0, scale))
    return out


# --- full suite --------------------------------------------------------------


@dataclass(frozen=True)
class VerifySettings:
    n_perturbations: int = 50
    n_alt: int = 10
    saddle_blocks: int = 100
    refinement_paths: int = 2000
    seed: int = 0
    tolerance_scale: float = 1.0
    workers: int = 1
    extra: dict = field(default_factory=dict)


def run_verification(spec: MarketSpec, pref: PreferenceSpec, x: float, batch: PathBatch,
                     settings: VerifySettings = VerifySettings(), scenario: dict | None = None) -> VerificationReport:
    s = settings
    scale = s.tolerance_scale
    dual = solve_dual(spec, pref, x, batch.grid)
    rng = np.random.default_rng(s.seed)
    alternatives = [random_alternative(spec, pref, batch.grid, rng) for _ in range(s.n_alt)]
    knots = martingale_knots(batch.grid)
    n_blocks = s.saddle_blocks if batch.grid.steps % s.saddle_blocks == 0 else None
    scan = scan_paths(batch, [optimal_controls(dual)] + alternatives, knots, n_blocks, s.workers)
    saddle = saddle_from_scan(pref, dual, scan, batch)

    checks = [
        check_budget(saddle, batch, x, scale=scale),
        check_no_gap(pref, saddle, scale),
        check_dual_expectation(pref, saddle, scale),
        *check_zeta(pref, dual, scale),
        *check_martingale(spec, pref, dual, batch, scan=scan, scale=scale),
        *check_propositions(seed=s.seed, scale=scale),
    ]
    if scan.blocks is not None:
        checks += check_saddle(spec, pref, saddle, batch, s.n_perturbations, s.seed, blocks=scan.blocks,
                               scale=scale)
    if spec.drift is DriftCase.LARGE_INVESTOR:
        checks += check_hjb(spec, pref, scale=scale)
        checks += check_forward_backward(spec, pref, x, batch, saddle, scale=scale, workers=s.workers)
        if s.refinement_paths > 0:
            checks.append(check_refinement(spec, pref, x, s.refinement_paths, batch.seed + 1,
                                           min(batch.grid.steps, 2000), 2, scale, s.workers))
    info = dict(scenario or {})
    info.setdefault("case", spec.drift.value)
    info.setdefault("n_paths", batch.n_paths)
    info.setdefault("n_steps", batch.grid.steps)
    info.setdefault("seed", batch.seed)
    return report(info, checks)


__all__ = [
    "CheckResult",
    "Controls",
    "HJBSurface",
    "PathScan",
    "VerificationReport",
    "VerifySettings",
    "check_budget",
    "check_dual_expectation",
    "check_forward_backward",
    "check_hjb",
    "check_martingale",
    "check_no_gap",
    "check_propositions",
    "check_refinement",
    "check_saddle",
    "check_zeta",
    "euler_refinement_errors",
    "judge",
    "make_check",
    "random_alternative",
    "run_verification",
    "saddle_gaps",
    "scan_paths",
]
