"""Small worked examples with hand-computed or closed-form answers."""

import functools
import json
import math

import numpy as np
import pytest

from recursive_duality.cli import main
from recursive_duality.engine import (
    TimeGrid,
    estimate,
    euler_wealth,
    girsanov_shift,
    mc_expect,
    simulate_brownian,
    stoch_exp_Gamma,
    stoch_exp_N,
)
from recursive_duality.market import (
    MarketSpec,
    PreferenceSpec,
    drift_conjugate_numeric,
    utility,
)
from recursive_duality.solver import (
    assemble_saddle,
    g_higher,
    g_large,
    g_linear,
    gamma_hat_linear,
    integrate_y_tilde,
    large_investor_closed_form,
    solve_dual,
    v_tilde,
    zeta_hat_bisect,
    zeta_hat_closed,
)
from recursive_duality.verify import check_budget, check_martingale, scan_paths

PREF = PreferenceSpec(0.5, 0.1)
LARGE = MarketSpec(dim=1, horizon=1.0, drift="large-investor", appreciation_b=0.3, impact_eps=0.05)
LINEAR = MarketSpec(dim=1, horizon=1.0, drift="linear", appreciation_b=0.3)


def within(est, target, k=3.0):
    return abs(est.mean - target) <= k * est.std_error


def two_sided(a, b, k=3.0):
    return abs(a.mean - b.mean) <= k * math.hypot(a.std_error, b.std_error)


class TestPathMoments:
    def test_single_step_single_path(self):
        a = simulate_brownian(TimeGrid(1.0, 1), 1, 2, seed=42).increments
        b = simulate_brownian(TimeGrid(1.0, 1), 1, 2, seed=42).increments
        assert a.shape == (1, 1, 2)
        np.testing.assert_array_equal(a, b)

    def test_terminal_mean_and_variance(self):
        batch = simulate_brownian(TimeGrid(1.0, 1), 100_000, 1, seed=1)
        WT = batch.increments[:, 0, 0]
        assert abs(WT.mean()) <= 3 / math.sqrt(100_000)
        # Var(S^2) = 2 T^2 / (n - 1) for Gaussian data
        assert abs(WT.var(ddof=1) - 1.0) <= 3 * math.sqrt(2 / 99_999)

    def test_trivial_exponentials(self):
        batch = simulate_brownian(TimeGrid(1.0, 5), 4, 1, seed=0)
        assert np.all(stoch_exp_N(batch, 0.0, [0.0]) == 1.0)
        assert np.all(stoch_exp_Gamma(batch, 0.0, [0.0]) == 1.0)
        np.testing.assert_array_equal(girsanov_shift(batch, [0.0]).increments, batch.increments)

    def test_inverse_discount_moment(self):
        # E[N^-1] = exp(b^2 T) with mu = 0, nu = b
        batch = simulate_brownian(TimeGrid(1.0, 10), 100_000, 1, seed=2)
        est = estimate(1.0 / stoch_exp_N(batch, 0.0, [0.3], knots=[10])[:, 0])
        assert within(est, math.exp(0.09))

    def test_dual_expectation_lognormal(self):
        # E[N^-1 Gamma^2] = exp(b^2/2 - gamma^2 + (b + 2 gamma)^2 / 2) = exp(0.04)
        batch = simulate_brownian(TimeGrid(1.0, 10), 100_000, 1, seed=3)
        logN = stoch_exp_N(batch, 0.0, [0.3], knots=[10], log=True)[:, 0]
        logG = stoch_exp_Gamma(batch, 0.0, [-0.1], knots=[10], log=True)[:, 0]
        assert within(estimate(np.exp(-logN + 2 * logG)), math.exp(0.04))

    def test_exponential_martingales_random_controls(self):
        grid = TimeGrid(1.0, 20)
        batch = simulate_brownian(grid, 50_000, 2, seed=4)
        rng = np.random.default_rng(0)
        for _ in range(5):
            gamma = rng.uniform(-0.3, 0.3, (20, 2))
            mu = rng.uniform(-0.1, 0.1, 20)
            nu = rng.uniform(-0.5, 0.5, (20, 2))
            assert within(estimate(stoch_exp_Gamma(batch, 0.0, gamma, knots=[20])[:, 0]), 1.0)
            N = stoch_exp_N(batch, mu, nu, knots=[20])[:, 0]
            assert within(estimate(N * math.exp(mu.sum() * grid.dt)), 1.0)

    def test_martingale_functional(self):
        batch = simulate_brownian(TimeGrid(1.0, 10), 50_000, 1, seed=5)
        nu = np.linspace(-0.4, 0.4, 10)[:, None]
        est = mc_expect(batch, lambda s, incr: np.exp(-np.einsum("msd,sd->m", incr, nu)
                                                      - 0.5 * np.sum(nu**2) * 0.1))
        assert within(est, 1.0)

    def test_constant_functional(self):
        est = mc_expect(simulate_brownian(TimeGrid(1.0, 3), 50, 1, 0), lambda s, incr: np.full(len(incr), 2.5))
        assert est.mean == 2.5 and est.std_error == 0.0


@functools.lru_cache(maxsize=1)
def girsanov_draws(gamma, n=100_000):
    """Gamma-weights and W_T under P, and independent W_T shifted to the law under P^gamma."""
    grid = TimeGrid(1.0, 10)
    batch = simulate_brownian(grid, n, 1, seed=6)
    G = stoch_exp_Gamma(batch, 0.0, [gamma], knots=[10])[:, 0]
    # under P^gamma, W = W^gamma + int gamma with W^gamma Brownian: regenerate that law from
    # independent draws by moving them the other way
    other = simulate_brownian(grid, n, 1, seed=7)
    return G, batch.brownian()[:, -1, 0], girsanov_shift(other, [-gamma]).brownian()[:, -1, 0]


class TestGirsanovIdentity:
    gamma = -0.1

    def sides(self, h):
        G, W, W_shifted = girsanov_draws(self.gamma)
        return estimate(G * h(W)), estimate(h(W_shifted))

    def test_first_moment(self):
        w, s = self.sides(lambda x: x)
        assert within(w, -0.1) and within(s, -0.1)

    def test_second_moment(self):
        w, s = self.sides(lambda x: x * x)
        assert within(w, 1.01) and within(s, 1.01)

    def test_random_polynomials(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            c = rng.uniform(-1, 1, 4)
            w, s = self.sides(lambda x, c=c: c[0] + c[1] * x + c[2] * x**2 + c[3] * x**3)
            assert two_sided(w, s)


class TestWealthExamples:
    @pytest.mark.parametrize("spec", [
        LINEAR,
        MarketSpec(dim=1, horizon=1.0, drift="higher-rate", appreciation_b=0.3, rate_R=0.1),
        LARGE,
    ], ids=["linear", "higher-rate", "large-investor"])
    def test_zero_strategy_keeps_wealth(self, spec):
        batch = simulate_brownian(TimeGrid(1.0, 20), 10, 1, seed=0)
        X = euler_wealth(spec, batch, lambda t, X: np.zeros((len(X), 1)), 1.3).X
        assert np.all(X == 1.3)

    def test_unit_position_mean(self):
        batch = simulate_brownian(TimeGrid(1.0, 50), 50_000, 1, seed=9)
        X = euler_wealth(LINEAR, batch, lambda t, X: np.ones((len(X), 1)), 1.0, knots=[50]).X[:, 0]
        assert within(estimate(X), 1.3)

    def test_weak_order_one(self):
        # successive Euler means under dt-halving differ by O(dt): log-log slope near 1
        spec = MarketSpec(dim=1, horizon=1.0, drift="linear", appreciation_b=1.0)
        fine = simulate_brownian(TimeGrid(1.0, 80), 100_000, 1, seed=10)
        means = []
        for factor in (8, 4, 2, 1):
            X = euler_wealth(spec, fine.coarse(factor), lambda t, X: 0.5 * X[:, None], 1.0,
                             knots=[80 // factor]).X[:, 0]
            means.append(X.mean())
        diffs = np.abs(np.diff(means))
        dts = np.array([1 / 10, 1 / 20, 1 / 40])
        slope = np.polyfit(np.log(dts), np.log(diffs), 1)[0]
        assert 0.5 <= slope <= 1.5


class TestGeneratorExamples:
    def test_linear_clips(self):
        assert gamma_hat_linear(0.3, 0.1, 0.5, 0.0)[()] == -0.1
        assert gamma_hat_linear(0.05, 0.1, 0.5, 0.0)[()] == -0.05
        assert gamma_hat_linear(0.3, 0.1, 0.5, -0.4)[()] == pytest.approx(0.1)

    def test_linear_box_contains_b(self):
        spec = MarketSpec(dim=1, horizon=1.0, drift="linear", appreciation_b=0.08)
        assert g_linear(0.0, 0.0, spec, PREF).value == 0.0

    def test_higher_rate_examples(self):
        def pt(b, R, K):
            spec = MarketSpec(dim=1, horizon=1.0, drift="higher-rate", appreciation_b=b, rate_R=R)
            return g_higher(0.0, 0.0, spec, PreferenceSpec(0.5, K))

        a = pt(0.3, 0.1, 0.0)
        assert a.mu == 0.0 and a.gamma[0] == 0.0
        assert pt(0.6, 0.05, 0.0).mu == pytest.approx(0.05)
        c = pt(0.5, 0.2, 0.25)
        assert c.gamma[0] == pytest.approx(-0.25) and c.mu == pytest.approx(0.0)

    def test_large_investor_examples(self):
        inside = MarketSpec(dim=1, horizon=1.0, drift="large-investor", appreciation_b=0.12, impact_eps=0.05)
        p = g_large(0.0, 0.0, inside, PREF)
        assert p.value == 0.0
        assert p.partner[0] - p.gamma[0] == pytest.approx(0.12)
        mirror = MarketSpec(dim=1, horizon=1.0, drift="large-investor", appreciation_b=-0.3, impact_eps=0.05)
        m = g_large(0.0, 0.0, mirror, PREF)
        assert m.partner[0] == -0.05 and m.gamma[0] == 0.1

    def test_y_tilde_constants(self):
        grid = TimeGrid(1.0, 100)
        assert np.all(integrate_y_tilde(np.zeros(100), grid).values == 0.0)
        assert integrate_y_tilde(np.full(100, 0.0225), grid).initial == pytest.approx(0.0225, abs=1e-15)


class TestZetaExamples:
    def test_values(self):
        assert zeta_hat_closed(1.0, 0.5, math.exp(0.04)) == pytest.approx(1.02020, abs=5e-6)
        assert zeta_hat_closed(1.0, 0.5, math.exp(0.0225)) == pytest.approx(1.01131, abs=5e-6)

    def test_homogeneity_and_monotonicity(self):
        z1 = zeta_hat_closed(1.0, 0.3, 1.2)
        assert zeta_hat_closed(3.0, 0.3, 1.2) == pytest.approx(3.0 ** (0.3 - 1) * z1, rel=1e-14)
        assert zeta_hat_closed(2.0, 0.3, 1.2) < z1

    def test_degenerate_market(self):
        # N = Gamma = 1: E_dual = 1 and zeta-hat = u'(x)
        assert zeta_hat_closed(2.0, 0.5, 1.0) == pytest.approx(2.0**-0.5)
        assert zeta_hat_bisect(2.0, lambda z: -(z**-2.0)) == pytest.approx(2.0**-0.5, rel=1e-9)


class TestSaddleExamples:
    def test_no_ambiguity_no_premium(self):
        spec = MarketSpec(dim=1, horizon=1.0, drift="linear", appreciation_b=0.0)
        pref = PreferenceSpec(0.5, 0.0)
        saddle = assemble_saddle(spec, pref, 1.5, simulate_brownian(TimeGrid(1.0, 20), 50, 1, seed=0))
        np.testing.assert_allclose(saddle.xi_hat, 1.5, rtol=1e-14)

    def test_inactive_investor(self):
        spec = MarketSpec(dim=1, horizon=1.0, drift="large-investor", appreciation_b=0.12, impact_eps=0.05)
        sol = large_investor_closed_form(spec, PREF, 0.0, 3.0)
        assert sol.v == utility(PREF, 3.0)
        assert np.all(sol.pi_hat(0.5, np.array([1.0, 2.0])) == 0.0)
        assert sol.value(1.0, 0.7) == utility(PREF, 0.7)

    @pytest.mark.parametrize("spec", [
        LINEAR,
        MarketSpec(dim=1, horizon=1.0, drift="higher-rate", appreciation_b=0.6, rate_r=0.01, rate_R=0.05),
        LARGE,
        MarketSpec(dim=1, horizon=1.0, drift="long-short", long_rate=0.3, short_rate=0.25),
    ], ids=["linear", "higher-rate", "large-investor", "long-short"])
    def test_dual_value_routes_agree(self, spec):
        # V~(zeta) from the MC expectation against the closed form with exp(Y~_0)
        batch = simulate_brownian(TimeGrid(1.0, 50), 50_000, 1, seed=11)
        saddle = assemble_saddle(spec, PREF, 1.0, batch)
        a, z = PREF.alpha, saddle.dual.zeta_hat
        factor = (1 - a) / a * z ** (a / (a - 1))
        mc = estimate(factor * np.exp(a / (a - 1) * saddle.log_N_T + saddle.log_Gamma_T / (1 - a)))
        assert within(mc, v_tilde(PREF, z, saddle.dual.E_dual))

    def test_linear_budget(self):
        batch = simulate_brownian(TimeGrid(1.0, 50), 50_000, 1, seed=12)
        saddle = assemble_saddle(LINEAR, PREF, 1.0, batch)
        assert check_budget(saddle, batch, 1.0).passed
        bad = check_budget(saddle, batch, 1.0, xi=1.1 * saddle.xi_hat)
        assert not bad.passed and bad.measured == pytest.approx(1.1, abs=0.01)

    def test_zero_strategy_value(self):
        batch = simulate_brownian(TimeGrid(1.0, 50), 50_000, 1, seed=13)
        saddle = assemble_saddle(LARGE, PREF, 1.0, batch)
        assert within(estimate(np.exp(saddle.log_Gamma_T) * utility(PREF, 1.0)), 2.0)

    def test_martingale_drift_scales_with_zeta(self):
        batch = simulate_brownian(TimeGrid(1.0, 50), 2000, 1, seed=14)
        dual = solve_dual(LINEAR, PREF, 1.0, batch.grid)
        from recursive_duality.verify import optimal_controls

        scan = scan_paths(batch, [optimal_controls(dual)], [0, 10, 20, 30, 40, 50])
        base = check_martingale(LINEAR, PREF, dual, batch, scan=scan)
        twice = check_martingale(LINEAR, PREF, dual, batch, scan=scan, zeta=2 * dual.zeta_hat)
        ratio = 2.0 ** (PREF.alpha / (PREF.alpha - 1))
        for b, t in zip(base, twice):
            assert t.measured == pytest.approx(ratio * b.measured, rel=1e-12)


def test_numeric_conjugate_on_singleton():
    spec = MarketSpec(dim=1, horizon=1.0, drift="linear", appreciation_b=0.3, rate_r=0.02)
    assert abs(drift_conjugate_numeric(spec, 0.0, 0.02, [0.28])) <= 1e-12


class TestCliExamples:
    def run(self, tmp_path, capsys, *argv, **cfg):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert main([argv[0], "--config", str(path), "--format", "json", *argv[1:]]) == 0
        return json.loads(capsys.readouterr().out)

    def test_inactive_scenario(self, tmp_path, capsys):
        out = self.run(tmp_path, capsys, "solve", case="large-investor", alpha=0.5, K=0.0, b=0.0, eps=0.0,
                       x0=2.0, n_steps=10)
        assert out["pi_fraction"] == [[0.0, [0.0]]]
        assert out["v0"] == pytest.approx(utility(PREF, 2.0))

    def test_linear_gamma_knots(self, tmp_path, capsys):
        out = self.run(tmp_path, capsys, "solve", case="linear", alpha=0.5, K=0.1, b=0.3, n_steps=10)
        assert out["gamma_hat"] == [[0.0, [-0.1]]]

    def test_linear_singleton_conjugate(self, tmp_path, capsys):
        out = self.run(tmp_path, capsys, "transform", "--mu", "0", "--nu", "0.3", case="linear", alpha=0.5,
                       K=0.1, b=0.3)
        assert out["conjugate"] == 0.0

    def test_report_roundtrip(self, tmp_path, capsys):
        out = self.run(tmp_path, capsys, "verify", case="linear", alpha=0.5, K=0.1, b=0.3, n_paths=1000,
                       n_steps=100, n_perturbations=4, n_alt=2)
        assert json.loads(json.dumps(out)) == out
        assert out["passed"]
