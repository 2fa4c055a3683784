"""Independent oracles shared by the unit and acceptance tests."""

import numpy as np
import pytest

from recursive_duality.market import MarketSpec, PreferenceSpec
from recursive_duality.solver import generator

GRID_STEP = 1e-4
ORACLE_TOL = 1e-7


def objective(alpha, nu, gamma, mu, z):
    """The pointwise dual objective, written out directly."""
    c = alpha / (2 * (1 - alpha) ** 2)
    return (c * (nu + gamma) ** 2 + alpha / (1 - alpha) * mu
            + z * (gamma + alpha * nu) / (1 - alpha) + 0.5 * z * z)


def axis(lo, hi):
    n = max(2, int(round((hi - lo) / GRID_STEP)) + 1)
    return np.linspace(lo, hi, n)


def grid_min(alpha, case, params, z):
    """Brute-force minimum over a 1e-4 mesh of the dual domain (d = 1)."""
    K = params["K"]
    gam = axis(-K, K)[:, None]
    if case == "linear":
        nu = params["b"] - params["r"]
        vals = objective(alpha, nu, gam, params["r"], z)
    elif case == "higher-rate":
        mu = axis(params["r"], params["R"])[None, :]
        vals = objective(alpha, params["b"] - mu, gam, mu, z)
    elif case == "large-investor":
        delta = axis(-params["eps"], params["eps"])[None, :]
        vals = objective(alpha, params["b"] - params["r"] - delta, gam, params["r"], z)
    else:
        nu = axis(params["lo"], params["hi"])[None, :]
        vals = objective(alpha, nu, gam, params["r"], z)
    return float(vals.min())


def draw(case, rng):
    p = dict(K=rng.uniform(0, 0.1), b=rng.uniform(-0.6, 0.6), r=rng.uniform(-0.02, 0.05))
    if case == "linear":
        spec = MarketSpec(dim=1, horizon=1.0, drift=case, appreciation_b=p["b"], rate_r=p["r"])
    elif case == "higher-rate":
        p["R"] = p["r"] + rng.uniform(0, 0.1)
        spec = MarketSpec(dim=1, horizon=1.0, drift=case, appreciation_b=p["b"], rate_r=p["r"], rate_R=p["R"])
    elif case == "large-investor":
        p["eps"] = rng.uniform(0, 0.05)
        spec = MarketSpec(dim=1, horizon=1.0, drift=case, appreciation_b=p["b"], rate_r=p["r"],
                          impact_eps=p["eps"])
    else:
        p["lo"] = rng.uniform(-0.3, 0.3)
        p["hi"] = p["lo"] + rng.uniform(0, 0.1)
        spec = MarketSpec(dim=1, horizon=1.0, drift=case, long_rate=p["hi"], short_rate=p["lo"], rate_r=p["r"])
    return spec, p


CASES = ["linear", "higher-rate", "large-investor", "long-short"]


def assert_feasible(case, pt, p):
    K = p["K"]
    assert np.all(np.abs(pt.gamma) <= K + 1e-15)
    if case == "higher-rate":
        assert p["r"] - 1e-15 <= pt.mu <= p["R"] + 1e-15
        assert pt.nu[0] == pytest.approx(p["b"] - pt.mu, abs=1e-15)
    elif case == "large-investor":
        assert pt.mu == p["r"]
        assert abs(p["b"] - p["r"] - pt.nu[0]) <= p["eps"] + 1e-15
    elif case == "long-short":
        assert pt.mu == p["r"]
        assert p["lo"] - 1e-15 <= pt.nu[0] <= p["hi"] + 1e-15


def run_grid_oracle(case, n_draws, seed, z_mode):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_draws):
        spec, p = draw(case, rng)
        a = rng.uniform(0.2, 0.7)
        z = 0.0 if z_mode == "zero" or i % 2 == 0 else rng.uniform(-0.5, 0.5)
        pt = generator(spec, PreferenceSpec(a, p["K"]), 0.0, z)
        assert_feasible(case, pt, p)
        # the reported value is the objective at the reported minimizer
        direct = objective(a, pt.nu[0], pt.gamma[0], pt.mu, z)
        assert pt.value == pytest.approx(direct, abs=1e-14)
        oracle = grid_min(a, case, p, z)
        # never below the grid (up to rounding) and within the mesh error above it
        assert pt.value <= oracle + 1e-14
        worst = max(worst, abs(pt.value - oracle))
    return worst
