from __future__ import annotations

import pytest

from recursive_duality.market import MarketSpec, PreferenceSpec

# Reference scenario S
S_B, S_K, S_EPS, S_R_HIGH, S_ALPHA, S_X = 0.3, 0.1, 0.05, 0.1, 0.5, 1.0
S_PATHS, S_STEPS = 100_000, 2000
S_SEED = 20261015

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def scenario_market(case: str) -> MarketSpec:
    kw = dict(dim=1, horizon=1.0, drift=case, appreciation_b=S_B)
    if case == "higher-rate":
        kw["rate_R"] = S_R_HIGH
    if case == "large-investor":
        kw["impact_eps"] = S_EPS
    if case == "long-short":
        kw = dict(dim=1, horizon=1.0, drift=case, long_rate=0.3, short_rate=0.25)
    return MarketSpec(**kw)


@pytest.fixture
def pref_s() -> PreferenceSpec:
    return PreferenceSpec(S_ALPHA, S_K)


@pytest.fixture
def record_acceptance():
    def record(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
