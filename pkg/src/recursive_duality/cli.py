"""Command-line interface: transform, solve, simulate, verify.

Every command reads a scenario JSON (``--config``).  Output files are
byte-identical for identical inputs and do not depend on ``--workers``;
wall-clock timings are written only with ``--timing``.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .config import ScenarioConfig
from .engine import WealthPaths, estimate, simulate_brownian, write_path_csv
from .market import (
    DriftCase,
    UseNumericConjugate,
    drift_conjugate,
    drift_conjugate_numeric,
    drift_eval,
    duality_roundtrip,
    utility,
)
from .solver import (
    DualPoint,
    assemble_saddle,
    large_investor_closed_form,
    optimal_fraction,
    optimal_wealth,
    solve_dual,
)
from .verify import VerifySettings, run_verification


def _number(value: float):
    """JSON-safe number; infinities become the tokens "+inf" / "-inf"."""
    if math.isinf(value):
        return "+inf" if value > 0 else "-inf"
    return float(value)


def _vector(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed vector {text!r}") from None


def _curve_knots(times, values) -> list:
    """Run-length compress a per-step curve into [[t, value], ...] change points."""
    values = np.asarray(values, dtype=float)
    out = []
    prev = None
    for t, v in zip(times, values):
        key = v.tolist() if v.ndim else float(v)
        if key != prev:
            out.append([float(t), key])
            prev = key
    return out


def _emit(payload: dict, fmt: str, out_path: str | None, text_lines: list[str]) -> None:
    if out_path:
        with open(out_path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    if fmt == "json":
        print(json.dumps(payload, indent=2))
    elif fmt == "text":
        print("\n".join(text_lines))


def _load(args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.paths is not None:
        overrides["n_paths"] = args.paths
    if args.steps is not None:
        overrides["n_steps"] = args.steps
    return replace(cfg, **overrides) if overrides else cfg


def cmd_transform(args) -> int:
    cfg = _load(args)
    spec = cfg.market()
    t = args.t
    payload: dict = {"case": cfg.case, "t": t}
    lines = [f"case {cfg.case}  t = {t:g}"]
    if (args.x is None) != (args.q is None):
        raise SystemExit("transform: --x and --q go together")
    if (args.mu is None) != (args.nu is None):
        raise SystemExit("transform: --mu and --nu go together")
    if args.x is None and args.mu is None:
        raise SystemExit("transform: give --x/--q and/or --mu/--nu")
    if args.x is not None:
        b = drift_eval(spec, t, args.x, args.q)
        rt = duality_roundtrip(spec, t, args.x, args.q, step=args.step)
        payload.update(x=args.x, q=args.q, drift=b, roundtrip=rt)
        lines += [f"drift      b(t, x, q) = {b!r}", f"roundtrip  inf b~ + x mu + q'nu = {rt!r}"]
    if args.mu is not None:
        try:
            val = drift_conjugate(spec, t, args.mu, args.nu)
        except UseNumericConjugate:
            val = drift_conjugate_numeric(spec, t, args.mu, args.nu)
        payload.update(mu=args.mu, nu=args.nu, conjugate=_number(val))
        lines.append(f"conjugate  b~(t, mu, nu) = {_number(val)}")
    _emit(payload, args.format, args.out, lines)
    return 0


def solution_payload(cfg: ScenarioConfig, dual: DualPoint) -> dict:
    spec, pref = cfg.market(), cfg.preferences()
    curve = dual.curve
    times = curve.grid.knots[:-1]
    payload = {
        "case": cfg.case,
        "x0": cfg.x0,
        "n_steps": cfg.n_steps,
        "zeta_hat": dual.zeta_hat,
        "gamma_hat": _curve_knots(times, curve.gamma),
        "partner_hat": None if curve.partner is None else _curve_knots(times, curve.partner),
        "Y_tilde_0": dual.y_tilde.initial,
        "dual_value": dual.dual_value,
        "E_dual": dual.E_dual,
        "pi_fraction": _curve_knots(times, optimal_fraction(pref, curve)),
    }
    if spec.drift is DriftCase.LARGE_INVESTOR:
        payload["v0"] = large_investor_closed_form(spec, pref, 0.0, cfg.x0).v
    return payload


def cmd_solve(args) -> int:
    cfg = _load(args)
    dual = solve_dual(cfg.market(), cfg.preferences(), cfg.x0, cfg.grid())
    payload = solution_payload(cfg, dual)
    lines = [
        f"case          {cfg.case}",
        f"zeta_hat      {dual.zeta_hat!r}",
        f"Y_tilde_0     {dual.y_tilde.initial!r}",
        f"E_dual        {dual.E_dual!r}",
        f"dual_value    {dual.dual_value!r}",
        f"gamma_hat     {payload['gamma_hat']}",
        f"partner_hat   {payload['partner_hat']}",
        f"pi_fraction   {payload['pi_fraction']}",
    ]
    if "v0" in payload:
        lines.append(f"v(0, x0)      {payload['v0']!r}")
    _emit(payload, args.format, args.out or cfg.out, lines)
    return 0


def cmd_simulate(args) -> int:
    cfg = _load(args)
    spec, pref = cfg.market(), cfg.preferences()
    batch = simulate_brownian(cfg.grid(), cfg.n_paths, cfg.dim, cfg.seed)
    dual = solve_dual(spec, pref, cfg.x0, batch.grid)
    saddle = assemble_saddle(spec, pref, cfg.x0, batch, dual, workers=args.workers)
    budget = estimate(saddle.xi_hat * np.exp(saddle.log_N_T))
    value = estimate(np.exp(saddle.log_Gamma_T) * utility(pref, saddle.xi_hat))
    csv_path = args.csv or cfg.csv
    rows = 0
    if csv_path:
        dump = batch.subset(np.arange(min(cfg.dump_paths, cfg.n_paths)))
        knots, X = optimal_wealth(pref, dual, dump)
        frac = optimal_fraction(pref, dual.curve)
        frac = np.concatenate([frac, frac[-1:]])  # hold the last position at T
        pi = X[:, :, None] * frac[None, :, :]
        wealth = WealthPaths(knots=knots, X=X, pi=pi, bankrupt=np.zeros(len(X), dtype=bool))
        rows = write_path_csv(csv_path, dump, wealth, stride=cfg.dump_stride)
    payload = {
        "case": cfg.case,
        "n_paths": cfg.n_paths,
        "n_steps": cfg.n_steps,
        "seed": cfg.seed,
        "budget_mean": budget.mean,
        "budget_std_error": budget.std_error,
        "utility_mean": value.mean,
        "utility_std_error": value.std_error,
        "dual_value": dual.dual_value,
        "csv": csv_path,
        "csv_rows": rows,
    }
    lines = [
        f"E[xi N]          {budget.mean!r} +/- {budget.std_error:.3g}  (target {cfg.x0!r})",
        f"E[Gamma u(xi)]   {value.mean!r} +/- {value.std_error:.3g}  (dual value {dual.dual_value!r})",
    ]
    if csv_path:
        lines.append(f"wrote {rows} rows to {csv_path}")
    _emit(payload, args.format, args.out or cfg.out, lines)
    return 0


def cmd_verify(args) -> int:
    cfg = _load(args)
    spec, pref = cfg.market(), cfg.preferences()
    batch = simulate_brownian(cfg.grid(), cfg.n_paths, cfg.dim, cfg.seed)
    settings = VerifySettings(
        n_perturbations=cfg.n_perturbations,
        n_alt=cfg.n_alt,
        refinement_paths=cfg.refinement_paths,
        seed=cfg.seed,
        tolerance_scale=cfg.tolerance_scale if args.tolerance_scale is None else args.tolerance_scale,
        workers=args.workers,
    )
    rep = run_verification(spec, pref, cfg.x0, batch, settings, scenario=cfg.to_dict())
    payload = rep.to_dict(timing=args.timing)
    lines = []
    for c in rep.checks:
        se = "" if c.std_error is None else f" se={c.std_error:.3g}"
        lines.append(f"{'PASS' if c.passed else 'FAIL'}  {c.name:40s} measured={c.measured:.6g} "
                     f"target={c.target:.6g} tol={c.tolerance:.3g}{se}")
    lines.append(f"overall: {'PASS' if rep.passed else 'FAIL'} ({len(rep.failures())} of {len(rep.checks)} failed)")
    _emit(payload, args.format, args.out or cfg.out, lines)
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recursive-duality", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="scenario JSON file")
    common.add_argument("--out", help="output file (JSON)")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--paths", type=int, help="override n_paths")
    common.add_argument("--steps", type=int, help="override n_steps")
    common.add_argument("--format", choices=("json", "csv", "text"), default="text", help="stdout format")
    common.add_argument("--workers", type=int, default=1, help="threads for path chunks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transform", parents=[common], help="drift, conjugate and round-trip at given points")
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--x", type=float)
    p.add_argument("--q", type=_vector)
    p.add_argument("--mu", type=float)
    p.add_argument("--nu", type=_vector)
    p.add_argument("--step", type=float, default=0.01, help="effective-domain grid step")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("solve", parents=[common], help="dual minimizers, zeta-hat and value")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", parents=[common], help="optimal wealth paths and MC summary")
    p.add_argument("--csv", help="path dump (CSV)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", parents=[common], help="run the verification suite")
    p.add_argument("--timing", action="store_true", help="record check runtimes in the report")
    p.add_argument("--tolerance-scale", type=float, help="multiply every tolerance (0 forces failures)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.format == "csv" and args.command != "simulate":
        # csv output only makes sense for the path dump
        args.format = "text"
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
