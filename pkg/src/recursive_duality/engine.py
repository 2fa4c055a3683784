"""Brownian path batches, stochastic exponentials, Euler wealth and MC reduction.

Random numbers follow a counter-based contract: path ``p`` of a batch with
seed ``s`` draws its uniforms from a Philox stream keyed by ``(s, p)``, and the
draw for (step, component) sits at position ``step * d + component`` of that
stream.  A path therefore never depends on which other paths are simulated
with it, and any subset of a batch can be regenerated in isolation.

Large batches are never materialized.  Everything that touches increments
streams over fixed chunks of paths, so results do not depend on the number of
worker threads.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import ndtri

from .market import MarketSpec, PreferenceSpec, drift_eval

# Uniform draws are floored here before the inverse normal CDF; 2**-54 is the
# smallest nonzero value numpy's double generator can emit, so only an exact 0
# is moved.
_U_FLOOR = 2.0**-54
_CACHE_LIMIT = 20_000_000  # increments kept in memory below this many floats
_CHUNK_TARGET = 20_000_000  # draws per streamed chunk


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def knots(self) -> NDArray[np.float64]:
        return np.arange(self.steps + 1) * self.dt

    def coarsen(self, factor: int) -> "TimeGrid":
        if factor < 1 or self.steps % factor:
            raise ValueError(f"{self.steps} steps are not divisible by {factor}")
        return TimeGrid(self.horizon, self.steps // factor)

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * factor)


def _normal_draws(seed: int, path_id: int, n: int) -> NDArray[np.float64]:
    key = np.array([seed, path_id], dtype=np.uint64)
    u = np.random.Generator(np.random.Philox(key=key)).random(n)
    return ndtri(np.maximum(u, _U_FLOOR))


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Brownian increments for a set of path ids on a time grid.

    ``stride`` > 1 means the batch is a coarse view of a finer draw grid:
    each increment is the sum of ``stride`` consecutive fine increments, so
    coarse and fine views describe the same Brownian path.  ``shift`` is a
    per-step drift subtracted from the increments (see ``girsanov_shift``).
    """

    grid: TimeGrid
    n_paths: int
    dim: int
    seed: int
    path_ids: NDArray[np.int64] = None
    stride: int = 1
    shift: NDArray[np.float64] | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.dim < 1:
            raise ValueError("dim must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.path_ids is None:
            object.__setattr__(self, "path_ids", np.arange(self.n_paths, dtype=np.int64))
        ids = np.asarray(self.path_ids, dtype=np.int64)
        if ids.shape != (self.n_paths,) or np.any(ids < 0):
            raise ValueError("path_ids must be n_paths nonnegative integers")
        object.__setattr__(self, "path_ids", ids)
        if self.shift is not None:
            shift = np.broadcast_to(np.asarray(self.shift, dtype=float), (self.grid.steps, self.dim)).copy()
            object.__setattr__(self, "shift", shift)

    @property
    def fine_steps(self) -> int:
        return self.grid.steps * self.stride

    def _generate(self, ids: NDArray[np.int64]) -> NDArray[np.float64]:
        n, d, k = self.grid.steps, self.dim, self.stride
        dt_fine = self.grid.dt / k
        out = np.empty((len(ids), n, d))
        scale = math.sqrt(dt_fine)
        for row, pid in enumerate(ids):
            z = _normal_draws(self.seed, int(pid), n * k * d).reshape(n, k, d)
            out[row] = (z.sum(axis=1) if k > 1 else z[:, 0, :]) * scale
        if self.shift is not None:
            out -= self.shift * self.grid.dt
        return out

    def _cacheable(self) -> bool:
        return self.n_paths * self.grid.steps * self.dim <= _CACHE_LIMIT

    @property
    def increments(self) -> NDArray[np.float64]:
        """All increments, shape (n_paths, steps, d).  Only for moderate batches."""
        if not self._cacheable():
            raise MemoryError("batch too large to materialize; use chunks()")
        if "incr" not in self._cache:
            arr = self._generate(self.path_ids)
            arr.setflags(write=False)
            self._cache["incr"] = arr
        return self._cache["incr"]

    def brownian(self) -> NDArray[np.float64]:
        """W at every knot, shape (n_paths, steps + 1, d), with W_0 = 0."""
        incr = self.increments
        W = np.zeros((self.n_paths, self.grid.steps + 1, self.dim))
        np.cumsum(incr, axis=1, out=W[:, 1:, :])
        return W

    def chunk_size(self) -> int:
        per_path = self.fine_steps * self.dim
        return max(1, _CHUNK_TARGET // per_path)

    def chunk_bounds(self, size: int | None = None) -> list[tuple[int, int]]:
        size = size or self.chunk_size()
        return [(a, min(a + size, self.n_paths)) for a in range(0, self.n_paths, size)]

    def chunk(self, start: int, stop: int) -> NDArray[np.float64]:
        if "incr" in self._cache or (self._cacheable() and self.n_paths <= self.chunk_size()):
            return self.increments[start:stop]
        return self._generate(self.path_ids[start:stop])

    def chunks(self, size: int | None = None) -> Iterator[tuple[int, NDArray[np.float64]]]:
        for a, b in self.chunk_bounds(size):
            yield a, self.chunk(a, b)

    def subset(self, index: ArrayLike) -> "PathBatch":
        """Batch of the paths at positions ``index`` (same ids, same draws)."""
        ids = self.path_ids[np.asarray(index, dtype=np.int64)]
        return replace(self, n_paths=len(ids), path_ids=ids, _cache={})

    def coarse(self, factor: int) -> "PathBatch":
        """Same Brownian paths on a grid with ``factor`` times fewer steps."""
        if self.shift is not None:
            raise ValueError("coarsen before shifting")
        return replace(self, grid=self.grid.coarsen(factor), stride=self.stride * factor, _cache={})

    def with_shift(self, shift: NDArray[np.float64]) -> "PathBatch":
        total = shift if self.shift is None else self.shift + shift
        return replace(self, shift=total, _cache={})


def simulate_brownian(grid: TimeGrid, n_paths: int, dim: int, seed: int) -> PathBatch:
    return PathBatch(grid=grid, n_paths=n_paths, dim=dim, seed=seed)


@dataclass(frozen=True)
class ControlPath:
    """Deterministic per-step controls; absent entries are None."""

    beta: NDArray[np.float64] | None = None
    gamma: NDArray[np.float64] | None = None
    mu: NDArray[np.float64] | None = None
    nu: NDArray[np.float64] | None = None

    def driver_violation(self, pref: PreferenceSpec, atol: float = 1e-12) -> float:
        """Largest violation of beta = 0, |gamma| <= K over the steps."""
        worst = 0.0
        if self.beta is not None:
            worst = max(worst, float(np.max(np.abs(self.beta))))
        if self.gamma is not None:
            excess = np.abs(np.asarray(self.gamma)) - pref.K_array
            worst = max(worst, float(np.max(excess)))
        return worst if worst > atol else 0.0


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    n_paths: int


def _per_step(values, steps: int, dim: int | None, name: str) -> NDArray[np.float64]:
    shape = (steps,) if dim is None else (steps, dim)
    arr = np.asarray(values, dtype=float)
    try:
        return np.broadcast_to(arr, shape)
    except ValueError:
        raise ValueError(f"{name} has shape {arr.shape}, grid needs {shape}") from None


def _resolve_knots(grid: TimeGrid, knots) -> NDArray[np.int64]:
    if knots is None:
        return np.arange(grid.steps + 1)
    idx = np.atleast_1d(np.asarray(knots, dtype=np.int64))
    if np.any(idx < 0) or np.any(idx > grid.steps):
        raise ValueError("knot index outside the grid")
    return idx


def path_map(batch: PathBatch, fn: Callable, workers: int = 1, chunk_paths: int | None = None):
    """Apply ``fn(start, increments)`` chunk by chunk and concatenate in path order.

    ``fn`` returns an array (leading axis = paths in the chunk) or a tuple of
    such arrays.  Chunk boundaries depend only on the batch, so the output is
    identical for every value of ``workers``.
    """
    bounds = batch.chunk_bounds(chunk_paths)

    def run(ab):
        a, b = ab
        return fn(a, batch.chunk(a, b))

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(ab) for ab in bounds]
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(len(parts[0])))
    return np.concatenate(parts)


def _log_exponential(batch, drift, vol, knots, workers) -> NDArray[np.float64]:
    """log of exp(sum drift*dt + sum vol'dW) at the selected knots."""
    grid = batch.grid
    idx = _resolve_knots(grid, knots)
    det = np.concatenate([[0.0], np.cumsum(drift * grid.dt)])[idx]
    terminal_only = len(idx) == 1 and idx[0] == grid.steps

    def fn(_, incr):
        stoch = np.einsum("msd,sd->ms", incr, vol)
        if terminal_only:
            return stoch.sum(axis=1)[:, None]
        cum = np.zeros((len(incr), grid.steps + 1))
        np.cumsum(stoch, axis=1, out=cum[:, 1:])
        return cum[:, idx]

    return path_map(batch, fn, workers) + det


def stoch_exp_N(batch: PathBatch, mu, nu, knots=None, log: bool = False, workers: int = 1):
    """N_{0,t} = exp(-int (mu + |nu|^2/2) dr - int nu' dW) at the selected knots.

    ``mu`` is per-step (steps,) or scalar, ``nu`` per-step (steps, d) or (d,).
    Returns shape (n_paths, n_knots); ``log=True`` returns the exponent.
    """
    n, d = batch.grid.steps, batch.dim
    mu = _per_step(mu, n, None, "mu")
    nu = _per_step(nu, n, d, "nu")
    out = _log_exponential(batch, -(mu + 0.5 * np.sum(nu**2, axis=1)), -nu, knots, workers)
    return out if log else np.exp(out)


def stoch_exp_Gamma(batch: PathBatch, beta, gamma, knots=None, log: bool = False, workers: int = 1):
    """Gamma_{0,t} = exp(int (beta - |gamma|^2/2) dr + int gamma' dW) at the selected knots."""
    n, d = batch.grid.steps, batch.dim
    beta = _per_step(beta, n, None, "beta")
    gamma = _per_step(gamma, n, d, "gamma")
    out = _log_exponential(batch, beta - 0.5 * np.sum(gamma**2, axis=1), gamma, knots, workers)
    return out if log else np.exp(out)


@dataclass(frozen=True)
class WealthPaths:
    knots: NDArray[np.int64]
    X: NDArray[np.float64]  # (n_paths, n_knots)
    pi: NDArray[np.float64] | None  # (n_paths, n_knots, d) when recorded
    bankrupt: NDArray[np.bool_]  # (n_paths,)


def euler_chunk(spec: MarketSpec, grid: TimeGrid, incr: NDArray[np.float64], strategy: Callable,
                x0: float, idx: NDArray[np.int64], record_pi: bool):
    """Euler scheme on one chunk of increments; see ``euler_wealth``."""
    m, n, d = incr.shape
    t_knots = grid.knots
    X = np.full(m, float(x0))
    dead = np.zeros(m, dtype=bool)
    want = np.zeros(n + 1, dtype=np.int64) - 1
    want[idx] = np.arange(len(idx))
    X_out = np.empty((m, len(idx)))
    pi_out = np.empty((m, len(idx), d)) if record_pi else None
    for i in range(n + 1):
        t = t_knots[i]
        if i == n and want[i] < 0:
            break
        pi = np.asarray(strategy(t, X), dtype=float).reshape(m, d)
        if not np.all(np.isfinite(pi)):
            raise ValueError(f"strategy returned non-finite values at t={t}")
        pi = np.where(dead[:, None], 0.0, pi)
        if want[i] >= 0:
            X_out[:, want[i]] = X
            if record_pi:
                pi_out[:, want[i]] = pi
        if i == n:
            break
        X = X + drift_eval(spec, t, X, pi) * grid.dt + np.einsum("md,md->m", pi, incr[:, i])
        X = np.where(dead, 0.0, X)
        hit = X <= 0.0
        dead |= hit
        X = np.where(hit, 0.0, X)
    return X_out, pi_out, dead


def euler_wealth(spec: MarketSpec, batch: PathBatch, strategy: Callable, x0: float, knots=None,
                 record_pi: bool = False, workers: int = 1) -> WealthPaths:
    """Forward Euler for dX = b(t, X, pi) dt + pi' dW from X_0 = x0.

    ``strategy(t, X)`` maps a knot time and the current wealth array (m,) to
    positions (m, d).  Paths that reach 0 are absorbed there and flagged.
    """
    if not x0 > 0:
        raise ValueError("x0 must be positive")
    if batch.dim != spec.dim:
        raise ValueError("batch and market dimensions differ")
    if abs(batch.grid.horizon - spec.horizon) > 1e-12 * spec.horizon:
        raise ValueError("batch horizon differs from the market horizon")
    idx = _resolve_knots(batch.grid, knots)

    def fn(_, incr):
        X, pi, dead = euler_chunk(spec, batch.grid, incr, strategy, x0, idx, record_pi)
        return (X, dead) if pi is None else (X, dead, pi)

    out = path_map(batch, fn, workers)
    pi = out[2] if record_pi else None
    return WealthPaths(knots=idx, X=out[0], pi=pi, bankrupt=out[1])


def girsanov_shift(batch: PathBatch, gamma) -> PathBatch:
    """Increments of W^gamma = W - int gamma ds on the same draws."""
    gamma = _per_step(gamma, batch.grid.steps, batch.dim, "gamma")
    return batch.with_shift(np.array(gamma))


def estimate(values: ArrayLike) -> McEstimate:
    """Mean and standard error with a fixed, order-dependent reduction."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("no values")
    if np.isnan(v).any():
        raise ValueError("NaN in path values")
    n = v.size
    mean = math.fsum(v) / n
    if n == 1:
        return McEstimate(mean, 0.0, 1)
    var = math.fsum((v - mean) ** 2) / (n - 1)
    return McEstimate(mean, math.sqrt(var / n), n)


def mc_expect(batch: PathBatch, functional: Callable, workers: int = 1) -> McEstimate:
    """MC estimate of E[functional], where ``functional(start, increments)`` returns per-path values."""
    return estimate(path_map(batch, functional, workers))


def write_path_csv(path, batch: PathBatch, wealth: WealthPaths, stride: int = 1) -> int:
    """Write ``path_id,t,W_1..W_d,X,pi_1..pi_d`` rows; returns the number of data rows."""
    if wealth.pi is None:
        raise ValueError("wealth paths were simulated without record_pi")
    d = batch.dim
    W = batch.brownian()
    keep = [j for j, k in enumerate(wealth.knots) if k % stride == 0 or k == batch.grid.steps]
    header = ["path_id", "t"] + [f"W_{i + 1}" for i in range(d)] + ["X"] + [f"pi_{i + 1}" for i in range(d)]
    knots_t = batch.grid.knots
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for p in range(batch.n_paths):
            for j in keep:
                k = wealth.knots[j]
                row = [int(batch.path_ids[p]), repr(float(knots_t[k]))]
                row += [repr(float(w)) for w in W[p, k]]
                row.append(repr(float(wealth.X[p, j])))
                row += [repr(float(v)) for v in wealth.pi[p, j]]
                writer.writerow(row)
                rows += 1
    return rows


def paired_difference(a: ArrayLike, b: ArrayLike) -> McEstimate:
    """Estimate of E[a - b] from values on common paths."""
    return estimate(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def block_sums(batch: PathBatch, n_blocks: int, workers: int = 1) -> NDArray[np.float64]:
    """Brownian increments aggregated into ``n_blocks`` equal time blocks, (n_paths, n_blocks, d)."""
    steps = batch.grid.steps
    if steps % n_blocks:
        raise ValueError(f"{steps} steps do not split into {n_blocks} blocks")
    k = steps // n_blocks

    def fn(_, incr):
        return incr.reshape(len(incr), n_blocks, k, batch.dim).sum(axis=2)

    return path_map(batch, fn, workers)


def combined_se(*ses: float) -> float:
    return math.sqrt(math.fsum(s * s for s in ses))

