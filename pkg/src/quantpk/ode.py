"""Adaptive Dormand-Prince 5(4) integration of the PK/PD system, with dense output and memoization.

The integrator never steps across a change in the dose-rate grid and caps
the step at the grid spacing, so no dose pulse can be skipped.  Counted RHS
evaluations are calls of the right-hand side, not steps.
"""
from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .errors import DivergenceError, StiffnessError
from .model import (CompartmentState, DoseRateGrid, IndividualParameters, _grid_rate, _rhs,
                    build_dose_rate_grid)

# Dormand & Prince (1980) tableau; dense-output matrix from Shampine (1986)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.array([
    [0, 0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
])
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_E = np.array([71 / 57600, 0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

MIN_STEP = 1e-12
OK, UNDERFLOW, NONFINITE = 0, 1, 2


@numba.njit(cache=True, nogil=True)
def _grow(a, n):
    b = np.empty((n,) + a.shape[1:])
    b[: a.shape[0]] = a
    return b


@numba.njit(cache=True, nogil=True)
def _dopri5(y0, t_start, t_end, p, g_t0, g_dt, rates, bps, rtol, atol, max_step):
    nvar = 4
    cap = int((t_end - t_start) / max_step) + 2 * bps.shape[0] + 16
    times = np.empty(cap)
    states = np.empty((cap, nvar))
    dense = np.empty((cap, nvar, 4))
    times[0] = t_start
    states[0] = y0
    n = 1
    nfev = 0
    nrej = 0
    K = np.empty((7, nvar))
    ystage = np.empty(nvar)
    ynew = np.empty(nvar)
    y = y0.copy()
    t = t_start
    h = max_step
    have_k1 = False
    k1_rate = 0.0
    ib = 0
    status = 0
    while t < t_end:
        while ib < bps.shape[0] and bps[ib] <= t + 1e-12 * max(1.0, abs(t)):
            ib += 1
        stop = t_end
        if ib < bps.shape[0] and bps[ib] < t_end:
            stop = bps[ib]
        h = min(h, max_step)
        land = False
        if t + h >= stop - 1e-10 * max(1.0, abs(stop)):
            h = stop - t
            land = True
        if h < 1e-12:
            status = 1
            break
        rate = _grid_rate(t + 0.5 * h, g_t0, g_dt, rates)
        if not have_k1 or k1_rate != rate:
            _rhs(y, p, rate, K[0])
            nfev += 1
        for s in range(1, 7):
            for i in range(nvar):
                acc = y[i]
                for j in range(s):
                    acc += h * _A[s, j] * K[j, i]
                ystage[i] = acc
            if s == 6:
                for i in range(nvar):
                    ynew[i] = ystage[i]
            _rhs(ystage, p, rate, K[s])
            nfev += 1
        err = 0.0
        finite = True
        for i in range(nvar):
            e = 0.0
            for s in range(7):
                e += _E[s] * K[s, i]
            e *= h
            sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
            r = abs(e) / sc
            if not np.isfinite(ynew[i]) or not np.isfinite(r):
                finite = False
            if r > err:
                err = r
        if not finite:
            status = 2
            break
        if err <= 1.0:
            # accepted
            if n >= times.shape[0]:
                newcap = 2 * times.shape[0]
                times = _grow(times, newcap)
                states = _grow(states, newcap)
                dense = _grow(dense, newcap)
            for i in range(nvar):
                for c in range(4):
                    acc = 0.0
                    for s in range(7):
                        acc += K[s, i] * _P[s, c]
                    dense[n - 1, i, c] = h * acc
            t = stop if land else t + h
            clamped = ynew[3] < 0.0
            if clamped:
                ynew[3] = 0.0
            for i in range(nvar):
                y[i] = ynew[i]
            times[n] = t
            states[n] = y
            n += 1
            if clamped:
                have_k1 = False
            else:
                for i in range(nvar):
                    K[0, i] = K[6, i]
                have_k1 = True
                k1_rate = rate
            if err == 0.0:
                fac = 10.0
            else:
                fac = min(10.0, max(0.2, 0.9 * err ** -0.2))
            h = h * fac
        else:
            nrej += 1
            have_k1 = True
            k1_rate = rate
            h = h * max(0.2, 0.9 * err ** -0.2)
    return status, n, times[:n].copy(), states[:n].copy(), dense[: max(n - 1, 0)].copy(), nfev, n - 1, nrej, t


@dataclass(frozen=True)
class SolveSettings:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    max_step: float | None = None  # None: the dose-grid spacing
    dense_grid: tuple[float, ...] | None = None
    grid_dt: float = 0.5

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_step is not None and not self.max_step > 0:
            raise ValueError("max_step must be positive")
        if not self.grid_dt > 0:
            raise ValueError("grid_dt must be positive")


@dataclass(frozen=True)
class SolveStats:
    rhs_evaluations: int
    accepted: int
    rejected: int


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    dense: np.ndarray = field(repr=False)
    stats: SolveStats
    output: np.ndarray | None = field(default=None, repr=False)

    @property
    def nbytes(self) -> int:
        return self.times.nbytes + self.states.nbytes + self.dense.nbytes

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def evaluate(self, t) -> np.ndarray:
        """Dense-output states at one or many times; exact at stored nodes."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.times[0], self.times[-1]
        if np.any(t < lo) or np.any(t > hi):
            bad = t[(t < lo) | (t > hi)][0]
            raise ValueError(f"t={bad} outside trajectory range [{lo}, {hi}]")
        idx = np.searchsorted(self.times, t, side="right") - 1
        idx = np.clip(idx, 0, len(self.times) - 2) if len(self.times) > 1 else np.zeros_like(idx)
        out = np.empty((t.size, 4))
        exact = self.times[idx] == t
        out[exact] = self.states[idx[exact]]
        m = ~exact
        if np.any(m):
            i = idx[m]
            h = self.times[i + 1] - self.times[i]
            x = (t[m] - self.times[i]) / h
            powers = np.stack([x, x ** 2, x ** 3, x ** 4], axis=1)
            out[m] = self.states[i] + np.einsum("nvc,nc->nv", self.dense[i], powers)
            out[m, 3] = np.maximum(out[m, 3], 0.0)
        # node at the right end of the range
        last = t == self.times[-1]
        out[last] = self.states[-1]
        return out

    def dense_samples(self, per_step: int = 4) -> tuple[np.ndarray, np.ndarray]:
        """Nodes plus ``per_step`` interior dense points per accepted step."""
        if len(self.times) < 2:
            return self.times.copy(), self.states.copy()
        frac = np.arange(1, per_step + 1) / (per_step + 1)
        h = np.diff(self.times)
        interior = (self.times[:-1, None] + h[:, None] * frac[None, :]).ravel()
        t = np.sort(np.concatenate([self.times, interior]))
        return t, self.evaluate(t)


def solve_trajectory(y0, t_span: tuple[float, float], p: IndividualParameters, grid: DoseRateGrid,
                     settings: SolveSettings = SolveSettings()) -> Trajectory:
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError(f"t_span must be increasing, got {t_span}")
    if t0 < grid.t0 - 1e-12:
        raise ValueError(f"dose grid starts at {grid.t0}, after t_span start {t0}")
    max_step = settings.max_step if settings.max_step is not None else grid.dt
    y0 = np.asarray(y0, dtype=np.float64).copy()
    status, n, times, states, dense, nfev, nacc, nrej, t_last = _dopri5(
        y0, t0, t1, np.asarray(p, dtype=np.float64), float(grid.t0), float(grid.dt), grid.rates,
        grid.breakpoints(), float(settings.rel_tol), float(settings.abs_tol), float(max_step))
    if status == UNDERFLOW:
        raise StiffnessError(float(t_last), MIN_STEP)
    if status == NONFINITE:
        raise DivergenceError(float(t_last))
    traj = Trajectory(times, states, dense, SolveStats(int(nfev), int(nacc), int(nrej)))
    if settings.dense_grid is not None:
        traj.output = traj.evaluate(settings.dense_grid)
    return traj


def interpolate_solution(traj: Trajectory, t: float) -> CompartmentState:
    return CompartmentState(*traj.evaluate(t)[0].tolist())


def quantize(x: float, digits: int = 4) -> float:
    """Round to ``digits`` significant digits."""
    if x == 0 or not math.isfinite(x):
        return x
    return float(f"{x:.{digits - 1}e}")


class TrajectoryCache:
    """Bounded LRU store for trajectories with hit/miss counters."""

    def __init__(self, capacity: int = 10_000):
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._data)

    def get(self, key):
        with self._lock:
            traj = self._data.get(key)
            if traj is None:
                self.misses += 1
                return None
            self._data.move_to_end(key)
            self.hits += 1
            return traj

    def put(self, key, traj):
        with self._lock:
            self._data[key] = traj
            self._data.move_to_end(key)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)


def cache_key(p: IndividualParameters, covariates: tuple, grid: DoseRateGrid, y0, t_span,
              settings: SolveSettings, digits: int = 4) -> tuple:
    schedule = (grid.key(), tuple(float(v) for v in y0), tuple(float(v) for v in t_span),
                settings.rel_tol, settings.abs_tol, settings.max_step)
    return (tuple(quantize(v, digits) for v in p), tuple(covariates), hash(schedule), schedule)


def solve_cached(cache: TrajectoryCache, key: tuple, y0, t_span, p: IndividualParameters,
                 grid: DoseRateGrid, settings: SolveSettings = SolveSettings()) -> Trajectory:
    """Memoized solve.  The solve uses the key's quantized parameters, so the stored
    trajectory depends only on the key and concurrent callers cannot race on content."""
    hit = cache.get(key)
    if hit is not None:
        return hit
    rep = IndividualParameters(*key[0])
    traj = solve_trajectory(y0, t_span, rep, grid, settings)
    cache.put(key, traj)
    return traj


class Solver:
    """Solve settings plus an optional cache and running counters."""

    def __init__(self, settings: SolveSettings = SolveSettings(), cache: TrajectoryCache | None = None):
        self.settings = settings
        self.cache = cache
        self._lock = threading.Lock()
        self.rhs_evaluations = 0
        self.solves = 0
        self.peak_state_bytes = 0

    def solve(self, y0, t_span, p: IndividualParameters, grid: DoseRateGrid,
              covariates: tuple = ()) -> Trajectory:
        if self.cache is not None:
            key = cache_key(p, covariates, grid, y0, t_span, self.settings)
            traj = self.cache.get(key)
            computed = traj is None
            if computed:
                traj = solve_trajectory(y0, t_span, IndividualParameters(*key[0]), grid, self.settings)
                self.cache.put(key, traj)
        else:
            traj = solve_trajectory(y0, t_span, p, grid, self.settings)
            computed = True
        with self._lock:
            self.solves += 1
            if computed:
                self.rhs_evaluations += traj.stats.rhs_evaluations
            self.peak_state_bytes = max(self.peak_state_bytes, traj.nbytes)
        return traj

    def counters(self) -> dict:
        return {
            "rhs_evaluations": self.rhs_evaluations,
            "solves": self.solves,
            "cache_hits": self.cache.hits if self.cache is not None else 0,
            "cache_misses": self.cache.misses if self.cache is not None else 0,
            "peak_state_bytes": self.peak_state_bytes,
        }


def simulate_doses(p: IndividualParameters, doses: Sequence[tuple[float, float]], t_end: float,
                   solver: Solver, y0=None, t0: float = 0.0, covariates: tuple = ()) -> Trajectory:
    """Simulate a dosing history from ``t0`` (response starting at baseline by default)."""
    if y0 is None:
        y0 = (0.0, 0.0, 0.0, p.kin / p.kout)
    dt = solver.settings.grid_dt
    grid = build_dose_rate_grid(doses, t0, t_end, dt)
    return solver.solve(y0, (t0, t_end), p, grid, covariates)
