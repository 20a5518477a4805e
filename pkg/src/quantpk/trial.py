"""Virtual populations, steady-state regimen simulation and grid dose optimization."""
from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import SettingsError
from .likelihood import psd_factor
from .model import ETA_NAMES, FixedEffects, adjust_parameters
from .ode import Solver, SolveSettings, Trajectory, simulate_doses

THRESHOLD = 3.3  # ng/mL
REGIMENS = {"daily": 24.0, "weekly": 168.0}
DAILY_GRID = tuple(round(0.5 * i, 1) for i in range(1, 41))
WEEKLY_GRID = tuple(float(d) for d in range(5, 55, 5))
MAX_INTERVALS = 42
TROUGH_TOL = 1e-3


def default_grid(regimen: str) -> tuple[float, ...]:
    return DAILY_GRID if regimen == "daily" else WEEKLY_GRID


def trial_solver() -> Solver:
    # one dose cell per interval, so the step cap can be the whole interval
    return Solver(SolveSettings(max_step=24.0))


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    bw_range: tuple[float, float] = (50.0, 100.0)
    comed_probability: float = 0.5
    target_fraction: float = 0.90
    regimen: str = "daily"
    population_size: int = 200
    seed: int = 0

    def __post_init__(self):
        if not self.bw_range[0] < self.bw_range[1]:
            raise SettingsError(f"{self.name}: bw_range must be increasing")
        if not 0.0 <= self.comed_probability <= 1.0:
            raise SettingsError(f"{self.name}: comed_probability must lie in [0, 1]")
        if not 0.0 <= self.target_fraction <= 1.0:
            raise SettingsError(f"{self.name}: target_fraction must lie in [0, 1]")
        if self.regimen not in REGIMENS:
            raise SettingsError(f"{self.name}: regimen must be one of {sorted(REGIMENS)}")
        if self.population_size < 1:
            raise SettingsError(f"{self.name}: population_size must be >= 1")

    @property
    def interval(self) -> float:
        return REGIMENS[self.regimen]

    def population_key(self) -> tuple:
        return (tuple(self.bw_range), self.comed_probability, self.population_size, self.seed)


@dataclass(frozen=True)
class VirtualSubject:
    bw: float
    comed: int
    eta: np.ndarray


@dataclass(frozen=True)
class SteadyState:
    trajectory: Trajectory  # final interval, time measured from its dose
    n_intervals: int
    converged: bool
    troughs: tuple[float, ...]


@dataclass(frozen=True)
class DoseRecommendation:
    scenario: str
    regimen: str
    target: float
    selected_dose: float
    achieved_fraction: float
    boundary_flag: bool
    grid: tuple[tuple[float, float], ...]


def default_matrix(population_size: int = 200, seed: int = 0) -> list[ScenarioSpec]:
    """Original, heavy and no-COMED populations x daily/weekly x 90%/75% targets."""
    pops = [("original", (50.0, 100.0), 0.5), ("heavy", (70.0, 140.0), 0.5), ("no_comed", (50.0, 100.0), 0.0)]
    return [ScenarioSpec(name, bw, p, target, regimen, population_size, seed)
            for name, bw, p in pops for regimen in ("daily", "weekly") for target in (0.90, 0.75)]


def generate_population(spec: ScenarioSpec, omega, rng: np.random.Generator) -> list[VirtualSubject]:
    factor = psd_factor(omega)
    n = spec.population_size
    bw = rng.uniform(spec.bw_range[0], spec.bw_range[1], n)
    comed = (rng.random(n) < spec.comed_probability).astype(int)
    z = rng.standard_normal((n, factor.shape[1]))
    etas = z @ factor.T
    return [VirtualSubject(float(bw[i]), int(comed[i]), etas[i]) for i in range(n)]


def simulate_regimen(individual: VirtualSubject, dose: float, interval: float, theta: FixedEffects,
                     solver: Solver, max_intervals: int = MAX_INTERVALS,
                     tol: float = TROUGH_TOL) -> SteadyState:
    """Repeat the dosing interval until the trough response settles (or the cap is hit)."""
    if dose < 0:
        raise ValueError("dose must be non-negative")
    p = adjust_parameters(theta, individual.eta, individual.bw, individual.comed)
    y = np.array([0.0, 0.0, 0.0, p.kin / p.kout])
    doses = [(0.0, dose)] if dose > 0 else []
    troughs = [float(y[3])]
    converged = False
    traj = None
    for _ in range(max_intervals):
        traj = simulate_doses(p, doses, interval, solver, y0=y, covariates=(individual.bw, individual.comed))
        y = traj.states[-1].copy()
        trough = float(y[3])
        prev = troughs[-1]
        troughs.append(trough)
        if abs(trough - prev) < tol * abs(prev):
            converged = True
            break
    return SteadyState(traj, len(troughs) - 1, converged, tuple(troughs))


def max_response(traj: Trajectory, per_step: int = 4) -> float:
    """Maximum of R over the interval (nodes plus dense-output interior points)."""
    _, y = traj.dense_samples(per_step)
    return float(np.max(y[:, 3]))


def target_achieved(traj_or_values, threshold: float = THRESHOLD) -> bool:
    """True iff the response stays strictly below ``threshold`` over the interval."""
    if isinstance(traj_or_values, Trajectory):
        peak = max_response(traj_or_values)
    else:
        peak = float(np.max(np.asarray(traj_or_values, dtype=float)))
    return peak < threshold


def achievement_fractions(population: Sequence[VirtualSubject], doses: Sequence[float], interval: float,
                          theta: FixedEffects, solver: Solver, threshold: float = THRESHOLD,
                          workers: int = 1) -> list[float]:
    """Fraction of ``population`` meeting the target at each dose (common random numbers)."""
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    run_map = pool.map if pool is not None else map
    try:
        out = []
        for d in doses:
            ok = list(run_map(lambda s: target_achieved(
                simulate_regimen(s, d, interval, theta, solver).trajectory, threshold), population))
            out.append(sum(ok) / len(population))
        return out
    finally:
        if pool is not None:
            pool.shutdown()


def select_dose(doses: Sequence[float], fractions: Sequence[float], target: float) -> tuple[float, float, bool]:
    """Smallest dose meeting ``target``; the largest dose with a boundary flag if none does."""
    for d, f in zip(doses, fractions):
        if f >= target:
            return d, f, False
    return doses[-1], fractions[-1], True


def optimize_dose(scenario: ScenarioSpec, theta: FixedEffects, omega, grid: Sequence[float] | None = None,
                  solver: Solver | None = None, threshold: float = THRESHOLD, workers: int = 1,
                  fractions: Sequence[float] | None = None) -> DoseRecommendation:
    grid = tuple(default_grid(scenario.regimen) if grid is None else grid)
    if not grid or list(grid) != sorted(grid):
        raise SettingsError("dose grid must be non-empty and ascending")
    if fractions is None:
        solver = solver if solver is not None else trial_solver()
        population = generate_population(scenario, omega, np.random.default_rng(scenario.seed))
        fractions = achievement_fractions(population, grid, scenario.interval, theta, solver, threshold, workers)
    dose, frac, boundary = select_dose(grid, fractions, scenario.target_fraction)
    return DoseRecommendation(scenario.name, scenario.regimen, scenario.target_fraction, dose, frac,
                              boundary, tuple(zip(grid, fractions)))


def run_scenarios(matrix: Sequence[ScenarioSpec], theta: FixedEffects, omega,
                  grids: dict | None = None, solver: Solver | None = None, threshold: float = THRESHOLD,
                  workers: int = 1) -> list[DoseRecommendation]:
    """Evaluate every scenario; populations and dose grids shared across targets are simulated once."""
    grids = grids or {}
    solver = solver if solver is not None else trial_solver()
    cache: dict = {}
    out = []
    for spec in matrix:
        grid = tuple(grids.get(spec.regimen, default_grid(spec.regimen)))
        key = (spec.population_key(), spec.regimen, grid)
        if key not in cache:
            population = generate_population(spec, omega, np.random.default_rng(spec.seed))
            cache[key] = achievement_fractions(population, grid, spec.interval, theta, solver, threshold, workers)
        out.append(optimize_dose(spec, theta, omega, grid, threshold=threshold, fractions=cache[key]))
    return out


def recommendations_csv(recs: Sequence[DoseRecommendation]) -> str:
    out = io.StringIO()
    out.write("scenario,regimen,target,dose_mg,achieved_fraction,boundary_flag\n")
    for r in recs:
        out.write(f"{r.scenario},{r.regimen},{r.target!r},{r.selected_dose!r},"
                  f"{r.achieved_fraction!r},{str(r.boundary_flag).lower()}\n")
    return out.getvalue()


def grid_csv(recs: Sequence[DoseRecommendation]) -> str:
    out = io.StringIO()
    out.write("scenario,regimen,target,dose_mg,achieved_fraction\n")
    for r in recs:
        for d, f in r.grid:
            out.write(f"{r.scenario},{r.regimen},{r.target!r},{d!r},{f!r}\n")
    return out.getvalue()


def reductions(recs: Sequence[DoseRecommendation], high: float = 0.90, low: float = 0.75) -> list[dict]:
    """Relative dose reduction when relaxing the target from ``high`` to ``low``."""
    by_key = {(r.scenario, r.regimen, r.target): r for r in recs}
    rows = []
    for (name, regimen, target), r in by_key.items():
        if not math.isclose(target, high):
            continue
        lo = next((v for (n2, g2, t2), v in by_key.items()
                   if n2 == name and g2 == regimen and math.isclose(t2, low)), None)
        if lo is None:
            continue
        d90, d75 = r.selected_dose, lo.selected_dose
        rows.append({"scenario": name, "regimen": regimen, "dose_high": d90, "dose_low": d75,
                     "reduction_percent": 100.0 * (d90 - d75) / d90,
                     "boundary_high": r.boundary_flag, "boundary_low": lo.boundary_flag})
    return rows


def reductions_csv(rows: Sequence[dict]) -> str:
    out = io.StringIO()
    out.write("scenario,regimen,dose_90,dose_75,reduction_percent,boundary_90,boundary_75\n")
    for r in rows:
        out.write(f"{r['scenario']},{r['regimen']},{r['dose_high']!r},{r['dose_low']!r},"
                  f"{r['reduction_percent']!r},{str(r['boundary_high']).lower()},"
                  f"{str(r['boundary_low']).lower()}\n")
    return out.getvalue()
