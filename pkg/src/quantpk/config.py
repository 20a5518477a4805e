"""YAML run configuration.

Example::

    dataset: data/study.csv
    output_dir: out
    seed: 7
    workers: 1
    theta: {cl: 2.0, v1: 10.0}        # overrides of the default fixed effects
    omega: [0.09, 0.09, 0.09, 0.09, 0.09, 0.09]   # diagonal, or a full 6x6 matrix
    residual: {sigma_pk: 0.2, sigma_pd: 0.15, pk_model: lognormal}
    saem: {n_iterations: 20, n_burnin: 4, mcmc_steps: 5, engine: classical}
    solver: {rel_tol: 1.0e-6, abs_tol: 1.0e-9, grid_dt: 0.5, cache_size: 10000}
    trial: {population_size: 200, threshold: 3.3, daily_grid: [...], weekly_grid: [...]}
    scenarios:                          # omitted: the default six-population matrix
      - {name: original, bw_range: [50, 100], comed_probability: 0.5,
         target_fraction: 0.9, regimen: daily}
    simulate: {population_size: 50, dose: 10.0, interval: 24.0, n_doses: 7, dt: 1.0}
    qbench: {dose: 1.0, dt: 0.25, n_steps: 40}

Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, ParameterDomainError, SettingsError
from .likelihood import ResidualModel
from .model import ETA_NAMES, FixedEffects
from .ode import SolveSettings
from .saem import SaemSettings
from .trial import DAILY_GRID, THRESHOLD, WEEKLY_GRID, ScenarioSpec, default_matrix

DEFAULT_OMEGA = tuple([0.09] * len(ETA_NAMES))


@dataclass(frozen=True)
class TrialConfig:
    population_size: int = 200
    threshold: float = THRESHOLD
    daily_grid: tuple[float, ...] = DAILY_GRID
    weekly_grid: tuple[float, ...] = WEEKLY_GRID


@dataclass(frozen=True)
class SimulateConfig:
    population_size: int = 50
    dose: float = 10.0
    interval: float = 24.0
    n_doses: int = 7
    dt: float = 1.0
    bw_range: tuple[float, float] = (50.0, 100.0)
    comed_probability: float = 0.5


@dataclass(frozen=True)
class QbenchConfig:
    dose: float = 1.0
    dt: float = 0.25
    n_steps: int = 40


@dataclass(frozen=True)
class SolverConfig:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    grid_dt: float = 0.5
    cache_size: int = 10_000


@dataclass(frozen=True)
class RunConfig:
    dataset: str | None = None
    output_dir: str = "out"
    seed: int = 0
    workers: int = 1
    theta: dict = field(default_factory=dict)
    omega: tuple = DEFAULT_OMEGA
    residual: dict = field(default_factory=dict)
    saem: dict = field(default_factory=dict)
    solver: SolverConfig = SolverConfig()
    trial: TrialConfig = TrialConfig()
    scenarios: tuple = ()
    simulate: SimulateConfig = SimulateConfig()
    qbench: QbenchConfig = QbenchConfig()

    # --- derived objects

    def fixed_effects(self) -> FixedEffects:
        return FixedEffects(**self.theta)

    def omega_matrix(self) -> np.ndarray:
        om = np.asarray(self.omega, dtype=float)
        if om.ndim == 1:
            om = np.diag(om)
        n = len(ETA_NAMES)
        if om.shape != (n, n):
            raise ConfigError(f"omega must be a length-{n} diagonal or an {n}x{n} matrix")
        if not np.allclose(om, om.T, atol=1e-12, rtol=0):
            raise ConfigError("omega must be symmetric")
        if np.min(np.linalg.eigvalsh(om)) < -1e-10:
            raise ConfigError("omega must be positive semidefinite")
        return om

    def residual_model(self) -> ResidualModel:
        return ResidualModel(**self.residual)

    def saem_settings(self, **overrides) -> SaemSettings:
        kw = {"seed": self.seed, "workers": self.workers, **self.saem, **overrides}
        return SaemSettings(**kw)

    def solve_settings(self) -> SolveSettings:
        return SolveSettings(rel_tol=self.solver.rel_tol, abs_tol=self.solver.abs_tol,
                             grid_dt=self.solver.grid_dt)

    def scenario_matrix(self) -> list[ScenarioSpec]:
        n = self.trial.population_size
        if not self.scenarios:
            return default_matrix(n, self.seed)
        out = []
        for s in self.scenarios:
            kw = {"population_size": n, "seed": self.seed, **s}
            if "bw_range" in kw:
                kw["bw_range"] = tuple(float(v) for v in kw["bw_range"])
            out.append(ScenarioSpec(**kw))
        return out

    def hash(self) -> str:
        """SHA-256 of the configuration, excluding settings that cannot change results."""
        d = asdict(self)
        d.pop("workers")
        d.pop("output_dir")
        d["saem"] = {k: v for k, v in d["saem"].items() if k != "workers"}
        text = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()

    def header(self) -> str:
        return f"# config_sha256={self.hash()} seed={self.seed}\n"


_NESTED = {"solver": SolverConfig, "trial": TrialConfig, "simulate": SimulateConfig, "qbench": QbenchConfig}
_TUPLE_FIELDS = {"daily_grid", "weekly_grid", "bw_range"}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    kw = {}
    for k, v in raw.items():
        if k in _TUPLE_FIELDS and v is not None:
            v = tuple(float(x) for x in v)
        kw[k] = v
    return cls(**kw)


def config_from_dict(raw: dict | None, base_dir: Path | None = None) -> RunConfig:
    raw = dict(raw or {})
    try:
        for key, cls in _NESTED.items():
            if key in raw:
                raw[key] = _build(cls, raw[key] or {}, key)
        if "omega" in raw:
            om = raw["omega"]
            raw["omega"] = tuple(tuple(r) if isinstance(r, list) else r for r in om)
        if "scenarios" in raw:
            raw["scenarios"] = tuple(raw["scenarios"] or ())
        for key in ("theta", "residual", "saem"):
            if key in raw and not isinstance(raw[key] or {}, dict):
                raise ConfigError(f"{key} must be a mapping")
            if key in raw:
                raw[key] = dict(raw[key] or {})
        cfg = _build(RunConfig, raw, "config")
        if cfg.dataset is not None and base_dir is not None and not Path(cfg.dataset).is_absolute():
            cfg = replace(cfg, dataset=str(base_dir / cfg.dataset))
        if base_dir is not None and not Path(cfg.output_dir).is_absolute():
            cfg = replace(cfg, output_dir=str(base_dir / cfg.output_dir))
        if not isinstance(cfg.seed, int):
            raise ConfigError("seed must be an integer")
        # validate eagerly so problems surface as configuration errors
        cfg.fixed_effects()
        cfg.omega_matrix()
        cfg.residual_model()
        cfg.saem_settings()
        cfg.scenario_matrix()
    except ConfigError:
        raise
    except (TypeError, ValueError, ParameterDomainError, SettingsError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(raw, path.parent)
