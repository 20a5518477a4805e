"""Residual error models, individual and Monte Carlo population log-likelihoods."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Subject
from .errors import EstimationError, ModelDegeneracyError, SolverError
from .model import ETA_NAMES, UNIT_SCALE, FixedEffects, adjust_parameters
from .ode import Solver, simulate_doses

log = logging.getLogger(__name__)

PRED_FLOOR = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ResidualModel:
    sigma_pk: float = 0.20
    sigma_pd: float = 0.15
    pk_model: str = "lognormal"  # or "proportional"
    estimate: bool = False

    def __post_init__(self):
        if not (self.sigma_pk > 0 and self.sigma_pd > 0):
            raise ValueError("residual standard deviations must be positive")
        if self.pk_model not in ("lognormal", "proportional"):
            raise ValueError(f"unknown PK residual model {self.pk_model!r}")


def pk_loglik_point(obs: float, pred: float, sigma_pk: float) -> float:
    """Log-normal density of ``obs`` around ``pred`` (log-scale sd ``sigma_pk``)."""
    if pred <= PRED_FLOOR:
        raise ModelDegeneracyError(f"PK prediction {pred} at or below floor")
    if obs <= 0:
        raise ValueError(f"log-normal PK model needs obs > 0, got {obs}")
    z = (math.log(obs) - math.log(pred)) / sigma_pk
    return -0.5 * _LOG_2PI - math.log(sigma_pk) - 0.5 * z * z - math.log(obs)


def pd_loglik_point(obs: float, pred: float, sigma_pd: float) -> float:
    """Gaussian density with mean ``pred`` and sd ``sigma_pd * pred``."""
    if pred <= PRED_FLOOR:
        raise ModelDegeneracyError(f"PD prediction {pred} at or below floor")
    sd = sigma_pd * pred
    z = (obs - pred) / sd
    return -0.5 * _LOG_2PI - math.log(sd) - 0.5 * z * z


def _pk_terms(obs, pred, residual: ResidualModel):
    if np.any(pred <= PRED_FLOOR):
        raise ModelDegeneracyError(f"PK prediction {pred.min()} at or below floor")
    if residual.pk_model == "lognormal":
        lo = np.log(obs)
        z = (lo - np.log(pred)) / residual.sigma_pk
        return -0.5 * _LOG_2PI - math.log(residual.sigma_pk) - 0.5 * z * z - lo
    sd = residual.sigma_pk * pred
    z = (obs - pred) / sd
    return -0.5 * _LOG_2PI - np.log(sd) - 0.5 * z * z


def _pd_terms(obs, pred, residual: ResidualModel):
    if np.any(pred <= PRED_FLOOR):
        raise ModelDegeneracyError(f"PD prediction {pred.min()} at or below floor")
    sd = residual.sigma_pd * pred
    z = (obs - pred) / sd
    return -0.5 * _LOG_2PI - np.log(sd) - 0.5 * z * z


@dataclass(frozen=True)
class ObservationSet:
    """Observation arrays for one subject, with non-positive PK values removed
    when the PK error model is log-normal."""
    pk_t: np.ndarray
    pk_y: np.ndarray
    pd_t: np.ndarray
    pd_y: np.ndarray

    @classmethod
    def from_subject(cls, subject: Subject, residual: ResidualModel) -> "ObservationSet":
        pk = np.array(subject.pk_observations, dtype=float).reshape(-1, 2)
        pd = np.array(subject.pd_observations, dtype=float).reshape(-1, 2)
        if residual.pk_model == "lognormal" and np.any(pk[:, 1] <= 0):
            log.warning("subject %s: dropping %d non-positive PK observations",
                        subject.id, int(np.sum(pk[:, 1] <= 0)))
            pk = pk[pk[:, 1] > 0]
        return cls(pk[:, 0], pk[:, 1], pd[:, 0], pd[:, 1])

    @property
    def size(self) -> int:
        return self.pk_t.size + self.pd_t.size


def predict_subject(subject: Subject, theta: FixedEffects, eta, solver: Solver,
                    obs: ObservationSet, eta_names: Sequence[str] = ETA_NAMES):
    """PK concentrations (ng/mL) and PD responses at the observation times."""
    p = adjust_parameters(theta, eta, subject.bw, subject.comed, eta_names)
    t_end = max(subject.last_time, subject.dose_events[0][0] + solver.settings.grid_dt)
    t0 = min(0.0, subject.dose_events[0][0])
    traj = simulate_doses(p, subject.dose_events, t_end, solver, t0=t0,
                          covariates=(subject.bw, subject.comed))
    pk = traj.evaluate(obs.pk_t)[:, 0] * UNIT_SCALE / p.v1 if obs.pk_t.size else np.empty(0)
    pd = traj.evaluate(obs.pd_t)[:, 3] if obs.pd_t.size else np.empty(0)
    return pk, pd


def loglik_from_predictions(obs: ObservationSet, pk_pred, pd_pred, residual: ResidualModel) -> float:
    total = 0.0
    if obs.pk_t.size:
        total += float(np.sum(_pk_terms(obs.pk_y, pk_pred, residual)))
    if obs.pd_t.size:
        total += float(np.sum(_pd_terms(obs.pd_y, pd_pred, residual)))
    return total


def individual_loglik(subject: Subject, theta: FixedEffects, eta, residual: ResidualModel,
                      solver: Solver, eta_names: Sequence[str] = ETA_NAMES,
                      obs: ObservationSet | None = None) -> float:
    """Sum of PK and PD point log-densities for one subject at the given eta."""
    obs = obs if obs is not None else ObservationSet.from_subject(subject, residual)
    if obs.size == 0:
        return 0.0
    try:
        pk, pd = predict_subject(subject, theta, eta, solver, obs, eta_names)
        return loglik_from_predictions(obs, pk, pd, residual)
    except (SolverError, ModelDegeneracyError) as exc:
        exc.subject_id = subject.id
        exc.args = (f"subject {subject.id}: {exc}",)
        raise


# ---------------------------------------------------------------------------
# random-effects prior and Monte Carlo marginalization


def project_psd(omega, floor: float = 0.0) -> np.ndarray:
    """Symmetrize and clip eigenvalues at ``floor``."""
    omega = np.asarray(omega, dtype=float)
    sym = 0.5 * (omega + omega.T)
    w, v = np.linalg.eigh(sym)
    w = np.maximum(w, floor)
    return (v * w) @ v.T


def psd_factor(omega) -> np.ndarray:
    """Square-root factor L with L @ L.T == omega, valid for singular omega."""
    w, v = np.linalg.eigh(0.5 * (np.asarray(omega, float) + np.asarray(omega, float).T))
    return v * np.sqrt(np.maximum(w, 0.0))


class GaussianPrior:
    """N(0, omega) log-density with an eigenvalue floor so singular omega stays usable."""

    def __init__(self, omega, floor: float = 1e-8):
        w, v = np.linalg.eigh(project_psd(omega))
        w = np.maximum(w, floor)
        self._proj = v / np.sqrt(w)
        self._const = -0.5 * (len(w) * _LOG_2PI + float(np.sum(np.log(w))))

    def logpdf(self, eta) -> float:
        z = np.asarray(eta, float) @ self._proj
        return self._const - 0.5 * float(z @ z)


def log_mean_exp(values) -> float:
    values = np.asarray(values, dtype=float)
    m = np.max(values)
    if not np.isfinite(m):
        return m
    return float(m + np.log(np.mean(np.exp(values - m))))


def mc_log_marginal(loglik_fn: Callable[[np.ndarray], float], factor: np.ndarray, n_mc: int,
                    rng: np.random.Generator) -> tuple[float, float]:
    """log E[exp(loglik(eta))] for eta = factor @ z, z ~ N(0, I), with a delta-method SE."""
    z = rng.standard_normal((n_mc, factor.shape[1]))
    etas = z @ factor.T
    ll = np.array([loglik_fn(e) for e in etas])
    m = np.max(ll)
    if not np.isfinite(m):
        return -math.inf, math.inf
    w = np.exp(ll - m)
    mean_w = float(np.mean(w))
    est = float(m + math.log(mean_w))
    se = float(np.std(w, ddof=1) / math.sqrt(n_mc) / mean_w) if n_mc > 1 else 0.0
    return est, se


@dataclass(frozen=True)
class PopulationLoglik:
    estimate: float
    se: float
    per_subject: tuple[float, ...]

    @property
    def per_subject_mean(self) -> float:
        return self.estimate / len(self.per_subject) if self.per_subject else 0.0


def population_loglik_estimate(subjects: Sequence[Subject], theta: FixedEffects, omega,
                               residual: ResidualModel, n_mc: int, seed: int, solver: Solver,
                               eta_names: Sequence[str] = ETA_NAMES,
                               workers: int = 1) -> PopulationLoglik:
    """Monte Carlo estimate of the marginal population log-likelihood.

    Draws for subject ``i`` come from a stream keyed by ``(seed, subject id)``,
    so the result does not depend on ``workers``.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    factor = psd_factor(omega)

    def one(subject: Subject):
        obs = ObservationSet.from_subject(subject, residual)
        rng = np.random.default_rng([seed, subject.id])

        def ll(eta):
            try:
                return individual_loglik(subject, theta, eta, residual, solver, eta_names, obs)
            except (SolverError, ModelDegeneracyError) as exc:
                log.warning("%s", exc)
                return -math.inf

        est, se = mc_log_marginal(ll, factor, n_mc, rng)
        if not math.isfinite(est):
            raise EstimationError(f"subject {subject.id}: every Monte Carlo draw has zero likelihood")
        return est, se

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, subjects))
    else:
        results = [one(s) for s in subjects]
    per = tuple(r[0] for r in results)
    se = math.sqrt(sum(r[1] ** 2 for r in results))
    return PopulationLoglik(float(sum(per)), se, per)
