"""Stochastic approximation EM with a Metropolis E-step and pluggable proposal engines."""
from __future__ import annotations

import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.optimize import minimize

from .data import Subject
from .errors import EstimationError, ModelDegeneracyError, ParameterDomainError, SettingsError, SolverError
from .likelihood import (GaussianPrior, ObservationSet, ResidualModel, individual_loglik,
                         predict_subject, project_psd)
from .model import ETA_NAMES, FixedEffects
from .ode import Solver
from .qsampler import QuantumEngine

log = logging.getLogger(__name__)

# RNG stream tags
_TAG_ESTEP, _TAG_ADAPT, _TAG_INIT = 1, 2, 3

# fixed effects that never carry a random effect; candidates for optional refinement
_POSITIVE_FIXED = ("ka", "kin", "kout")
_FREE_FIXED = ("clbw", "v1bw", "clcomed", "kincomed")


@dataclass(frozen=True)
class SaemSettings:
    n_iterations: int = 20
    n_burnin: int = 4
    mcmc_steps: int = 5
    step_sd: float = 0.1
    adapt_step: bool = True
    target_acceptance: float = 0.30
    engine: str = "classical"
    seed: int = 0
    workers: int = 1
    estimate_sigma: bool = False
    refine_fixed: bool = False
    max_failure_fraction: float = 0.5

    def __post_init__(self):
        for name in ("n_iterations", "n_burnin", "mcmc_steps", "workers"):
            if int(getattr(self, name)) < 1:
                raise SettingsError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_burnin >= self.n_iterations:
            raise SettingsError("n_burnin must be smaller than n_iterations")
        if not self.step_sd > 0:
            raise SettingsError("step_sd must be positive")
        if not 0 < self.target_acceptance < 1:
            raise SettingsError("target_acceptance must lie in (0, 1)")
        if self.engine not in ("classical", "quantum"):
            raise SettingsError(f"unknown proposal engine {self.engine!r}")


class ProposalEngine(Protocol):
    name: str

    def prepare(self) -> None: ...

    def propose(self, current: np.ndarray, step_sd: float, rng: np.random.Generator) -> np.ndarray: ...

    def adapt(self, acceptance: float, rng: np.random.Generator) -> None: ...


def propose_eta_classical(current, step_sd: float, rng: np.random.Generator) -> np.ndarray:
    """Symmetric Gaussian random-walk proposal."""
    current = np.asarray(current, dtype=float)
    return current + rng.normal(0.0, step_sd, size=current.shape)


class ClassicalEngine:
    name = "classical"

    def prepare(self) -> None:
        pass

    def propose(self, current, step_sd, rng):
        return propose_eta_classical(current, step_sd, rng)

    def adapt(self, acceptance, rng) -> None:
        pass


def metropolis_step(current_eta, current_ll: float, proposal_eta,
                    log_target: Callable[[np.ndarray], float], rng: np.random.Generator):
    """One Metropolis accept/reject step.

    ``log_target`` returns the unnormalized log posterior (data log-likelihood plus
    the eta prior).  A solver failure on the proposal counts as a rejection.
    Returns ``(eta, ll, accepted, failed)``.
    """
    try:
        ll_prop = log_target(proposal_eta)
    except (SolverError, ModelDegeneracyError, ParameterDomainError) as exc:
        log.warning("proposal rejected: %s", exc)
        return current_eta, current_ll, False, True
    if not math.isfinite(ll_prop):
        return current_eta, current_ll, False, False
    delta = ll_prop - current_ll
    if delta >= 0 or math.log(rng.random()) < delta:
        return np.asarray(proposal_eta, dtype=float), ll_prop, True, False
    return current_eta, current_ll, False, False


def gamma_schedule(k: int, n_burnin: int) -> float:
    """Step size for 1-based iteration ``k``: 1 during burn-in, then 1/(k - n_burnin)."""
    if k < 1:
        raise ValueError("iterations are counted from 1")
    return 1.0 if k <= n_burnin else 1.0 / (k - n_burnin)


@dataclass
class SufficientStatistics:
    s_log: np.ndarray    # running mean of log individual parameters (eta-carrying components)
    s_omega: np.ndarray  # running mean of eta eta^T

    @classmethod
    def initial(cls, theta: FixedEffects, omega, eta_names: Sequence[str] = ETA_NAMES):
        return cls(np.log([getattr(theta, n) for n in eta_names]), np.array(omega, dtype=float))


def update_population(theta: FixedEffects, omega, etas, k: int, n_burnin: int,
                      stats: SufficientStatistics | None = None,
                      eta_names: Sequence[str] = ETA_NAMES):
    """Stochastic-approximation M-step.

    ``etas`` holds one retained eta per subject (rows).  Returns the new theta,
    omega and statistics.  Typical values are exp of the averaged log individual
    parameters; omega is the PSD projection of the averaged second moment.
    """
    etas = np.atleast_2d(np.asarray(etas, dtype=float))
    if stats is None:
        stats = SufficientStatistics.initial(theta, omega, eta_names)
    gamma = gamma_schedule(k, n_burnin)
    log_theta = np.log([getattr(theta, n) for n in eta_names])
    phi_mean = np.mean(log_theta + etas, axis=0)
    second = etas.T @ etas / etas.shape[0]
    s_log = stats.s_log + gamma * (phi_mean - stats.s_log)
    s_omega = stats.s_omega + gamma * (second - stats.s_omega)
    if not (np.all(np.isfinite(s_omega)) and np.all(np.isfinite(s_log))):
        raise EstimationError(f"non-finite population update at iteration {k}")
    new_omega = project_psd(s_omega)
    new_theta = theta.with_values(**{n: float(math.exp(v)) for n, v in zip(eta_names, s_log)})
    return new_theta, new_omega, SufficientStatistics(s_log, new_omega)


@dataclass
class SaemTrace:
    loglik: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)
    step_sd: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def __len__(self):
        return len(self.loglik)

    def final_mean(self, n_last: int = 5) -> tuple[float, float]:
        """Mean trace log-likelihood over the last iterations and its standard error."""
        tail = np.asarray(self.loglik[-n_last:], dtype=float)
        se = float(np.std(tail, ddof=1) / math.sqrt(tail.size)) if tail.size > 1 else 0.0
        return float(np.mean(tail)), se

    def to_csv(self) -> str:
        """Per-iteration table; wall time is kept out so reruns are byte-identical."""
        names = FixedEffects.names()
        n_eta = len(self.omega[0]) if self.omega else 0
        out = io.StringIO()
        cols = ["iteration", "loglik", "acceptance", "step_sd"] + list(names)
        cols += [f"omega_{i}{i}" for i in range(n_eta)]
        out.write(",".join(cols) + "\n")
        for i in range(len(self)):
            row = [str(i), repr(float(self.loglik[i])), repr(float(self.acceptance[i])),
                   repr(float(self.step_sd[i]))]
            row += [repr(float(getattr(self.theta[i], n))) for n in names]
            row += [repr(float(self.omega[i][j][j])) for j in range(n_eta)]
            out.write(",".join(row) + "\n")
        return out.getvalue()


@dataclass
class SaemResult:
    theta: FixedEffects
    omega: np.ndarray
    residual: ResidualModel
    trace: SaemTrace
    etas: np.ndarray


@dataclass
class _Chain:
    subject: Subject
    obs: ObservationSet
    eta: np.ndarray
    ll: float = -math.inf  # data log-likelihood + log prior at eta


def _residual_moments(chain: _Chain, theta, residual, solver, eta_names):
    pk, pd = predict_subject(chain.subject, theta, chain.eta, solver, chain.obs, eta_names)
    o = chain.obs
    pk_ss = float(np.sum((np.log(o.pk_y) - np.log(pk)) ** 2)) if o.pk_t.size else 0.0
    pd_ss = float(np.sum(((o.pd_y - pd) / pd) ** 2)) if o.pd_t.size else 0.0
    return pk_ss, o.pk_t.size, pd_ss, o.pd_t.size


def _refine_fixed(theta: FixedEffects, chains, residual, solver, eta_names, workers) -> FixedEffects:
    names = _POSITIVE_FIXED + _FREE_FIXED

    def unpack(x):
        kw = {n: math.exp(v) for n, v in zip(_POSITIVE_FIXED, x[:len(_POSITIVE_FIXED)])}
        kw.update(zip(_FREE_FIXED, x[len(_POSITIVE_FIXED):]))
        return theta.with_values(**kw)

    def objective(x):
        try:
            th = unpack(x)
            return -sum(individual_loglik(c.subject, th, c.eta, residual, solver, eta_names, c.obs)
                        for c in chains)
        except (SolverError, ModelDegeneracyError, ParameterDomainError):
            return math.inf

    x0 = np.array([math.log(getattr(theta, n)) for n in _POSITIVE_FIXED]
                  + [getattr(theta, n) for n in _FREE_FIXED])
    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"maxiter": 40 * len(names), "xatol": 1e-4, "fatol": 1e-3})
    return unpack(res.x) if res.fun < objective(x0) else theta


def run_saem(subjects: Sequence[Subject], theta: FixedEffects, omega, residual: ResidualModel,
             settings: SaemSettings, engine: ProposalEngine | None = None,
             solver: Solver | None = None, eta_names: Sequence[str] = ETA_NAMES) -> SaemResult:
    """Fit typical values and the random-effect covariance by SAEM.

    Each subject keeps one Metropolis chain across iterations.  Random streams
    are keyed by (seed, subject id, iteration), so results do not depend on
    ``settings.workers``.
    """
    if not subjects:
        raise EstimationError("no subjects to fit")
    if engine is None:
        engine = QuantumEngine.from_seed(settings.seed, n_qubits=len(eta_names)) \
            if settings.engine == "quantum" else ClassicalEngine()
    solver = solver if solver is not None else Solver()
    omega = project_psd(omega)
    n_eta = len(eta_names)
    if omega.shape != (n_eta, n_eta):
        raise SettingsError(f"omega must be {n_eta}x{n_eta}")

    chains = [_Chain(s, ObservationSet.from_subject(s, residual), np.zeros(n_eta)) for s in subjects]
    stats = SufficientStatistics.initial(theta, omega, eta_names)
    step_sd = settings.step_sd
    trace = SaemTrace()
    pool = ThreadPoolExecutor(settings.workers) if settings.workers > 1 else None
    run_map = pool.map if pool is not None else map

    def data_ll(chain, th, res, eta):
        return individual_loglik(chain.subject, th, eta, res, solver, eta_names, chain.obs)

    try:
        # starting values at eta = 0
        prior = GaussianPrior(omega)

        def init(chain):
            chain.ll = data_ll(chain, theta, residual, chain.eta) + prior.logpdf(chain.eta)
            return chain

        list(run_map(init, chains))

        for it in range(settings.n_iterations):
            t_start = time.perf_counter()
            k = it + 1
            engine.prepare()
            th, res, sd = theta, residual, step_sd

            def e_step(chain):
                rng = np.random.default_rng([settings.seed, chain.subject.id, it, _TAG_ESTEP])

                def target(eta):
                    return data_ll(chain, th, res, eta) + prior.logpdf(eta)

                accepted = failed = 0
                for _ in range(settings.mcmc_steps):
                    prop = engine.propose(chain.eta, sd, rng)
                    chain.eta, chain.ll, acc, fail = metropolis_step(chain.eta, chain.ll, prop, target, rng)
                    accepted += acc
                    failed += fail
                return accepted, failed

            results = list(run_map(e_step, chains))
            n_acc = sum(r[0] for r in results)
            n_failed_subjects = sum(1 for r in results if r[1] > 0)
            if n_failed_subjects > settings.max_failure_fraction * len(chains):
                raise EstimationError(
                    f"iteration {it}: solver failed for {n_failed_subjects} of {len(chains)} subjects")
            acceptance = n_acc / (settings.mcmc_steps * len(chains))
            data_lls = [c.ll - prior.logpdf(c.eta) for c in chains]
            loglik = float(sum(data_lls))

            # M-step
            etas = np.array([c.eta for c in chains])
            old_log = np.log([getattr(theta, n) for n in eta_names])
            theta, omega, stats = update_population(theta, omega, etas, k, settings.n_burnin, stats, eta_names)
            shift = np.log([getattr(theta, n) for n in eta_names]) - old_log
            gamma = gamma_schedule(k, settings.n_burnin)

            if settings.estimate_sigma:
                moments = list(run_map(lambda c: _residual_moments(c, th, res, solver, eta_names), chains))
                pk_ss, n_pk, pd_ss, n_pd = (sum(m[i] for m in moments) for i in range(4))
                s_pk = residual.sigma_pk ** 2 + gamma * (pk_ss / max(n_pk, 1) - residual.sigma_pk ** 2)
                s_pd = residual.sigma_pd ** 2 + gamma * (pd_ss / max(n_pd, 1) - residual.sigma_pd ** 2)
                residual = ResidualModel(math.sqrt(s_pk) if n_pk else residual.sigma_pk,
                                         math.sqrt(s_pd) if n_pd else residual.sigma_pd,
                                         residual.pk_model, residual.estimate)

            # keep individual parameters fixed across the typical-value move
            for c in chains:
                c.eta = c.eta - shift
            if settings.refine_fixed:
                theta = _refine_fixed(theta, chains, residual, solver, eta_names, settings.workers)

            prior = GaussianPrior(omega)
            if settings.estimate_sigma or settings.refine_fixed:
                th, res = theta, residual

                def rescore(chain):
                    chain.ll = data_ll(chain, th, res, chain.eta) + prior.logpdf(chain.eta)

                list(run_map(rescore, chains))
            else:
                # individual parameters are unchanged, only the prior moved
                for c, d in zip(chains, data_lls):
                    c.ll = d + prior.logpdf(c.eta)

            trace.loglik.append(loglik)
            trace.acceptance.append(acceptance)
            trace.step_sd.append(step_sd)
            trace.theta.append(theta)
            trace.omega.append(omega.copy())
            trace.wall_time.append(time.perf_counter() - t_start)

            if settings.adapt_step:
                step_sd = step_sd * 1.1 if acceptance > settings.target_acceptance else step_sd / 1.1
            if k > settings.n_burnin:
                engine.adapt(acceptance, np.random.default_rng([settings.seed, it, _TAG_ADAPT]))
    finally:
        if pool is not None:
            pool.shutdown()

    return SaemResult(theta, omega, residual, trace, np.array([c.eta for c in chains]))
