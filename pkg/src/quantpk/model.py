"""Structural PK/PD model: parameters, covariates, dose-rate grid, ODE right-hand side.

State layout is ``[a1, a2, ae, r]``: central, peripheral and effect-site
amounts (mg) and the biomarker response (ng/mL).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import NamedTuple, Sequence

import numba
import numpy as np

from .errors import GridRangeError, ParameterDomainError

REFERENCE_BW = 70.0
# effect-site concentration A_E/V1 is mg/L; IC50 is ng/mL
UNIT_SCALE = 1000.0

ETA_NAMES = ("cl", "v1", "q", "v2", "ke0", "ic50")


@dataclass(frozen=True)
class FixedEffects:
    cl: float = 2.0
    v1: float = 10.0
    q: float = 1.0
    v2: float = 20.0
    ka: float = 0.5
    ke0: float = 0.1
    imax: float = 0.8
    ic50: float = 2.0
    kin: float = 5.0
    kout: float = 0.1
    clbw: float = 0.75
    v1bw: float = 1.0
    clcomed: float = 0.1
    kincomed: float = 0.1

    def __post_init__(self):
        for name in ("cl", "v1", "q", "v2", "ka", "ke0", "ic50", "kin", "kout"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterDomainError(f"{name} must be positive and finite, got {v}")
        if not 0.0 <= self.imax <= 1.0:
            raise ParameterDomainError(f"imax must lie in [0, 1], got {self.imax}")

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def to_dict(self) -> dict:
        return asdict(self)

    def with_values(self, **kw) -> "FixedEffects":
        return replace(self, **kw)


class IndividualParameters(NamedTuple):
    cl: float
    v1: float
    q: float
    v2: float
    ka: float
    ke0: float
    imax: float
    ic50: float
    kin: float
    kout: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)

    @property
    def baseline(self) -> float:
        """Drug-free steady state of the response, kin/kout."""
        return self.kin / self.kout


class CompartmentState(NamedTuple):
    a1: float
    a2: float
    ae: float
    r: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


def adjust_parameters(theta: FixedEffects, eta, bw: float, comed: int,
                      eta_names: Sequence[str] = ETA_NAMES) -> IndividualParameters:
    """Apply covariate effects and multiplicative log-normal random effects."""
    if not bw > 0:
        raise ParameterDomainError(f"body weight must be positive, got {bw}")
    eta = np.zeros(len(eta_names)) if eta is None else np.asarray(eta, dtype=float)
    if eta.shape != (len(eta_names),):
        raise ParameterDomainError(f"eta has shape {eta.shape}, expected ({len(eta_names)},)")
    scale = dict.fromkeys(("cl", "v1", "q", "v2", "ka", "ke0", "imax", "ic50", "kin", "kout"), 1.0)
    for name, e in zip(eta_names, eta):
        scale[name] = math.exp(e) if e < 700.0 else math.inf
    w = bw / REFERENCE_BW
    p = IndividualParameters(
        cl=theta.cl * scale["cl"] * w ** theta.clbw * (1.0 + theta.clcomed * comed),
        v1=theta.v1 * scale["v1"] * w ** theta.v1bw,
        q=theta.q * scale["q"],
        v2=theta.v2 * scale["v2"],
        ka=theta.ka * scale["ka"],
        ke0=theta.ke0 * scale["ke0"],
        imax=theta.imax * scale["imax"],
        ic50=theta.ic50 * scale["ic50"],
        kin=theta.kin * scale["kin"] * (1.0 + theta.kincomed * comed),
        kout=theta.kout * scale["kout"],
    )
    if not all(math.isfinite(v) for v in p):
        raise ParameterDomainError(f"non-finite individual parameters: {p}")
    if min(p.cl, p.v1, p.q, p.v2, p.ka, p.ke0, p.ic50, p.kin, p.kout) <= 0:
        raise ParameterDomainError(f"individual parameters underflowed to zero: {p}")
    return p


@dataclass(frozen=True)
class DoseRateGrid:
    """Piecewise-constant input rate: ``rates[i]`` holds on ``[t0 + i*dt, t0 + (i+1)*dt)``."""
    t0: float
    dt: float
    rates: np.ndarray

    def rate(self, t: float) -> float:
        return _grid_rate(t, self.t0, self.dt, self.rates)

    @property
    def total_amount(self) -> float:
        return float(np.sum(self.rates) * self.dt)

    def breakpoints(self) -> np.ndarray:
        """Cell edges where the rate changes value."""
        r = self.rates
        if r.size == 0:
            return np.empty(0)
        padded = np.concatenate(([0.0], r, [0.0]))
        edges = np.nonzero(np.diff(padded))[0]
        return self.t0 + edges * self.dt

    def key(self) -> tuple:
        nz = np.nonzero(self.rates)[0]
        return (self.t0, self.dt, len(self.rates), tuple(nz.tolist()), tuple(self.rates[nz].tolist()))


def build_dose_rate_grid(doses: Sequence[tuple[float, float]], t0: float, t_end: float,
                         dt: float) -> DoseRateGrid:
    """Spread each dose over the grid cell nearest to its time (ties round up)."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    n = int(math.floor((t_end - t0) / dt + 0.5 + 1e-9)) + 1
    rates = np.zeros(max(n, 1))
    for t, amount in doses:
        if t < t0 - 1e-12 or t > t_end + 1e-12:
            raise GridRangeError(t, t0, t_end)
        i = int(math.floor((t - t0) / dt + 0.5 + 1e-9))
        i = min(max(i, 0), len(rates) - 1)
        rates[i] += amount / dt
    return DoseRateGrid(t0, dt, rates)


def inhibition_factor(ce: float, imax: float, ic50: float) -> float:
    return 1.0 - imax * ce / (ic50 + ce)


@numba.njit(cache=True, nogil=True)
def _grid_rate(t, t0, dt, rates):
    i = int(math.floor((t - t0) / dt))
    if i < 0 or i >= rates.shape[0]:
        return 0.0
    return rates[i]


@numba.njit(cache=True, nogil=True)
def _rhs(y, p, rate, out):
    # p = [cl, v1, q, v2, ka, ke0, imax, ic50, kin, kout]; rate is the grid input (mg/h)
    cl, v1, q, v2, ka, ke0, imax, ic50, kin, kout = p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9]
    a1, a2, ae, r = y[0], y[1], y[2], y[3]
    ce = ae / v1 * UNIT_SCALE
    out[0] = ka * rate - (cl / v1 + q / v1) * a1 + (q / v2) * a2
    out[1] = (q / v1) * a1 - (q / v2) * a2
    out[2] = ke0 * (a1 - ae)
    out[3] = kin * (1.0 - imax * ce / (ic50 + ce)) - kout * r


def pkpd_rhs(t: float, y, p: IndividualParameters, grid: DoseRateGrid) -> CompartmentState:
    out = np.empty(4)
    _rhs(np.asarray(y, dtype=np.float64), p.as_array(), grid.rate(float(t)), out)
    return CompartmentState(*out.tolist())
