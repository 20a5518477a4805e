"""Between-subject CV% profiles and residual diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .likelihood import ResidualModel

MEAN_FLOOR = 1e-12


@dataclass
class CvProfile:
    times: np.ndarray
    cv_percent: np.ndarray
    skipped: list = field(default_factory=list)  # (time, reason)


def compute_cv_profile(times, values) -> CvProfile:
    """CV% = 100 * sd / mean per time bin (sample sd, n - 1).

    ``values`` has one row per subject and one column per bin; NaN marks a
    subject without a value in that bin.  Bins with fewer than two values or a
    mean below 1e-12 are skipped and listed in ``skipped``.
    """
    times = np.asarray(times, dtype=float)
    values = np.atleast_2d(np.asarray(values, dtype=float))
    keep_t, keep_cv, skipped = [], [], []
    for j, t in enumerate(times):
        col = values[:, j]
        col = col[np.isfinite(col)]
        if col.size < 2:
            skipped.append((float(t), f"{col.size} subject(s) in bin"))
            continue
        mean = float(np.mean(col))
        if abs(mean) < MEAN_FLOOR:
            skipped.append((float(t), "mean below floor"))
            continue
        keep_t.append(float(t))
        keep_cv.append(100.0 * float(np.std(col, ddof=1)) / mean)
    return CvProfile(np.array(keep_t), np.array(keep_cv), skipped)


@dataclass
class Residuals:
    residual: np.ndarray
    percent: np.ndarray
    standardized: np.ndarray
    valid: np.ndarray  # False where pred <= 0 (or obs <= 0 for log-scale PK)


def compute_residuals(obs, pred, kind: str, residual: ResidualModel = ResidualModel()) -> Residuals:
    """Absolute, percent and standardized residuals; ``kind`` is 'pk' or 'pd'."""
    obs = np.asarray(obs, dtype=float)
    pred = np.asarray(pred, dtype=float)
    valid = pred > 0
    if kind == "pk" and residual.pk_model == "lognormal":
        valid &= obs > 0
    safe_pred = np.where(valid, pred, 1.0)
    res = obs - pred
    pct = np.where(valid, 100.0 * res / safe_pred, np.nan)
    if kind == "pk":
        if residual.pk_model == "lognormal":
            std = (np.log(np.where(valid, obs, 1.0)) - np.log(safe_pred)) / residual.sigma_pk
        else:
            std = res / (residual.sigma_pk * safe_pred)
    elif kind == "pd":
        std = res / (residual.sigma_pd * safe_pred)
    else:
        raise ValueError(f"kind must be 'pk' or 'pd', got {kind!r}")
    std = np.where(valid, std, np.nan)
    return Residuals(res, pct, std, valid)


def cv_of(values) -> float:
    values = np.asarray(values, dtype=float)
    return 100.0 * float(np.std(values, ddof=1)) / float(np.mean(values)) if values.size > 1 else math.nan
