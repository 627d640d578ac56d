# scorenorm/core/classical.py
"""
Cohort-standardization baselines: T-norm, Z-norm, ZT-norm, S-norm.

All statistics use the sample standard deviation (divisor n-1). A cohort with
fewer than two scores, or with std below settings.DEGENERATE_STD, is rejected.
"""
from typing import Optional, Sequence

import numpy as np

from scorenorm.config import settings
from scorenorm.errors import DegenerateCohortError
from scorenorm.models.schemas import CohortStats, TrialContext


def cohort_stats(cohort: Sequence[float], step: str, tol: Optional[float] = None) -> CohortStats:
    tol = settings.DEGENERATE_STD if tol is None else tol
    scores = np.asarray(cohort, dtype=np.float64).reshape(-1)
    if scores.size < 2:
        raise DegenerateCohortError(f"cohort has {scores.size} score(s), need at least 2", step)
    std = float(scores.std(ddof=1))
    if not std >= tol:
        raise DegenerateCohortError(f"cohort std {std:.3g} below tolerance {tol:.1g}", step)
    return CohortStats(mean=float(scores.mean()), std=std)


def _standardize(s_trial: float, cohort: Sequence[float], step: str) -> float:
    stats = cohort_stats(cohort, step)
    return (s_trial - stats.mean) / stats.std


def tnorm(s_trial: float, cohort: Sequence[float]) -> float:
    """Standardize with the test-side cohort (trial test vs enrollment cohort)."""
    return _standardize(s_trial, cohort, "T")


def znorm(s_trial: float, cohort: Sequence[float]) -> float:
    """Standardize with the enrollment-side cohort (trial enrollment vs test cohort)."""
    return _standardize(s_trial, cohort, "Z")


def ztnorm(ctx: TrialContext) -> float:
    """
    Z-step then T-step.

    Z: the trial score is z-normalized with s_e, and each s_t[j] with row j of
    s_inter (cohort enrollment j against the test cohort).
    T: the z-normalized trial is t-normalized with the N z-normalized s_t.
    """
    z_trial = znorm(ctx.s_trial, ctx.s_e)

    if ctx.s_inter.shape[1] < 2:
        raise DegenerateCohortError(f"Z-step rows have {ctx.s_inter.shape[1]} score(s), need at least 2", "Z")
    row_mean = ctx.s_inter.mean(axis=1)
    row_std = ctx.s_inter.std(axis=1, ddof=1)
    bad = np.flatnonzero(~(row_std >= settings.DEGENERATE_STD))
    if bad.size:
        raise DegenerateCohortError(f"inter-cohort row {int(bad[0])} has degenerate std", "Z")
    z_cohort = (ctx.s_t - row_mean) / row_std

    return _standardize(z_trial, z_cohort, "T")


def snorm(s_trial: float, s_e: Sequence[float], s_t: Sequence[float]) -> float:
    """Symmetric average of the enrollment-side and test-side standardizations."""
    return 0.5 * (_standardize(s_trial, s_e, "enrollment") + _standardize(s_trial, s_t, "test"))
