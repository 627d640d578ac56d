# scorenorm/services/metrics.py
"""
Discrimination and calibration metrics over labeled scores.

Scores are treated as natural-log likelihood ratios where that matters
(Cllr, DCF). DET points are returned as raw probabilities; the probit
transform is only applied when writing plot data.
"""
import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy import optimize, special, stats

from scorenorm.config import settings
from scorenorm.errors import ScoreDataError
from scorenorm.models.schemas import LabeledScores, MetricsReport, Prior

logger = logging.getLogger(__name__)

LN2 = np.log(2.0)


def _classes(scores: LabeledScores) -> Tuple[np.ndarray, np.ndarray]:
    tar, non = scores.target_scores, scores.nontarget_scores
    if tar.size == 0 or non.size == 0:
        raise ScoreDataError(
            f"metrics need both classes, got {tar.size} target and {non.size} nontarget scores"
        )
    return tar, non


def _error_rates(tar: np.ndarray, non: np.ndarray, thresholds: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Miss rate #(tar < t)/Nt and false-alarm rate #(non >= t)/Nn per threshold."""
    pmiss = np.searchsorted(np.sort(tar), thresholds, side="left") / tar.size
    pfa = 1.0 - np.searchsorted(np.sort(non), thresholds, side="left") / non.size
    return pfa, pmiss


# ============== DET / EER ==============

def det_points(scores: LabeledScores) -> List[Tuple[float, float]]:
    """(pfa, pmiss) at every distinct score and at +inf, thresholds ascending."""
    tar, non = _classes(scores)
    thresholds = np.r_[np.unique(np.r_[tar, non]), np.inf]
    pfa, pmiss = _error_rates(tar, non, thresholds)
    return list(zip(pfa.tolist(), pmiss.tolist()))


def compute_rocch(scores: LabeledScores) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vertices of the ROC convex hull as (pfa, pmiss), from (1, 0) to (0, 1).

    Ideal posteriors (1 for targets) are sorted by score, targets first among
    ties, and fitted by pool-adjacent-violators; hull vertices sit on block
    boundaries.
    """
    tar, non = _classes(scores)
    n_tar, n_non = tar.size, non.size
    order = np.argsort(np.r_[tar, non], kind="mergesort")
    ideal = np.r_[np.ones(n_tar), np.zeros(n_non)][order]

    fit = optimize.isotonic_regression(ideal)
    left = np.asarray(fit.blocks)
    cum = np.r_[0.0, np.cumsum(ideal)]
    pmiss = cum[left] / n_tar
    pfa = (n_non - left + cum[left]) / n_non
    return pfa, pmiss


def eer(scores: LabeledScores) -> float:
    """Equal error rate where the ROC convex hull crosses pfa == pmiss."""
    pfa, pmiss = compute_rocch(scores)
    best = 0.0
    for i in range(pfa.size - 1):
        xx, yy = pfa[i:i + 2], pmiss[i:i + 2]
        if xx[0] == xx[1] or yy[0] == yy[1]:
            continue
        # line through both vertices: a*pfa + b*pmiss = 1, crossing at 1/(a+b)
        a, b = np.linalg.solve(np.column_stack((xx, yy)), np.ones(2))
        best = max(best, 1.0 / (a + b))
    return float(min(max(best, 0.0), 0.5))


# ============== Calibration ==============

def cllr(scores: LabeledScores) -> float:
    """Log-likelihood-ratio cost in bits."""
    tar, non = _classes(scores)
    c_tar = np.mean(np.logaddexp(0.0, -tar))
    c_non = np.mean(np.logaddexp(0.0, non))
    return float((c_tar + c_non) / (2.0 * LN2))


def pav_llrs(scores: LabeledScores, bound: Optional[float] = None) -> LabeledScores:
    """
    Optimally calibrated LLRs: monotone map from pool-adjacent-violators.

    Equal scores are pooled before the fit. Posterior log-odds minus the
    empirical prior log-odds are clipped to +-bound.
    """
    bound = settings.LLR_BOUND if bound is None else bound
    tar, non = _classes(scores)
    values, inverse = np.unique(np.r_[tar, non], return_inverse=True)
    is_tar = np.r_[np.ones(tar.size), np.zeros(non.size)]
    counts = np.bincount(inverse, minlength=values.size).astype(np.float64)
    frac = np.bincount(inverse, weights=is_tar, minlength=values.size) / counts

    posterior = optimize.isotonic_regression(frac, weights=counts).x
    with np.errstate(divide="ignore"):
        llr = special.logit(posterior) - np.log(tar.size / non.size)
    llr = np.clip(llr, -bound, bound)[inverse]
    return LabeledScores(target_scores=llr[:tar.size], nontarget_scores=llr[tar.size:])


def min_cllr(scores: LabeledScores) -> float:
    # the identity is itself a monotone map, so never report above cllr
    return min(cllr(pav_llrs(scores)), cllr(scores))


# ============== Detection cost ==============

def _normalized_cost(pfa: np.ndarray, pmiss: np.ndarray, prior: Prior) -> np.ndarray:
    return (prior.pi * pmiss + (1.0 - prior.pi) * pfa) / min(prior.pi, 1.0 - prior.pi)


def act_dcf(scores: LabeledScores, prior: Prior) -> float:
    """Normalized cost when thresholding LLRs at the Bayes threshold -logit(pi)."""
    tar, non = _classes(scores)
    pfa, pmiss = _error_rates(tar, non, np.array([-prior.logit]))
    return float(_normalized_cost(pfa, pmiss, prior)[0])


def min_dcf(scores: LabeledScores, prior: Prior) -> float:
    points = np.asarray(det_points(scores))
    return float(_normalized_cost(points[:, 0], points[:, 1], prior).min())


def probit(p: np.ndarray) -> np.ndarray:
    """Standard normal quantile; 0 and 1 map to -inf and +inf."""
    return stats.norm.ppf(np.asarray(p, dtype=np.float64))


def evaluate(scores: LabeledScores, prior: Optional[float] = None) -> MetricsReport:
    prior = Prior(pi=settings.DEFAULT_PRIOR if prior is None else prior)
    report = MetricsReport(
        eer=eer(scores),
        cllr=cllr(scores),
        min_cllr=min_cllr(scores),
        act_dcf=act_dcf(scores, prior),
        min_dcf=min_dcf(scores, prior),
        prior=prior.pi,
        n_target=scores.target_scores.size,
        n_nontarget=scores.nontarget_scores.size,
        det=det_points(scores),
    )
    logger.debug(f"EER={report.eer:.4f} Cllr={report.cllr:.4f} minCllr={report.min_cllr:.4f}")
    return report
