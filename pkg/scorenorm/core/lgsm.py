# scorenorm/core/lgsm.py
"""
Linear-Gaussian score model.

Every score s_ij has mean mu_h + alpha_h'x_i + beta_h'y_j and variance var_h,
with h the cell label and x_i, y_j standard-normal hidden variables shared
along rows and columns. Stacking z = (x_1..x_K, y_1..y_L) the posterior is
Gaussian with precision

    Lambda = [[A, C], [C', B]],  A_ii = P_x + sum_j a a'/var,  B_jj = P_y + sum_i b b'/var,
    C_ij = a b'/var,             gamma_x,i = sum_j (s - mu) a/var,  gamma_y,j likewise,

sums over observed cells, P_x = P_y = I unless a HiddenPrior is given. The
marginal likelihood follows from the candidate's formula evaluated at z = 0:

    log P(S) = -1/2 sum[(s - mu)^2/var + log 2 pi var] + 1/2 gamma'mu_z - 1/2 log|Lambda| - prior log-dets
"""
import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, special

from scorenorm.config import settings
from scorenorm.errors import NumericalError, ShapeError, TrainingError
from scorenorm.models.schemas import (
    HiddenPrior,
    LabelMatrix,
    LgsmParams,
    Prior,
    ScoreMatrix,
    TrialContext,
    Hypothesis,
    NON,
    TAR,
    validate_pair,
)

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
CLASSES = (TAR, NON)


class FactorizationCounter:
    """Counts Cholesky factorizations of posterior precision matrices."""

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    def increment(self):
        with self._lock:
            self._count += 1

    def reset(self):
        with self._lock:
            self._count = 0

    @property
    def count(self) -> int:
        return self._count


factorizations = FactorizationCounter()


# ============== Per-cell parameters ==============

@dataclass(frozen=True)
class CellParams:
    mu: np.ndarray      # (K, L)
    var: np.ndarray     # (K, L)
    alpha: np.ndarray   # (K, L, D)
    beta: np.ndarray    # (K, L, D)
    weight: np.ndarray  # (K, L): 1/var on observed cells, 0 elsewhere
    observed: np.ndarray


def cell_params(params: LgsmParams, labels: LabelMatrix) -> CellParams:
    tar = labels.target
    loadings = params.loadings()
    mu = np.where(tar, params.mu_tar, params.mu_non)
    var = np.where(tar, params.var_tar, params.var_non)
    alpha = np.where(tar[..., None], loadings["alpha_tar"], loadings["alpha_non"])
    beta = np.where(tar[..., None], loadings["beta_tar"], loadings["beta_non"])
    observed = labels.observed
    weight = np.where(observed, 1.0 / var, 0.0)
    return CellParams(mu=mu, var=var, alpha=alpha, beta=beta, weight=weight, observed=observed)


def _factorize(precision: np.ndarray):
    """Lower Cholesky factor; one jitter retry, then NumericalError."""
    factorizations.increment()
    try:
        return linalg.cho_factor(precision, lower=True)
    except (linalg.LinAlgError, ValueError):
        logger.warning("Posterior precision is not positive definite, retrying with jitter")
    try:
        return linalg.cho_factor(precision + settings.CHOLESKY_JITTER * np.eye(len(precision)), lower=True)
    except (linalg.LinAlgError, ValueError) as e:
        raise NumericalError(f"posterior precision is not positive definite: {e}") from e


def _log_det_spd(matrix: np.ndarray) -> float:
    try:
        chol = linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError as e:
        raise NumericalError(f"prior covariance is not positive definite: {e}") from e
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


class GridModel:
    """
    Posterior precision and its factor for one label pattern.

    Lambda depends on labels and params only, so one GridModel serves every
    score grid sharing that pattern.
    """

    def __init__(self, params: LgsmParams, labels: LabelMatrix, prior: Optional[HiddenPrior] = None):
        self.params = params
        self.labels = labels
        self.rows, self.cols = labels.shape
        self.d = params.d
        self.cells = cell_params(params, labels)
        self.size = self.d * (self.rows + self.cols)

        if prior is not None and self.d > 0:
            if prior.cov_x.shape != (self.d, self.d) or prior.cov_y.shape != (self.d, self.d):
                raise ShapeError(f"hidden prior covariances must be {self.d}x{self.d}")
            prec_x = linalg.inv(prior.cov_x)
            prec_y = linalg.inv(prior.cov_y)
            self.prior_term = -0.5 * (self.rows * _log_det_spd(prior.cov_x) + self.cols * _log_det_spd(prior.cov_y))
        else:
            prec_x = prec_y = np.eye(self.d)
            self.prior_term = 0.0

        self.precision = self._build_precision(prec_x, prec_y)
        if self.size:
            self.factor = _factorize(self.precision)
            self.log_det = 2.0 * float(np.sum(np.log(np.diag(self.factor[0]))))
        else:
            self.factor = None
            self.log_det = 0.0
        self.data_const = -0.5 * float(np.sum(np.log(2.0 * np.pi * self.cells.var[self.cells.observed])))

    def _build_precision(self, prec_x: np.ndarray, prec_y: np.ndarray) -> np.ndarray:
        c, k, d = self.cells, self.rows, self.d
        if not self.size:
            return np.zeros((0, 0))
        alpha_w = c.alpha * c.weight[..., None]
        beta_w = c.beta * c.weight[..., None]
        a_blocks = np.einsum("ijd,ije->ide", alpha_w, c.alpha) + prec_x
        b_blocks = np.einsum("ijd,ije->jde", beta_w, c.beta) + prec_y
        coupling = np.einsum("ijd,ije->idje", alpha_w, c.beta).reshape(k * d, self.cols * d)

        precision = linalg.block_diag(*a_blocks, *b_blocks)
        precision[: k * d, k * d:] = coupling
        precision[k * d:, : k * d] = coupling.T
        return precision

    def residuals(self, stack: np.ndarray) -> np.ndarray:
        """(T, K, L) score grids minus cell means, zero on unobserved cells."""
        return np.where(self.cells.observed, stack - self.cells.mu, 0.0)

    def gamma(self, resid: np.ndarray) -> np.ndarray:
        wr = resid * self.cells.weight
        gx = np.einsum("tij,ijd->tid", wr, self.cells.alpha).reshape(len(resid), -1)
        gy = np.einsum("tij,ijd->tjd", wr, self.cells.beta).reshape(len(resid), -1)
        return np.concatenate([gx, gy], axis=1)

    def solve(self, gamma: np.ndarray) -> np.ndarray:
        if not self.size:
            return np.zeros_like(gamma)
        return linalg.cho_solve(self.factor, gamma.T).T

    def evaluate(self, stack: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Log marginals, posterior means and gammas for a (T, K, L) stack of grids."""
        resid = self.residuals(stack)
        gamma = self.gamma(resid)
        mean = self.solve(gamma)
        data = -0.5 * np.sum(resid * resid * self.cells.weight, axis=(1, 2)) + self.data_const
        quad = 0.5 * np.sum(gamma * mean, axis=1)
        log_marginal = data + quad - 0.5 * self.log_det + self.prior_term
        if not np.isfinite(log_marginal).all():
            raise NumericalError("log marginal is not finite")
        return log_marginal, mean, gamma

    def covariance(self) -> np.ndarray:
        if not self.size:
            return np.zeros((0, 0))
        # selected inverse by column solves against the identity
        return linalg.cho_solve(self.factor, np.eye(self.size))


# ============== Posterior ==============

@dataclass(frozen=True)
class PosteriorSummary:
    d: int
    rows: int
    cols: int
    precision: np.ndarray
    gamma: np.ndarray
    mean: np.ndarray
    log_marginal: float
    model: GridModel = field(repr=False)

    @property
    def mean_x(self) -> np.ndarray:
        return self.mean[: self.rows * self.d].reshape(self.rows, self.d)

    @property
    def mean_y(self) -> np.ndarray:
        return self.mean[self.rows * self.d:].reshape(self.cols, self.d)

    @property
    def a_blocks(self) -> np.ndarray:
        k, d = self.rows, self.d
        p = self.precision.reshape(k + self.cols, d, k + self.cols, d)
        idx = np.arange(k)
        return p[idx, :, idx, :]

    @property
    def b_blocks(self) -> np.ndarray:
        k, d = self.rows, self.d
        p = self.precision.reshape(k + self.cols, d, k + self.cols, d)
        idx = k + np.arange(self.cols)
        return p[idx, :, idx, :]

    @property
    def c_blocks(self) -> np.ndarray:
        k, d = self.rows, self.d
        p = self.precision.reshape(k + self.cols, d, k + self.cols, d)
        return p[:k, :, k:, :].transpose(0, 2, 1, 3)

    def covariance(self) -> np.ndarray:
        return self.model.covariance()


def build_posterior(params: LgsmParams, scores: ScoreMatrix, labels: LabelMatrix,
                    prior: Optional[HiddenPrior] = None) -> PosteriorSummary:
    validate_pair(scores, labels)
    model = GridModel(params, labels, prior)
    log_marginal, mean, gamma = model.evaluate(scores.cells[None])
    return PosteriorSummary(
        d=params.d,
        rows=scores.rows,
        cols=scores.cols,
        precision=model.precision,
        gamma=gamma[0],
        mean=mean[0],
        log_marginal=float(log_marginal[0]),
        model=model,
    )


def log_marginal(params: LgsmParams, scores: ScoreMatrix, labels: LabelMatrix,
                 prior: Optional[HiddenPrior] = None) -> float:
    return build_posterior(params, scores, labels, prior).log_marginal


# ============== EM ==============

@dataclass(frozen=True)
class PosteriorMoments:
    """First and second posterior moments of the hidden variables of one matrix."""
    mean_x: np.ndarray   # (K, D)
    mean_y: np.ndarray   # (L, D)
    xx: np.ndarray       # (K, D, D)  E[x_i x_i']
    yy: np.ndarray       # (L, D, D)  E[y_j y_j']
    xy: np.ndarray       # (K, L, D, D)  E[x_i y_j']
    log_marginal: float


def e_step(params: LgsmParams, scores: ScoreMatrix, labels: LabelMatrix,
           prior: Optional[HiddenPrior] = None) -> PosteriorMoments:
    post = build_posterior(params, scores, labels, prior)
    k, l, d = post.rows, post.cols, post.d
    cov = post.covariance().reshape(k + l, d, k + l, d)
    rows, cols = np.arange(k), k + np.arange(l)
    mx, my = post.mean_x, post.mean_y

    xx = cov[rows, :, rows, :] + np.einsum("id,ie->ide", mx, mx)
    yy = cov[cols, :, cols, :] + np.einsum("jd,je->jde", my, my)
    xy = cov[:k, :, k:, :].transpose(0, 2, 1, 3) + np.einsum("id,je->ijde", mx, my)
    return PosteriorMoments(mean_x=mx, mean_y=my, xx=xx, yy=yy, xy=xy, log_marginal=post.log_marginal)


@dataclass
class ClassStats:
    """Expected normal equations of the regression s ~ [1, x_i, y_j] for one class."""
    n: float
    suu: np.ndarray   # sum E[u u']
    sus: np.ndarray   # sum s E[u]
    sss: float        # sum s^2

    def __add__(self, other: "ClassStats") -> "ClassStats":
        return ClassStats(self.n + other.n, self.suu + other.suu, self.sus + other.sus, self.sss + other.sss)


@dataclass
class SufficientStats:
    d: int
    classes: Dict[int, ClassStats]
    sum_xx: np.ndarray
    sum_yy: np.ndarray
    n_x: int
    n_y: int
    log_marginal: float

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(
            d=self.d,
            classes={h: self.classes[h] + other.classes[h] for h in CLASSES},
            sum_xx=self.sum_xx + other.sum_xx,
            sum_yy=self.sum_yy + other.sum_yy,
            n_x=self.n_x + other.n_x,
            n_y=self.n_y + other.n_y,
            log_marginal=self.log_marginal + other.log_marginal,
        )


def accumulate_stats(moments: PosteriorMoments, scores: ScoreMatrix, labels: LabelMatrix) -> SufficientStats:
    d = moments.mean_x.shape[1]
    p = 1 + 2 * d
    x_sl, y_sl = slice(1, 1 + d), slice(1 + d, p)
    s = np.where(labels.observed, scores.cells, 0.0)
    classes = {}
    for h in CLASSES:
        mask = (labels.codes == h).astype(np.float64)
        ms = mask * s
        suu = np.zeros((p, p))
        suu[0, 0] = mask.sum()
        suu[0, x_sl] = np.einsum("ij,id->d", mask, moments.mean_x)
        suu[0, y_sl] = np.einsum("ij,jd->d", mask, moments.mean_y)
        suu[x_sl, x_sl] = np.einsum("ij,ide->de", mask, moments.xx)
        suu[y_sl, y_sl] = np.einsum("ij,jde->de", mask, moments.yy)
        suu[x_sl, y_sl] = np.einsum("ij,ijde->de", mask, moments.xy)
        suu[x_sl, 0] = suu[0, x_sl]
        suu[y_sl, 0] = suu[0, y_sl]
        suu[y_sl, x_sl] = suu[x_sl, y_sl].T

        sus = np.concatenate([
            [ms.sum()],
            np.einsum("ij,id->d", ms, moments.mean_x),
            np.einsum("ij,jd->d", ms, moments.mean_y),
        ])
        classes[h] = ClassStats(n=float(suu[0, 0]), suu=suu, sus=sus, sss=float(np.sum(ms * s)))

    return SufficientStats(
        d=d,
        classes=classes,
        sum_xx=moments.xx.sum(axis=0),
        sum_yy=moments.yy.sum(axis=0),
        n_x=moments.xx.shape[0],
        n_y=moments.yy.shape[0],
        log_marginal=moments.log_marginal,
    )


def _class_weights(params: LgsmParams, h: int) -> Tuple[np.ndarray, float]:
    loadings = params.loadings()
    if h == TAR:
        return np.concatenate([[params.mu_tar], loadings["alpha_tar"], loadings["beta_tar"]]), params.var_tar
    return np.concatenate([[params.mu_non], loadings["alpha_non"], loadings["beta_non"]]), params.var_non


def _expected_sq_residual(cs: ClassStats, w: np.ndarray) -> float:
    return float(cs.sss - 2.0 * w @ cs.sus + w @ cs.suu @ w)


def expected_complete_loglik(params: LgsmParams, stats: SufficientStats) -> float:
    """Expected log-likelihood of the scores given the hidden variables (the M-step objective)."""
    total = 0.0
    for h in CLASSES:
        cs = stats.classes[h]
        w, var = _class_weights(params, h)
        total += -0.5 * (cs.n * (LOG_2PI + np.log(var)) + _expected_sq_residual(cs, w) / var)
    return float(total)


def maximize(stats: SufficientStats, floor: Optional[float] = None, ridge: Optional[float] = None) -> LgsmParams:
    """Closed-form M-step: per-class expected least squares of s on [1, x_i, y_j]."""
    floor = settings.VARIANCE_FLOOR if floor is None else floor
    ridge = settings.RIDGE if ridge is None else ridge
    d = stats.d
    fitted = {}
    for h in CLASSES:
        cs = stats.classes[h]
        if cs.n <= 0:
            name = "target" if h == TAR else "nontarget"
            raise TrainingError(f"no observed {name} cells in the training data")
        try:
            w = linalg.solve(cs.suu, cs.sus, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            scale = ridge * max(np.trace(cs.suu) / len(cs.suu), 1.0)
            logger.warning(f"Singular normal equations for class {h}, adding ridge {scale:.1e}")
            w = linalg.solve(cs.suu + scale * np.eye(len(cs.suu)), cs.sus, assume_a="pos")
        var = max(_expected_sq_residual(cs, w) / cs.n, floor)
        fitted[h] = (w, var)

    (w_t, var_t), (w_n, var_n) = fitted[TAR], fitted[NON]
    return LgsmParams(
        d=d,
        mu_tar=float(w_t[0]),
        mu_non=float(w_n[0]),
        var_tar=var_t,
        var_non=var_n,
        alpha_tar=w_t[1:1 + d],
        alpha_non=w_n[1:1 + d],
        beta_tar=w_t[1 + d:],
        beta_non=w_n[1 + d:],
    )


def m_step(moments: PosteriorMoments, scores: ScoreMatrix, labels: LabelMatrix) -> LgsmParams:
    return maximize(accumulate_stats(moments, scores, labels))


def empirical_moments(stats: SufficientStats) -> Tuple[np.ndarray, np.ndarray]:
    """Pooled posterior second moments of the x-space and y-space hidden variables."""
    return stats.sum_xx / stats.n_x, stats.sum_yy / stats.n_y


def _sqrtm_spd(matrix: np.ndarray) -> Optional[np.ndarray]:
    sym = 0.5 * (matrix + matrix.T)
    eigvals, eigvecs = linalg.eigh(sym)
    if not np.all(eigvals > 0.0):
        return None
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def min_div_step(params: LgsmParams, stats: SufficientStats) -> LgsmParams:
    """
    Minimum-divergence re-standardization.

    The empirical moments M_x, M_y are the ML prior covariances for the given
    statistics; mapping x = M_x^{1/2} x' turns that prior back into N(0, I)
    and moves M_x^{1/2} into both alpha loadings (likewise for y and beta).
    """
    if params.d == 0:
        return params
    m_x, m_y = empirical_moments(stats)
    root_x, root_y = _sqrtm_spd(m_x), _sqrtm_spd(m_y)
    if root_x is None or root_y is None:
        logger.warning("Empirical hidden moments are not positive definite, skipping minimum-divergence step")
        return params

    loadings = params.loadings()
    return LgsmParams(**{
        **params.model_dump(),
        "alpha_tar": root_x @ loadings["alpha_tar"],
        "alpha_non": root_x @ loadings["alpha_non"],
        "beta_tar": root_y @ loadings["beta_tar"],
        "beta_non": root_y @ loadings["beta_non"],
    })


# ============== Scoring ==============

def _trial_stack(s_inter: np.ndarray, trials: Sequence[Tuple[float, Sequence[float], Sequence[float]]],
                 observed: np.ndarray) -> np.ndarray:
    """(T, N+1, M+1) score grids; only cells marked in `observed` must be finite."""
    n, m = s_inter.shape
    stack = np.empty((len(trials), n + 1, m + 1), dtype=np.float64)
    stack[:, :n, :m] = s_inter
    for t, (s_trial, s_e, s_t) in enumerate(trials):
        s_e = np.asarray(s_e, dtype=np.float64).reshape(-1)
        s_t = np.asarray(s_t, dtype=np.float64).reshape(-1)
        if s_e.shape != (m,) or s_t.shape != (n,):
            raise ShapeError(f"trial {t}: s_e has {s_e.size} scores (expected {m}), s_t has {s_t.size} (expected {n})")
        stack[t, n, :m] = s_e
        stack[t, :n, m] = s_t
        stack[t, n, m] = s_trial
    if not np.isfinite(stack[:, observed]).all():
        raise ShapeError("observed trial and cohort scores must be finite")
    return stack


def normalize_batch(params: LgsmParams, cohort: Tuple[np.ndarray, Optional[LabelMatrix]],
                    trials: Sequence[Tuple[float, Sequence[float], Sequence[float]]]) -> np.ndarray:
    """
    Normalized scores for trials sharing one cohort and one label pattern.

    `cohort` is (s_inter, labels) with labels over the full (N+1)x(M+1) grid
    (trial cell ignored; all nontarget when None). Exactly two precision
    factorizations are made, one per trial hypothesis.
    """
    s_inter, labels = cohort
    s_inter = np.asarray(s_inter, dtype=np.float64)
    if s_inter.size == 0 and s_inter.ndim != 2:
        s_inter = s_inter.reshape(0, 0)
    if s_inter.ndim != 2:
        raise ShapeError(f"inter-cohort scores must be 2-D, got shape {s_inter.shape}")
    n, m = s_inter.shape
    if labels is None:
        labels = LabelMatrix.full((n + 1, m + 1))
    if labels.shape != (n + 1, m + 1):
        raise ShapeError(f"cohort labels have shape {labels.shape}, expected ({n + 1}, {m + 1})")
    if not trials:
        return np.zeros(0)

    observed = labels.observed.copy()
    observed[n, m] = True
    stack = _trial_stack(s_inter, trials, observed)
    tar_model = GridModel(params, labels.with_cell(n, m, Hypothesis.TARGET))
    non_model = GridModel(params, labels.with_cell(n, m, Hypothesis.NONTARGET))
    llr = tar_model.evaluate(stack)[0] - non_model.evaluate(stack)[0]
    logger.debug(f"Normalized {len(trials)} trials against a {n}x{m} cohort")
    return llr


def normalize_trial(params: LgsmParams, ctx: TrialContext) -> float:
    """LLR of the trial cell being target vs nontarget given all cohort scores."""
    return float(normalize_batch(params, (ctx.s_inter, ctx.cohort_labels), [(ctx.s_trial, ctx.s_e, ctx.s_t)])[0])


def target_posterior(s_norm: float, prior: Prior) -> float:
    return float(special.expit(s_norm + prior.logit))
