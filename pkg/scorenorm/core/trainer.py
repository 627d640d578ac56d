# scorenorm/core/trainer.py
import logging
from concurrent.futures import ThreadPoolExecutor
from functools import reduce
from operator import add
from typing import Optional, Sequence, Tuple

import numpy as np

from scorenorm.config import settings
from scorenorm.core.lgsm import (
    SufficientStats,
    accumulate_stats,
    e_step,
    log_marginal,
    maximize,
    min_div_step,
)
from scorenorm.errors import NumericalError, TrainingError
from scorenorm.models.schemas import LabelMatrix, LgsmParams, ScoreMatrix, TrainTrace, validate_pair

logger = logging.getLogger(__name__)

Matrices = Sequence[Tuple[ScoreMatrix, LabelMatrix]]


class EMTrainer:
    """
    EM with minimum divergence over a collection of independent score matrices.

    The per-matrix E-steps run on up to max_workers threads; statistics and
    objectives are reduced in matrix order, so results do not depend on
    scheduling.
    """

    def __init__(
        self,
        d: int,
        tol: Optional[float] = None,
        max_iters: Optional[int] = None,
        seed: Optional[int] = None,
        max_workers: Optional[int] = None,
        min_divergence: bool = True,
    ):
        if d < 0:
            raise TrainingError(f"hidden dimension must be >= 0, got {d}")
        self.d = d
        self.tol = settings.EM_TOL if tol is None else tol
        self.max_iters = settings.EM_MAX_ITERS if max_iters is None else max_iters
        self.seed = settings.DEFAULT_SEED if seed is None else seed
        self.max_workers = max_workers or settings.MAX_WORKERS
        self.min_divergence = min_divergence
        if self.tol < 0:
            raise TrainingError(f"tolerance must be >= 0, got {self.tol}")
        if self.max_iters < 1:
            raise TrainingError(f"max_iters must be >= 1, got {self.max_iters}")

        logger.info(
            f"EMTrainer initialized: d={self.d}, tol={self.tol:.1e}, "
            f"max_iters={self.max_iters}, workers={self.max_workers}"
        )

    def initial_params(self, matrices: Matrices) -> LgsmParams:
        """Class means/variances of the raw scores, small seeded random loadings."""
        tar = np.concatenate([s.cells[l.target] for s, l in matrices])
        non = np.concatenate([s.cells[l.nontarget] for s, l in matrices])
        if tar.size == 0:
            raise TrainingError("no observed target cells in the training data")
        if non.size == 0:
            raise TrainingError("no observed nontarget cells in the training data")

        rng = np.random.default_rng(self.seed)
        var_tar = max(float(tar.var()), settings.VARIANCE_FLOOR)
        var_non = max(float(non.var()), settings.VARIANCE_FLOOR)
        scale_tar = settings.INIT_LOADING_SCALE * np.sqrt(var_tar)
        scale_non = settings.INIT_LOADING_SCALE * np.sqrt(var_non)
        return LgsmParams(
            d=self.d,
            mu_tar=float(tar.mean()),
            mu_non=float(non.mean()),
            var_tar=var_tar,
            var_non=var_non,
            alpha_tar=rng.normal(0.0, scale_tar, self.d),
            alpha_non=rng.normal(0.0, scale_non, self.d),
            beta_tar=rng.normal(0.0, scale_tar, self.d),
            beta_non=rng.normal(0.0, scale_non, self.d),
        )

    def _expect(self, pool: ThreadPoolExecutor, params: LgsmParams, matrices: Matrices) -> SufficientStats:
        def one(pair: Tuple[ScoreMatrix, LabelMatrix]) -> SufficientStats:
            scores, labels = pair
            return accumulate_stats(e_step(params, scores, labels), scores, labels)

        stats = reduce(add, pool.map(one, matrices))
        if not np.isfinite(stats.log_marginal):
            raise NumericalError("training objective is not finite")
        return stats

    def fit(self, matrices: Matrices, init: Optional[LgsmParams] = None) -> Tuple[LgsmParams, TrainTrace]:
        if not matrices:
            raise TrainingError("no training matrices given")
        for scores, labels in matrices:
            validate_pair(scores, labels)

        params = init if init is not None else self.initial_params(matrices)
        if params.d != self.d:
            raise TrainingError(f"initial params have d={params.d}, trainer expects d={self.d}")
        trace = TrainTrace()

        logger.info(f"Training on {len(matrices)} matrices")
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            stats = self._expect(pool, params, matrices)
            trace.objective.append(stats.log_marginal)

            for iteration in range(1, self.max_iters + 1):
                updated = maximize(stats)
                if self.min_divergence:
                    whitened = min_div_step(updated, stats)
                    if whitened is updated and self.d > 0:
                        trace.skipped_min_div += 1
                    updated = whitened

                new_stats = self._expect(pool, updated, matrices)
                previous, current = stats.log_marginal, new_stats.log_marginal
                trace.objective.append(current)
                trace.iterations = iteration
                params, stats = updated, new_stats

                if current < previous - settings.EM_MONOTONICITY_TOL * abs(previous):
                    trace.monotone = False
                    logger.warning(f"Objective decreased at iteration {iteration}: {previous:.10g} -> {current:.10g}")
                logger.debug(f"Iteration {iteration}: objective={current:.10g}")

                if abs(current - previous) <= self.tol * abs(previous):
                    trace.converged = True
                    break

        if trace.converged:
            logger.info(f"Converged after {trace.iterations} iterations, objective={trace.objective[-1]:.10g}")
        else:
            logger.warning(f"No convergence within {self.max_iters} iterations, objective={trace.objective[-1]:.10g}")
        return params, trace


def em_fit(
    matrices: Matrices,
    d: int,
    tol: Optional[float] = None,
    max_iters: Optional[int] = None,
    seed: Optional[int] = None,
    max_workers: Optional[int] = None,
) -> Tuple[LgsmParams, TrainTrace]:
    trainer = EMTrainer(d, tol=tol, max_iters=max_iters, seed=seed, max_workers=max_workers)
    return trainer.fit(matrices)


def collection_objective(params: LgsmParams, matrices: Matrices) -> float:
    """Sum of per-matrix log marginals (equal weights), in matrix order."""
    return float(sum(log_marginal(params, s, l) for s, l in matrices))
