# scorenorm/services/synthetic.py
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from scorenorm.config import settings
from scorenorm.errors import ShapeError
from scorenorm.models.schemas import (
    CODE_HYPOTHESES,
    NON,
    TAR,
    CorpusSpec,
    Hypothesis,
    LabelMatrix,
    LgsmParams,
    ScoreMatrix,
    TargetLayout,
    TrialContext,
)

logger = logging.getLogger(__name__)

Seed = Union[int, np.random.SeedSequence]


def layout_labels(rows: int, cols: int, layout: TargetLayout, block_size: int = 1) -> LabelMatrix:
    """
    Target/nontarget pattern of a synthetic matrix.

    diagonal: cell (i, i) is target; block: cells whose row and column fall
    in the same block of `block_size` are targets; none: all nontarget.
    """
    i = np.arange(rows)[:, None]
    j = np.arange(cols)[None, :]
    if layout == TargetLayout.DIAGONAL:
        target = i == j
    elif layout == TargetLayout.BLOCK:
        target = (i // block_size) == (j // block_size)
    else:
        target = np.zeros((rows, cols), dtype=bool)
    return LabelMatrix(codes=np.where(target, TAR, NON))


def _class_means(params: LgsmParams, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(rows, cols) means under each hypothesis for hidden draws x (rows, d), y (cols, d)."""
    loads = params.loadings()
    tar = params.mu_tar + (x @ loads["alpha_tar"])[:, None] + (y @ loads["beta_tar"])[None, :]
    non = params.mu_non + (x @ loads["alpha_non"])[:, None] + (y @ loads["beta_non"])[None, :]
    return tar, non


def _draw_cells(params: LgsmParams, x: np.ndarray, y: np.ndarray, codes: np.ndarray,
                noise: np.ndarray) -> np.ndarray:
    tar, non = _class_means(params, x, y)
    return np.where(
        codes == TAR,
        tar + np.sqrt(params.var_tar) * noise,
        non + np.sqrt(params.var_non) * noise,
    )


def sample_matrix(
    params: LgsmParams,
    rows: int,
    cols: int,
    layout: TargetLayout = TargetLayout.DIAGONAL,
    block_size: int = 1,
    seed: Seed = 0,
) -> Tuple[ScoreMatrix, LabelMatrix]:
    """Draw one score matrix; generator streams are consumed as x, then y, then noise."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix must be at least 1x1, got {rows}x{cols}")
    labels = layout_labels(rows, cols, layout, block_size)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, params.d))
    y = rng.standard_normal((cols, params.d))
    noise = rng.standard_normal((rows, cols))
    scores = ScoreMatrix(cells=_draw_cells(params, x, y, labels.codes, noise))
    return scores, labels


def sample_corpus(params: LgsmParams, spec: CorpusSpec,
                  max_workers: Optional[int] = None) -> List[Tuple[ScoreMatrix, LabelMatrix]]:
    """Independent matrices, one spawned seed per matrix, returned in matrix order."""
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_matrices)

    def draw(seed: np.random.SeedSequence) -> Tuple[ScoreMatrix, LabelMatrix]:
        return sample_matrix(params, spec.rows, spec.cols, spec.layout, spec.block_size, seed)

    with ThreadPoolExecutor(max_workers=max_workers or settings.MAX_WORKERS) as pool:
        corpus = list(pool.map(draw, seeds))

    logger.info(
        f"Sampled {spec.n_matrices} matrices of {spec.rows}x{spec.cols} "
        f"(layout={spec.layout.value}, seed={spec.seed})"
    )
    return corpus


@dataclass(frozen=True)
class EvalSet:
    """Trials sharing one fixed cohort; trial k has scores (s_trial[k], s_e[k], s_t[k])."""
    s_inter: np.ndarray      # (N, M)
    s_trial: np.ndarray      # (T,)
    s_e: np.ndarray          # (T, M)
    s_t: np.ndarray          # (T, N)
    labels: Tuple[Hypothesis, ...]

    @property
    def n_trials(self) -> int:
        return self.s_trial.size

    def trials(self) -> List[Tuple[float, np.ndarray, np.ndarray]]:
        return [(float(self.s_trial[k]), self.s_e[k], self.s_t[k]) for k in range(self.n_trials)]

    def contexts(self) -> List[TrialContext]:
        return [
            TrialContext(s_trial=s, s_e=s_e, s_t=s_t, s_inter=self.s_inter)
            for s, s_e, s_t in self.trials()
        ]

    def split(self) -> Tuple[np.ndarray, np.ndarray]:
        """Index arrays of target and nontarget trials."""
        is_target = np.array([h == Hypothesis.TARGET for h in self.labels], dtype=bool)
        return np.flatnonzero(is_target), np.flatnonzero(~is_target)


def sample_eval_set(
    params: LgsmParams,
    n_enroll: int,
    n_test: int,
    n_target: int,
    n_nontarget: int,
    seed: Seed = 0,
) -> EvalSet:
    """
    Cohort plus trials drawn from one joint model.

    The cohort (N enrollments, M tests, all-nontarget inter-cohort scores) is
    drawn once; every trial gets a fresh enrollment x and test y, shared
    by its trial score and its N+M cohort scores. Trial labels are shuffled.
    """
    if n_enroll < 2 or n_test < 2:
        raise ShapeError(f"cohort sizes must be at least 2, got N={n_enroll}, M={n_test}")
    if n_target < 0 or n_nontarget < 0 or n_target + n_nontarget == 0:
        raise ShapeError(f"need a positive number of trials, got {n_target} target + {n_nontarget} nontarget")

    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    cohort_seed, trial_seed = root.spawn(2)
    d = params.d

    rng = np.random.default_rng(cohort_seed)
    x_c = rng.standard_normal((n_enroll, d))
    y_c = rng.standard_normal((n_test, d))
    inter_noise = rng.standard_normal((n_enroll, n_test))
    s_inter = _draw_cells(params, x_c, y_c, np.full((n_enroll, n_test), NON), inter_noise)

    n_trials = n_target + n_nontarget
    rng = np.random.default_rng(trial_seed)
    x_t = rng.standard_normal((n_trials, d))
    y_t = rng.standard_normal((n_trials, d))
    e_noise = rng.standard_normal((n_trials, n_test))
    t_noise = rng.standard_normal((n_trials, n_enroll))
    trial_noise = rng.standard_normal(n_trials)
    codes = rng.permutation(np.r_[np.full(n_target, TAR), np.full(n_nontarget, NON)])

    loads = params.loadings()
    # trial enrollment vs test cohort, and enrollment cohort vs trial test
    s_e = params.mu_non + (x_t @ loads["alpha_non"])[:, None] + (y_c @ loads["beta_non"])[None, :]
    s_e = s_e + np.sqrt(params.var_non) * e_noise
    s_t = params.mu_non + (y_t @ loads["beta_non"])[:, None] + (x_c @ loads["alpha_non"])[None, :]
    s_t = s_t + np.sqrt(params.var_non) * t_noise

    tar_mean = params.mu_tar + x_t @ loads["alpha_tar"] + y_t @ loads["beta_tar"]
    non_mean = params.mu_non + x_t @ loads["alpha_non"] + y_t @ loads["beta_non"]
    s_trial = np.where(
        codes == TAR,
        tar_mean + np.sqrt(params.var_tar) * trial_noise,
        non_mean + np.sqrt(params.var_non) * trial_noise,
    )

    logger.info(f"Sampled eval set: {n_target} target + {n_nontarget} nontarget trials, cohort {n_enroll}x{n_test}")
    return EvalSet(
        s_inter=s_inter,
        s_trial=s_trial,
        s_e=s_e,
        s_t=s_t,
        labels=tuple(CODE_HYPOTHESES[int(c)] for c in codes),
    )
