# scorenorm/core/grid.py
from typing import Tuple

import numpy as np

from scorenorm.errors import LabelError, ShapeError
from scorenorm.models.schemas import (
    Hypothesis,
    LabelMatrix,
    ScoreMatrix,
    TrialContext,
    validate_pair,
)


def assemble_runtime_grid(ctx: TrialContext, trial_label: Hypothesis) -> Tuple[ScoreMatrix, LabelMatrix]:
    """
    Place a trial and its cohorts on one (N+1)x(M+1) grid.

    s_inter fills the top-left block, s_t the last column, s_e the last row
    and s_trial the bottom-right corner, which gets `trial_label`.
    """
    if trial_label not in (Hypothesis.TARGET, Hypothesis.NONTARGET):
        raise LabelError(f"trial label must be target or nontarget, got {trial_label}")

    n, m = ctx.n_enroll, ctx.n_test
    if ctx.s_inter.shape != (n, m):
        raise ShapeError(f"inter-cohort scores have shape {ctx.s_inter.shape}, expected ({n}, {m})")

    cells = np.empty((n + 1, m + 1), dtype=np.float64)
    cells[:n, :m] = ctx.s_inter
    cells[:n, m] = ctx.s_t
    cells[n, :m] = ctx.s_e
    cells[n, m] = ctx.s_trial

    scores = ScoreMatrix(cells=cells)
    labels = ctx.cohort_labels.with_cell(n, m, trial_label)
    validate_pair(scores, labels)
    return scores, labels


def disassemble_runtime_grid(scores: ScoreMatrix, labels: LabelMatrix) -> Tuple[TrialContext, Hypothesis]:
    """Inverse of assemble_runtime_grid: the last row/column hold the trial."""
    validate_pair(scores, labels)
    n, m = scores.rows - 1, scores.cols - 1
    ctx = TrialContext(
        s_trial=float(scores.cells[n, m]),
        s_e=scores.cells[n, :m],
        s_t=scores.cells[:n, m],
        s_inter=scores.cells[:n, :m],
        cohort_labels=labels,
    )
    return ctx, labels.hypothesis(n, m)
