from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from scorenorm.config import settings
from scorenorm.errors import LabelError, ShapeError


class Hypothesis(str, Enum):
    """Cell label; the value is the token used in score-matrix files."""
    TARGET = "tar"
    NONTARGET = "non"
    UNOBSERVED = "NA"


# integer codes stored in LabelMatrix.codes
TAR = 1
NON = 0
NA = -1

HYPOTHESIS_CODES = {Hypothesis.TARGET: TAR, Hypothesis.NONTARGET: NON, Hypothesis.UNOBSERVED: NA}
CODE_HYPOTHESES = {code: hyp for hyp, code in HYPOTHESIS_CODES.items()}


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def _as_vector(value: Any) -> np.ndarray:
    return _readonly(np.asarray(value, dtype=np.float64).reshape(-1))


# ============== Score data ==============

class ScoreMatrix(BaseModel):
    """Enrollment rows x test columns of raw scores."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    cells: np.ndarray

    @field_validator("cells", mode="before")
    @classmethod
    def _coerce_cells(cls, value: Any) -> np.ndarray:
        cells = np.asarray(value, dtype=np.float64)
        if cells.ndim != 2 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise ShapeError(f"score matrix must be 2-D with at least one row and column, got shape {cells.shape}")
        return _readonly(np.ascontiguousarray(cells))

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.cells.shape


class LabelMatrix(BaseModel):
    """Per-cell hypothesis labels, stored as TAR/NON/NA integer codes."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    codes: np.ndarray

    @field_validator("codes", mode="before")
    @classmethod
    def _coerce_codes(cls, value: Any) -> np.ndarray:
        codes = np.asarray(value)
        if codes.dtype.kind in ("U", "O"):
            codes = np.vectorize(lambda v: HYPOTHESIS_CODES[Hypothesis(v)], otypes=[np.int8])(codes)
        codes = codes.astype(np.int8)
        if codes.ndim != 2 or codes.shape[0] < 1 or codes.shape[1] < 1:
            raise ShapeError(f"label matrix must be 2-D and non-empty, got shape {codes.shape}")
        if not np.isin(codes, (TAR, NON, NA)).all():
            raise LabelError("label codes must be TAR, NON or NA")
        if not (codes != NA).any():
            raise LabelError("label matrix has no observed cell")
        return _readonly(codes)

    @classmethod
    def full(cls, shape: Tuple[int, int], hypothesis: Hypothesis = Hypothesis.NONTARGET) -> "LabelMatrix":
        return cls(codes=np.full(shape, HYPOTHESIS_CODES[hypothesis], dtype=np.int8))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.codes.shape

    @property
    def observed(self) -> np.ndarray:
        return self.codes != NA

    @property
    def target(self) -> np.ndarray:
        return self.codes == TAR

    @property
    def nontarget(self) -> np.ndarray:
        return self.codes == NON

    def hypothesis(self, i: int, j: int) -> Hypothesis:
        return CODE_HYPOTHESES[int(self.codes[i, j])]

    def with_cell(self, i: int, j: int, hypothesis: Hypothesis) -> "LabelMatrix":
        codes = self.codes.copy()
        codes[i, j] = HYPOTHESIS_CODES[hypothesis]
        return LabelMatrix(codes=codes)


def validate_pair(scores: ScoreMatrix, labels: LabelMatrix) -> None:
    """Raise unless the two matrices match in shape and observed scores are finite."""
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if not np.isfinite(scores.cells[labels.observed]).all():
        raise ShapeError("observed score cells must be finite")


class TrialContext(BaseModel):
    """Trial-at-hand score with its enrollment-side, test-side and inter-cohort scores.

    Grid convention: rows are the N cohort enrollments followed by the trial
    enrollment, columns the M cohort tests followed by the trial test.
    `cohort_labels` covers the full (N+1)x(M+1) grid; its trial cell is ignored.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    s_trial: float
    s_e: np.ndarray       # (M,) trial enrollment vs test cohort
    s_t: np.ndarray       # (N,) trial test vs enrollment cohort
    s_inter: np.ndarray   # (N, M)
    cohort_labels: LabelMatrix

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        s_e = _as_vector(data.get("s_e", ()))
        s_t = _as_vector(data.get("s_t", ()))
        n, m = s_t.size, s_e.size
        s_inter = np.asarray(data.get("s_inter", np.zeros((n, m))), dtype=np.float64)
        if s_inter.size == 0 and (n == 0 or m == 0):
            s_inter = s_inter.reshape(n, m)
        if s_inter.shape != (n, m):
            raise ShapeError(
                f"inter-cohort scores have shape {s_inter.shape}, expected ({n}, {m}) from s_t and s_e"
            )
        labels = data.get("cohort_labels")
        if labels is None:
            labels = LabelMatrix.full((n + 1, m + 1))
        elif not isinstance(labels, LabelMatrix):
            labels = LabelMatrix(codes=labels)
        if labels.shape != (n + 1, m + 1):
            raise ShapeError(f"cohort labels have shape {labels.shape}, expected ({n + 1}, {m + 1})")
        data.update(s_e=s_e, s_t=s_t, s_inter=_readonly(s_inter), cohort_labels=labels)
        return data

    @property
    def n_enroll(self) -> int:
        return self.s_t.size

    @property
    def n_test(self) -> int:
        return self.s_e.size


class Prior(BaseModel):
    model_config = ConfigDict(frozen=True)

    pi: float = Field(gt=0.0, lt=1.0)

    @property
    def logit(self) -> float:
        return float(np.log(self.pi) - np.log1p(-self.pi))


class CohortStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean: float
    std: float = Field(gt=0.0)


# ============== Score model ==============

class LgsmParams(BaseModel):
    """Linear-Gaussian score model parameters (4 + 4*d scalars)."""
    model_config = ConfigDict(frozen=True)

    d: int = Field(ge=0)
    mu_tar: float
    mu_non: float
    var_tar: float = Field(gt=0.0)
    var_non: float = Field(gt=0.0)
    alpha_tar: Tuple[float, ...] = ()
    alpha_non: Tuple[float, ...] = ()
    beta_tar: Tuple[float, ...] = ()
    beta_non: Tuple[float, ...] = ()

    @field_validator("alpha_tar", "alpha_non", "beta_tar", "beta_non", mode="before")
    @classmethod
    def _coerce_loading(cls, value: Any) -> Tuple[float, ...]:
        return tuple(float(v) for v in np.asarray(value, dtype=np.float64).reshape(-1))

    @model_validator(mode="after")
    def _check_dims(self) -> "LgsmParams":
        for name in ("alpha_tar", "alpha_non", "beta_tar", "beta_non"):
            if len(getattr(self, name)) != self.d:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected d={self.d}")
        return self

    @classmethod
    def calibration(cls, mu_tar: float, mu_non: float, var_tar: float, var_non: float, d: int = 0) -> "LgsmParams":
        """Gaussian calibration model: all loadings zero."""
        zeros = (0.0,) * d
        return cls(d=d, mu_tar=mu_tar, mu_non=mu_non, var_tar=var_tar, var_non=var_non,
                   alpha_tar=zeros, alpha_non=zeros, beta_tar=zeros, beta_non=zeros)

    def loadings(self) -> Dict[str, np.ndarray]:
        return {name: np.array(getattr(self, name), dtype=np.float64)
                for name in ("alpha_tar", "alpha_non", "beta_tar", "beta_non")}

    @property
    def nu_tar(self) -> float:
        return float(np.dot(self.alpha_tar, self.alpha_tar) + np.dot(self.beta_tar, self.beta_tar))

    @property
    def nu_non(self) -> float:
        return float(np.dot(self.alpha_non, self.alpha_non) + np.dot(self.beta_non, self.beta_non))

    @property
    def cross_gram(self) -> float:
        """alpha_tar.alpha_non + beta_tar.beta_non, the rotation-invariant coupling."""
        return float(np.dot(self.alpha_tar, self.alpha_non) + np.dot(self.beta_tar, self.beta_non))

    @property
    def n_parameters(self) -> int:
        return 4 + 4 * self.d


class HiddenPrior(BaseModel):
    """Prior covariances of the x-space and y-space hidden variables (identity by default)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    cov_x: np.ndarray
    cov_y: np.ndarray

    @field_validator("cov_x", "cov_y", mode="before")
    @classmethod
    def _coerce_cov(cls, value: Any) -> np.ndarray:
        cov = np.atleast_2d(np.asarray(value, dtype=np.float64))
        if cov.shape[0] != cov.shape[1]:
            raise ShapeError(f"prior covariance must be square, got {cov.shape}")
        return _readonly(cov)

    @classmethod
    def identity(cls, d: int) -> "HiddenPrior":
        return cls(cov_x=np.eye(d), cov_y=np.eye(d))


class TrainTrace(BaseModel):
    objective: List[float] = Field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    monotone: bool = True
    skipped_min_div: int = 0


class TrainingInfo(BaseModel):
    seed: int
    iterations: int
    final_objective: float
    converged: bool
    n_matrices: int = 0


# ============== Synthetic corpora ==============

class TargetLayout(str, Enum):
    DIAGONAL = "diagonal"
    BLOCK = "block"
    NONE = "none"


class CorpusSpec(BaseModel):
    n_matrices: int = Field(ge=1)
    rows: int = Field(ge=1)
    cols: int = Field(ge=1)
    layout: TargetLayout = TargetLayout.DIAGONAL
    block_size: int = Field(default=1, ge=1)
    seed: int = 0


# ============== Metrics ==============

class LabeledScores(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    @field_validator("target_scores", "nontarget_scores", mode="before")
    @classmethod
    def _coerce_scores(cls, value: Any) -> np.ndarray:
        scores = _as_vector(value)
        if not np.isfinite(scores).all():
            raise ValueError("scores must be finite")
        return scores


class MetricsReport(BaseModel):
    eer: float = Field(ge=0.0, le=0.5)
    cllr: float = Field(ge=0.0)
    min_cllr: float = Field(ge=0.0)
    act_dcf: float = Field(ge=0.0)
    min_dcf: float = Field(ge=0.0)
    prior: float
    n_target: int
    n_nontarget: int
    det: List[Tuple[float, float]]


# ============== Run configuration ==============

class Subcommand(str, Enum):
    SIMULATE = "simulate"
    TRAIN = "train"
    NORMALIZE = "normalize"
    EVAL = "eval"
    INSPECT_MODEL = "inspect-model"


class Method(str, Enum):
    RAW = "raw"
    TNORM = "tnorm"
    ZNORM = "znorm"
    ZTNORM = "ztnorm"
    SNORM = "snorm"
    LGSM = "lgsm"


class RunConfig(BaseModel):
    """Resolved configuration for one CLI invocation (flags over config file over defaults)."""
    subcommand: Subcommand
    inputs: List[str] = Field(default_factory=list)
    out: Optional[str] = None
    method: Method = Method.RAW
    dim: int = Field(default_factory=lambda: settings.DEFAULT_DIM, ge=0)
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED)
    prior: float = Field(default_factory=lambda: settings.DEFAULT_PRIOR, gt=0.0, lt=1.0)
    tol: float = Field(default_factory=lambda: settings.EM_TOL, gt=0.0)
    max_iters: int = Field(default_factory=lambda: settings.EM_MAX_ITERS, ge=1)

    # simulate
    params_path: Optional[str] = None
    params: Optional[Dict[str, Any]] = None
    n_matrices: int = 30
    rows: int = 50
    cols: int = 50
    layout: TargetLayout = TargetLayout.DIAGONAL
    block_size: int = 1
    eval_trials: Optional[Tuple[int, int]] = None
    cohort_size: Tuple[int, int] = (20, 20)

    # normalize
    model_path: Optional[str] = None
    cohort_path: Optional[str] = None
    trials_path: Optional[str] = None
    posterior: bool = False

    @model_validator(mode="after")
    def _check_paths(self) -> "RunConfig":
        required: List[str] = []
        if self.subcommand == Subcommand.SIMULATE:
            if self.params_path is None and self.params is None:
                raise ValueError("simulate needs --params or an inline 'params' block in the config file")
            if self.params_path is not None:
                required.append(self.params_path)
            if self.n_matrices < 1:
                raise ValueError("n_matrices must be at least 1")
        elif self.subcommand in (Subcommand.TRAIN, Subcommand.EVAL, Subcommand.INSPECT_MODEL):
            if not self.inputs:
                raise ValueError(f"{self.subcommand.value} needs at least one input file")
            required.extend(_strip_name(p) for p in self.inputs)
        elif self.subcommand == Subcommand.NORMALIZE:
            if self.cohort_path is None or self.trials_path is None:
                raise ValueError("normalize needs --cohort and --trials")
            required.extend([self.cohort_path, self.trials_path])
            if self.method == Method.LGSM:
                if self.model_path is None:
                    raise ValueError("method lgsm needs --model")
                required.append(self.model_path)
        missing = [p for p in required if not Path(p).exists()]
        if missing:
            raise ValueError(f"input paths do not exist: {', '.join(missing)}")
        return self


def _strip_name(spec: str) -> str:
    """`name=path` eval inputs carry a method name before the path."""
    return spec.split("=", 1)[1] if "=" in spec and not Path(spec).exists() else spec
