# scorenorm/models/storage.py
import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from scorenorm.errors import FormatError
from scorenorm.models.schemas import (
    HYPOTHESIS_CODES,
    Hypothesis,
    LabelMatrix,
    LgsmParams,
    ScoreMatrix,
    TrainingInfo,
    validate_pair,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MATRIX_HEADER = re.compile(r"^#scorenorm-matrix v1 rows=(\d+) cols=(\d+)$")
TRIALS_HEADER = "#scorenorm-trials v1"
SCORES_HEADER = re.compile(r"^#scorenorm-scores v1 method=(\S+)$")
TRIAL_COLUMNS = ["trial_id", "s_trial", "enroll_row", "test_row", "label"]
SCORE_COLUMNS = ["trial_id", "score", "label", "posterior", "error"]
MODEL_FORMAT = "scorenorm-lgsm"
COHORT_FORMAT = "scorenorm-cohort"
MANIFEST_FORMAT = "scorenorm-manifest"
REPORT_FORMAT = "scorenorm-report"
FORMAT_VERSION = 1


def format_score(value: float) -> str:
    """Shortest text that reads back to the same double (17 significant digits)."""
    return format(float(value), ".17g")


def _parse_float(text: str, path: Path, line: int, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise FormatError(f"{what} is not a number: {text!r}", str(path), line) from None


def _parse_label(token: str, path: Path, line: int) -> Hypothesis:
    try:
        return Hypothesis(token)
    except ValueError:
        raise FormatError(f"unknown label token {token!r}", str(path), line) from None


def _data_lines(path: Path) -> List[str]:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise FormatError("file not found", str(path)) from None
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise FormatError("empty file", str(path), 1)
    return lines


def _write_lines(path: Path, lines: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_json(path: Path, expected_format: str) -> Dict[str, Any]:
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError("file not found", str(path)) from None
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", str(path), e.lineno) from None
    if not isinstance(document, dict) or document.get("format") != expected_format:
        raise FormatError(f"not a {expected_format} document", str(path))
    if document.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported version {document.get('version')!r}", str(path))
    return document


def _write_json(path: Path, document: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class TrialRecord:
    trial_id: str
    s_trial: float
    enroll_row: int
    test_row: int
    label: Hypothesis = Hypothesis.UNOBSERVED


@dataclass(frozen=True)
class ScoreRecord:
    trial_id: str
    score: float
    label: Hypothesis = Hypothesis.UNOBSERVED
    posterior: Optional[float] = None
    error: str = ""


@dataclass(frozen=True)
class Cohort:
    """Shared cohort scores: inter-cohort grid plus per-trial enrollment and test rows."""
    s_inter: np.ndarray        # (N, M)
    labels: LabelMatrix        # (N, M) labels of the inter-cohort grid
    enroll: np.ndarray         # (rows, M): trial enrollment vs test cohort
    test: np.ndarray           # (rows, N): enrollment cohort vs trial test

    def grid_labels(self) -> LabelMatrix:
        """Labels over the (N+1)x(M+1) runtime grid; trial row and column nontarget."""
        n, m = self.s_inter.shape
        codes = np.full((n + 1, m + 1), HYPOTHESIS_CODES[Hypothesis.NONTARGET], dtype=np.int8)
        codes[:n, :m] = self.labels.codes
        return LabelMatrix(codes=codes)


class FileStorage:
    """Readers and writers for every on-disk format; all text is UTF-8."""

    # ============== Score matrices ==============

    def write_matrix(self, path: PathLike, scores: ScoreMatrix, labels: LabelMatrix) -> None:
        validate_pair(scores, labels)
        path = Path(path)
        lines = [f"#scorenorm-matrix v1 rows={scores.rows} cols={scores.cols}"]
        for i in range(scores.rows):
            cells = []
            for j in range(scores.cols):
                hyp = labels.hypothesis(i, j)
                value = "nan" if hyp == Hypothesis.UNOBSERVED else format_score(scores.cells[i, j])
                cells.append(f"={value}:{hyp.value}")
            lines.append("\t".join(cells))
        _write_lines(path, lines)

    def read_matrix(self, path: PathLike) -> Tuple[ScoreMatrix, LabelMatrix]:
        path = Path(path)
        lines = _data_lines(path)
        header = MATRIX_HEADER.match(lines[0])
        if not header:
            raise FormatError(f"malformed header {lines[0]!r}", str(path), 1)
        rows, cols = int(header.group(1)), int(header.group(2))
        if rows < 1 or cols < 1:
            raise FormatError(f"matrix must be at least 1x1, header says {rows}x{cols}", str(path), 1)
        if len(lines) - 1 != rows:
            raise FormatError(f"expected {rows} rows, found {len(lines) - 1}", str(path), len(lines))

        cells = np.full((rows, cols), np.nan)
        codes = np.empty((rows, cols), dtype=np.int8)
        for i, text in enumerate(lines[1:]):
            line = i + 2
            fields = text.split("\t")
            if len(fields) != cols:
                raise FormatError(f"ragged row: expected {cols} cells, got {len(fields)}", str(path), line)
            for j, field in enumerate(fields):
                if not field.startswith("=") or ":" not in field:
                    raise FormatError(f"cell {j} is not of the form =<score>:<label>: {field!r}", str(path), line)
                score_text, _, token = field[1:].rpartition(":")
                hyp = _parse_label(token, path, line)
                codes[i, j] = HYPOTHESIS_CODES[hyp]
                if hyp == Hypothesis.UNOBSERVED:
                    continue
                value = _parse_float(score_text, path, line, f"score in cell {j}")
                if not math.isfinite(value):
                    raise FormatError(f"observed cell {j} has non-finite score", str(path), line)
                cells[i, j] = value

        scores, labels = ScoreMatrix(cells=cells), LabelMatrix(codes=codes)
        logger.debug(f"Read {rows}x{cols} matrix from {path}")
        return scores, labels

    # ============== Trials ==============

    def write_trials(self, path: PathLike, trials: Sequence[TrialRecord]) -> None:
        lines = [TRIALS_HEADER, "\t".join(TRIAL_COLUMNS)]
        for t in trials:
            lines.append(f"{t.trial_id}\t{format_score(t.s_trial)}\t{t.enroll_row}\t{t.test_row}\t{t.label.value}")
        _write_lines(Path(path), lines)

    def read_trials(self, path: PathLike) -> List[TrialRecord]:
        path = Path(path)
        lines = _data_lines(path)
        if lines[0] != TRIALS_HEADER:
            raise FormatError(f"malformed header {lines[0]!r}", str(path), 1)
        if len(lines) < 2 or lines[1].split("\t") != TRIAL_COLUMNS:
            raise FormatError(f"expected columns {' '.join(TRIAL_COLUMNS)}", str(path), 2)

        trials = []
        for i, text in enumerate(lines[2:]):
            line = i + 3
            fields = text.split("\t")
            if len(fields) != len(TRIAL_COLUMNS):
                raise FormatError(f"expected {len(TRIAL_COLUMNS)} fields, got {len(fields)}", str(path), line)
            trial_id, s_text, e_text, t_text, token = fields
            s_trial = _parse_float(s_text, path, line, "s_trial")
            if not math.isfinite(s_trial):
                raise FormatError("s_trial must be finite", str(path), line)
            try:
                enroll_row, test_row = int(e_text), int(t_text)
            except ValueError:
                raise FormatError("cohort row references must be integers", str(path), line) from None
            trials.append(TrialRecord(trial_id, s_trial, enroll_row, test_row, _parse_label(token, path, line)))
        return trials

    # ============== Cohorts ==============

    def write_cohort(self, directory: PathLike, s_inter: np.ndarray, enroll: np.ndarray, test: np.ndarray,
                     labels: Optional[LabelMatrix] = None) -> Path:
        """Writes inter.tsv, enroll.tsv, test.tsv and cohort.json; returns the cohort.json path."""
        directory = Path(directory)
        if labels is None:
            labels = LabelMatrix.full(s_inter.shape)
        self.write_matrix(directory / "inter.tsv", ScoreMatrix(cells=s_inter), labels)
        self.write_matrix(directory / "enroll.tsv", ScoreMatrix(cells=enroll), LabelMatrix.full(enroll.shape))
        self.write_matrix(directory / "test.tsv", ScoreMatrix(cells=test), LabelMatrix.full(test.shape))
        manifest = directory / "cohort.json"
        _write_json(manifest, {
            "format": COHORT_FORMAT,
            "version": FORMAT_VERSION,
            "inter": "inter.tsv",
            "enroll": "enroll.tsv",
            "test": "test.tsv",
        })
        return manifest

    def read_cohort(self, path: PathLike) -> Cohort:
        path = Path(path)
        document = _read_json(path, COHORT_FORMAT)
        try:
            parts = {key: path.parent / document[key] for key in ("inter", "enroll", "test")}
        except KeyError as e:
            raise FormatError(f"cohort manifest lacks {e.args[0]!r}", str(path)) from None

        s_inter, labels = self.read_matrix(parts["inter"])
        enroll, _ = self.read_matrix(parts["enroll"])
        test, _ = self.read_matrix(parts["test"])
        n, m = s_inter.shape
        if enroll.cols != m:
            raise FormatError(f"enrollment rows have {enroll.cols} scores, test cohort has {m}", str(parts["enroll"]))
        if test.cols != n:
            raise FormatError(f"test rows have {test.cols} scores, enrollment cohort has {n}", str(parts["test"]))
        return Cohort(s_inter=s_inter.cells, labels=labels, enroll=enroll.cells, test=test.cells)

    # ============== Normalized scores ==============

    def write_scores(self, path: PathLike, method: str, records: Sequence[ScoreRecord]) -> None:
        lines = [f"#scorenorm-scores v1 method={method}", "\t".join(SCORE_COLUMNS)]
        for r in records:
            posterior = "" if r.posterior is None else format_score(r.posterior)
            error = r.error.replace("\t", " ").replace("\n", " ")
            lines.append(f"{r.trial_id}\t{format_score(r.score)}\t{r.label.value}\t{posterior}\t{error}")
        _write_lines(Path(path), lines)

    def read_scores(self, path: PathLike) -> Tuple[str, List[ScoreRecord]]:
        path = Path(path)
        lines = _data_lines(path)
        header = SCORES_HEADER.match(lines[0])
        if not header:
            raise FormatError(f"malformed header {lines[0]!r}", str(path), 1)
        if len(lines) < 2 or lines[1].split("\t") != SCORE_COLUMNS:
            raise FormatError(f"expected columns {' '.join(SCORE_COLUMNS)}", str(path), 2)

        records = []
        for i, text in enumerate(lines[2:]):
            line = i + 3
            fields = text.split("\t")
            if len(fields) != len(SCORE_COLUMNS):
                raise FormatError(f"expected {len(SCORE_COLUMNS)} fields, got {len(fields)}", str(path), line)
            trial_id, score_text, token, posterior_text, error = fields
            posterior = _parse_float(posterior_text, path, line, "posterior") if posterior_text else None
            records.append(ScoreRecord(
                trial_id=trial_id,
                score=_parse_float(score_text, path, line, "score"),
                label=_parse_label(token, path, line),
                posterior=posterior,
                error=error,
            ))
        return header.group(1), records

    # ============== Models and params ==============

    def write_model(self, path: PathLike, params: LgsmParams, info: TrainingInfo) -> None:
        document: Dict[str, Any] = {"format": MODEL_FORMAT, "version": FORMAT_VERSION}
        document.update(params.model_dump(mode="json"))
        document["training"] = info.model_dump(mode="json")
        _write_json(Path(path), document)

    def read_model(self, path: PathLike) -> Tuple[LgsmParams, Optional[TrainingInfo]]:
        path = Path(path)
        document = _read_json(path, MODEL_FORMAT)
        training = document.pop("training", None)
        return self.params_from_mapping(document), TrainingInfo(**training) if training else None

    def read_params(self, path: PathLike) -> LgsmParams:
        """Generating params from a YAML or JSON mapping (a model file also qualifies)."""
        path = Path(path)
        try:
            document = yaml.safe_load(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FormatError("file not found", str(path)) from None
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            raise FormatError(f"invalid params file: {e}", str(path), mark.line + 1 if mark else None) from None
        if not isinstance(document, dict):
            raise FormatError("params file must hold a mapping", str(path))
        document.pop("training", None)
        return self.params_from_mapping(document)

    @staticmethod
    def params_from_mapping(document: Dict[str, Any]) -> LgsmParams:
        """LgsmParams from a mapping; extra keys are ignored and d defaults to the loading length."""
        fields = {k: v for k, v in document.items() if k in LgsmParams.model_fields}
        if "d" not in fields:
            fields["d"] = len(fields.get("alpha_tar", ()))
        return LgsmParams(**fields)

    # ============== Simulation manifests ==============

    def write_manifest(self, path: PathLike, matrices: Sequence[str], params: LgsmParams,
                       extra: Optional[Dict[str, Any]] = None) -> None:
        document: Dict[str, Any] = {
            "format": MANIFEST_FORMAT,
            "version": FORMAT_VERSION,
            "matrices": list(matrices),
            "params": params.model_dump(mode="json"),
        }
        document.update(extra or {})
        _write_json(Path(path), document)

    def read_manifest(self, path: PathLike) -> Dict[str, Any]:
        """Manifest with matrix paths resolved against its directory."""
        path = Path(path)
        document = _read_json(path, MANIFEST_FORMAT)
        document["matrices"] = [str(path.parent / p) for p in document.get("matrices", [])]
        return document

    def is_manifest(self, path: PathLike) -> bool:
        return Path(path).suffix == ".json"

    # ============== Reports ==============

    def write_report(self, path: PathLike, report: Dict[str, Any]) -> None:
        document = {"format": REPORT_FORMAT, "version": FORMAT_VERSION}
        document.update(report)
        _write_json(Path(path), document)

    def read_report(self, path: PathLike) -> Dict[str, Any]:
        return _read_json(Path(path), REPORT_FORMAT)

    def write_det(self, path: PathLike, pfa: Sequence[float], pmiss: Sequence[float],
                  probit_pfa: Sequence[float], probit_pmiss: Sequence[float]) -> None:
        lines = ["pfa\tpmiss\tprobit_pfa\tprobit_pmiss"]
        for row in zip(pfa, pmiss, probit_pfa, probit_pmiss):
            lines.append("\t".join(format_score(v) for v in row))
        _write_lines(Path(path), lines)


storage = FileStorage()
