# scorenorm/errors.py
from typing import Optional


class ScoreNormError(Exception):
    """Base error; `exit_code` is what the CLI returns for it."""

    exit_code: int = 2

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


# ============== Score data ==============

class ScoreDataError(ScoreNormError):
    pass


class ShapeError(ScoreDataError):
    pass


class LabelError(ScoreDataError):
    pass


class FormatError(ScoreDataError):
    """Malformed file; `line` is 1-based when known."""

    def __init__(self, detail: str, path: Optional[str] = None, line: Optional[int] = None):
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {detail}" if where else detail)
        self.path = path
        self.line = line


# ============== Normalization / training ==============

class DegenerateCohortError(ScoreNormError):
    def __init__(self, detail: str, step: str):
        super().__init__(f"[{step}] {detail}")
        self.step = step


class TrainingError(ScoreNormError):
    pass


class NumericalError(ScoreNormError):
    exit_code = 3
