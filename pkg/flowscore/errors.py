# flowscore/errors.py

from typing import Optional


class FlowScoreError(Exception):
    """Base error; `exit_code` is what the CLI returns for it."""

    exit_code = 1


class UsageError(FlowScoreError):
    exit_code = 1


class DataError(FlowScoreError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, path: str, line_no: int, detail: str) -> None:
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}: line {line_no}: {detail}")


class CheckpointError(DataError):
    def __init__(self, detail: str, tensor: Optional[str] = None) -> None:
        self.tensor = tensor
        if tensor is not None:
            detail = f"tensor '{tensor}': {detail}"
        super().__init__(detail)


class NumericError(FlowScoreError):
    exit_code = 3


class ShapeError(FlowScoreError, ValueError):
    def __init__(self, op: str, *shapes: tuple) -> None:
        self.op = op
        self.shapes = shapes
        listed = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class AssignmentBudgetError(FlowScoreError, ValueError):
    pass
