from __future__ import annotations


class MechlabError(Exception):
    """Base class for all toolkit errors."""


class FormatError(MechlabError, ValueError):
    """Malformed text grid, dataset file or tensor container."""


class DomainError(MechlabError, ValueError):
    """A Sudoku-level precondition does not hold (inconsistent board, no unique solution)."""


class UsageError(MechlabError, ValueError):
    """API misuse: wrong shapes, filled cell where an empty one is required, unknown ids."""


class ConfigError(MechlabError, ValueError):
    pass


class NumericError(MechlabError, ArithmeticError):
    """Non-finite values during training or analysis."""


class MissingPrerequisite(MechlabError):
    def __init__(self, what: str, stage: str):
        super().__init__(f"missing {what}; run `sudoku-mechlab {stage}` first")
        self.what = what
        self.stage = stage
