"""Exception types shared across the package.

Everything raised on purpose derives from :class:`GridlightError` so callers
(and the CLI) can distinguish "you asked for something invalid" from genuine
bugs.  Configuration problems get their own branch because the command line
maps them to a dedicated exit code.
"""

from __future__ import annotations


class GridlightError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GridlightError):
    """Invalid or inconsistent configuration values."""


class ActionError(GridlightError):
    """A joint action referenced a phase index outside the phase set."""


class UnknownAgentError(GridlightError, KeyError):
    """An agent id that does not exist in the network."""

    def __str__(self) -> str:  # KeyError quotes its message; keep it readable
        return Exception.__str__(self)


class FingerprintError(GridlightError):
    """Artifacts built against incompatible network/phase structure."""


class DatasetFormatError(GridlightError):
    """A dataset file failed structural validation.

    ``byte_offset`` points at the start of the offending record when the
    problem is a truncated or corrupt line, so the file can be repaired or
    trimmed by hand.
    """

    def __init__(self, message: str, byte_offset: int | None = None):
        super().__init__(message)
        self.byte_offset = byte_offset


class DatasetVersionError(DatasetFormatError):
    """Dataset written by an incompatible format version."""


class CheckpointError(GridlightError):
    """A model checkpoint file is unreadable or from an incompatible version."""


class DegenerateWeightError(GridlightError):
    """Every sample weight in a batch collapsed to zero."""


class SupportViolationError(GridlightError):
    """Target policy puts probability on actions the behavior policy cannot take."""


class DivergenceError(GridlightError):
    """A training loss became non-finite."""


class StageError(GridlightError):
    """A pipeline stage failed; ``stage`` names the stage for the operator."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
