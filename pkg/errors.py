"""Errors Module - keyreg

Exception hierarchy shared by every module. Each error carries the process
exit code the CLI reports for it.
"""

from typing import Optional


class KeyregError(Exception):
    """Base class for all registration errors."""

    exit_code: int = 2

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


# Input / output (exit 2)

class IoFailure(KeyregError):
    exit_code = 2


class ParseError(KeyregError):
    """Malformed text input, located by 1-based line and column."""

    exit_code = 2

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        location = ""
        if line is not None:
            location = f"line {line}"
            if column is not None:
                location += f", column {column}"
            location += ": "
        super().__init__(f"{location}{message}")
        self.line = line
        self.column = column


class BadMagic(KeyregError):
    exit_code = 2


class UnsupportedDatatype(KeyregError):
    exit_code = 2


class TruncatedData(KeyregError):
    exit_code = 2


class DimMismatch(KeyregError, ValueError):
    exit_code = 2


class UnknownLabel(KeyregError, ValueError):
    exit_code = 2


class EmptyMask(KeyregError, ValueError):
    exit_code = 2


class MissingLabels(KeyregError, ValueError):
    exit_code = 2


# Solver (exit 3)

class SingularAffine(KeyregError, ValueError):
    exit_code = 3


class DegenerateConfiguration(KeyregError, ValueError):
    exit_code = 3


# Detector (exit 4)

class ZeroMassMap(KeyregError, ValueError):
    """An activation map carries no locatable mass."""

    exit_code = 4

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class InsufficientStructure(KeyregError):
    exit_code = 4


class ConstantVolume(KeyregError, ValueError):
    exit_code = 4


class UnsupportedTransform(KeyregError, ValueError):
    """A transform file of a kind the command cannot use."""

    exit_code = 2
