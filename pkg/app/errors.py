# app/errors.py
"""
Exception hierarchy shared by every module. The command router maps each class
to a process exit code, so handlers can simply raise.
"""


class VQVCError(Exception):
    """Base class for all errors raised by the pipeline."""
    exit_code = 1


class ConfigError(VQVCError):
    """Bad or contradictory configuration, or a refused command."""
    exit_code = 2


class DataError(VQVCError):
    """Missing or malformed input data (manifests, signal files, index dumps)."""
    exit_code = 3


class CheckpointError(DataError):
    """A checkpoint could not be read, or its metadata does not match the data."""


class NumericError(VQVCError, ArithmeticError):
    """Non-finite values showed up in a forward pass or a training loss."""
    exit_code = 4

    def __init__(self, message: str, diagnostics: dict = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ContractError(VQVCError, ValueError):
    """A precondition of an operation was violated by its caller."""
    exit_code = 3


class ShapeError(ContractError):
    """Tensor shapes do not conform to an op's shape rule."""
