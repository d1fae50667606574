"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes (2 config, 3 numeric, 4 incompatible).
"""


class SnapError(Exception):
    """Base class for all package errors."""


class InputError(SnapError, ValueError):
    """Shape or dimension mismatch on an input tensor."""


class ArgumentError(SnapError, ValueError):
    """An argument is outside its documented domain."""


class ConfigError(SnapError, ValueError):
    """Invalid configuration, detected before any work starts."""


class NumericError(SnapError, ArithmeticError):
    """Nonfinite values or a failed factorization."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StateError(SnapError, RuntimeError):
    """Operation requires fitted state that is missing."""


class FitError(SnapError, ValueError):
    """A fitting routine cannot run on the supplied data (e.g. one class)."""


class UndefinedMetricError(SnapError, ValueError):
    """Metric undefined on the given labels (no positives, single class...)."""


class FormatError(SnapError, ValueError):
    """Malformed or unsupported file (bad magic, unknown dtype)."""


class IncompatibleArtifactError(SnapError, ValueError):
    """Artifacts that cannot be combined (engine/container mismatch...)."""
