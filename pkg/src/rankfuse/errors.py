"""Exception taxonomy shared across the package.

The CLI maps ValidationError (and subclasses) to exit code 1 and every other
failure to exit code 2, so anything that means "the caller handed us bad
input" must derive from ValidationError.
"""

from __future__ import annotations


class RankfuseError(Exception):
    """Base class for all package-specific failures."""


class ValidationError(RankfuseError, ValueError):
    """Bad input from the caller: malformed values, conflicting flags, etc."""


class DimensionError(ValidationError):
    """Shape or length mismatch between operands."""


class DatasetParseError(ValidationError):
    """Malformed dataset/sidecar/index line. Carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DependencyError(ValidationError):
    """A required input artifact (checkpoint, index, split file) is missing."""


class DegenerateDistributionError(RankfuseError, ValueError):
    """KL divergence is undefined: q has zero mass where p has support."""


class GraphError(RankfuseError, RuntimeError):
    """Backward was asked about a value the tape never produced."""


class NumericError(RankfuseError, ArithmeticError):
    """A non-finite value appeared where the contract requires finite ones."""


class TrainingError(RankfuseError, RuntimeError):
    """Training cannot proceed (degenerate labels, non-finite loss, ...)."""


class EmbeddingLookupError(RankfuseError, LookupError):
    """Index lookup failed and no encoder parameters were given to fall back on."""


class UndefinedMetricError(RankfuseError, ValueError):
    """Metric is undefined for this input (e.g. single-class AUC)."""
