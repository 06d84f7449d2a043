"""Exception hierarchy shared across the package."""

from __future__ import annotations


class XmreError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(XmreError):
    """Input data violates a documented invariant."""


class ParseError(ValidationError):
    """A dataset or fixture file could not be parsed."""


class ConfigError(XmreError):
    """Configuration values are inconsistent with each other or with data."""


class ContractViolation(XmreError):
    """A caller broke an internal precondition; indicates a programming bug."""


class RetrievalError(XmreError):
    """A retrieval backend failed after exhausting retries."""


class DecodeError(XmreError):
    """Image bytes could not be decoded."""


class FeatureFileError(XmreError):
    """A feature/checkpoint container is malformed or missing a record."""


class TrainingError(XmreError):
    """The optimization loop hit a non-recoverable state (non-finite loss)."""
