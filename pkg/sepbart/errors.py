"""
Exception hierarchy for SepBART.

Library code raises these; only the CLI turns them into exit codes and
machine-readable error records.
"""

from typing import Any, Dict, List, Optional


class SepBartError(Exception):
    """Base class for every error raised by the package."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}

    def to_record(self) -> Dict[str, Any]:
        """Machine-readable form used by the CLI error output."""
        return {
            "error": type(self).__name__,
            "message": str(self),
            "details": self.details,
        }


class DatasetError(SepBartError):
    """Invalid input data: missing columns, bad cells, constant columns."""


class ConfigError(SepBartError):
    """Invalid configuration. Carries every problem found, not just the first."""

    def __init__(self, problems: List[str]):
        super().__init__(
            "invalid configuration: " + "; ".join(problems),
            {"problems": list(problems)},
        )
        self.problems = list(problems)


class SamplerError(SepBartError):
    """The MCMC state became non-finite."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        details = {} if iteration is None else {"iteration": iteration}
        super().__init__(message, details)
        self.iteration = iteration


class EstimandError(SepBartError):
    """An estimand could not be computed from the given draws."""


class DiagnosticsError(SepBartError):
    """A diagnostic could not be computed."""


class DrawFileError(SepBartError):
    """Posterior draw file is malformed or has an unsupported version."""
