"""
Exceptions raised by the laboratory.
Everything derives from FKLabError and ValueError so callers that only
know about bad input keep working.
"""
from typing import Optional


class FKLabError(ValueError):
    """Base class for laboratory errors"""


class ArgumentError(FKLabError):
    """An argument or precondition is violated"""


class ResourceLimitError(FKLabError):
    """A request would exceed a hard size cap"""


class UnsupportedDomainError(FKLabError):
    """The domain orientation does not support the query"""


class InsufficientScalesError(FKLabError):
    """Too few usable scales for a log-log fit"""


class UnsupportedSingularityError(FKLabError):
    """Path integration was asked for an untruncated singular potential"""


class DivergentIntegralError(FKLabError):
    """The requested integral diverges"""


class UnreliableRunError(FKLabError):
    """A Monte Carlo run violated its reliability budget"""


class ConfigValidationError(FKLabError):
    """An experiment configuration failed validation"""


class ResolutionError(FKLabError):
    """
    The discretisation is too coarse for the requested potential or shell.

    Carries the corrective value so the harness can print it.
    """

    def __init__(
        self,
        message: str,
        required_n_steps: Optional[int] = None,
        required_level: Optional[int] = None,
    ):
        super().__init__(message)
        self.required_n_steps = required_n_steps
        self.required_level = required_level
