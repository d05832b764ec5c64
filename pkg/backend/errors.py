"""
Exception hierarchy for the PolyMap simulator.

Hard failures raise one of these. Soft failures (no plane, no candidate,
skipped update, truncated plan) are returned as results instead.
"""

from typing import Optional, Any


class PolyMapError(Exception):
    """Root of every error raised by this package."""


class ValidationError(PolyMapError, ValueError):
    """A value violates a documented invariant."""


class ConfigurationError(ValidationError):
    """A parameter block is outside its admissible range."""


class FrameMismatchError(ValidationError):
    """Two poses or clouds with incompatible frame tags met at a boundary."""


class UsageError(PolyMapError, ValueError):
    """The caller broke an operation's precondition (bounds, time range)."""


class FusionDivergenceError(PolyMapError):
    """Kinematic and LIO attitudes disagree by (almost) half a turn."""


class ScenarioFailure(PolyMapError):
    """
    A scenario ended in a fall, a stall or without candidates.

    The partially filled report is attached so the CLI can still write it.
    """

    def __init__(self, message: str, report: Optional[Any] = None):
        super().__init__(message)
        self.report = report
