"""Exception hierarchy shared by every planner component."""

from typing import Any, Optional


class PlannerError(Exception):
    """Base class for all errors raised by this package."""


class ScenarioError(PlannerError):
    """Scenario file could not be parsed or violates an invariant."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        context = []
        if line is not None:
            context.append(f"line {line}")
        if field:
            context.append(f"field '{field}'")
        full = f"{message} ({', '.join(context)})" if context else message
        super().__init__(full)
        self.field = field
        self.line = line


class ConfigError(PlannerError):
    """Run configuration is missing keys or holds out-of-range values."""


class ShapeError(PlannerError):
    """A parameter or input array has an unexpected shape."""


class TapeError(PlannerError):
    """A forward tape was reused or does not match the backward call."""


class NonFiniteError(PlannerError):
    """A gradient or loss became NaN / inf."""


class DegenerateRouteError(PlannerError):
    """The expert made no progress along its route."""


class ExpertLostError(PlannerError):
    """The scripted expert drifted away from every lane."""


class TrajectoryError(PlannerError):
    """Resampling or distance preconditions on trajectories failed."""


class CheckpointError(PlannerError):
    """Checkpoint file is malformed or does not match the model."""


class EpisodeError(PlannerError):
    """An episode aborted; the partial log is attached."""

    def __init__(self, message: str, log: Any = None):
        super().__init__(message)
        self.log = log


class VocabularyError(PlannerError):
    """Trajectory vocabulary cannot be built or loaded."""
