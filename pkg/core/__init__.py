"""
Core utilities shared by every planner module.

Errors, scene schemas, the policy interface and artifact writers live here;
the planner itself is in src/.
"""

from .base_policy import BasePolicy, BaseRunConfig
from .errors import PlannerError
from .image_utils import CanvasTransform, ImageRenderer, SvgCanvas
from .output_writer import OutputWriter
from .schemas import AgentState, ControlTuple, DiscreteControl, Goal, LanePolyline, Scenario, VehicleState
from .video_utils import EpisodeVideoWriter

__all__ = [
    "BasePolicy",
    "BaseRunConfig",
    "PlannerError",
    "CanvasTransform",
    "ImageRenderer",
    "SvgCanvas",
    "OutputWriter",
    "AgentState",
    "ControlTuple",
    "DiscreteControl",
    "Goal",
    "LanePolyline",
    "Scenario",
    "VehicleState",
    "EpisodeVideoWriter",
]
