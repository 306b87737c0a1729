"""Pydantic schemas for scene data."""

import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator

NAV_COMMANDS: tuple[str, ...] = ("follow", "left", "right", "straight")
NavCommand = Literal["follow", "left", "right", "straight"]
AgentBehavior = Literal["reactive", "non-reactive"]

# Discrete control bins
THROTTLE_BINS: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
STEER_BINS: tuple[float, ...] = tuple(round(-1.0 + 0.1 * k, 10) for k in range(21))


def wrap_angle(angle: float) -> float:
    """Normalize an angle into (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class VehicleState(_Frozen):
    """Planar pose and longitudinal speed."""
    x: float
    y: float
    heading: float = 0.0
    speed: float = Field(default=0.0, ge=0.0)

    @field_validator("heading")
    @classmethod
    def _normalize_heading(cls, value: float) -> float:
        return wrap_angle(value)


class ControlTuple(_Frozen):
    """(brake, throttle, steer) actuation command."""
    brake: int = 0
    throttle: float = 0.0
    steer: float = 0.0

    @field_validator("brake", mode="before")
    @classmethod
    def _check_brake(cls, value):
        if isinstance(value, bool):
            return int(value)
        if value in (0, 1):
            return int(value)
        raise ValueError("brake must be 0 or 1")

    @field_validator("throttle")
    @classmethod
    def _clamp_throttle(cls, value: float) -> float:
        return min(max(value, 0.0), 1.0)

    @field_validator("steer")
    @classmethod
    def _clamp_steer(cls, value: float) -> float:
        return min(max(value, -1.0), 1.0)


class DiscreteControl(_Frozen):
    """Bin indices of a control tuple."""
    brake_class: int = Field(ge=0, le=1)
    throttle_bin: int = Field(ge=0, le=len(THROTTLE_BINS) - 1)
    steer_bin: int = Field(ge=0, le=len(STEER_BINS) - 1)

    def to_control(self) -> ControlTuple:
        return ControlTuple(
            brake=self.brake_class,
            throttle=THROTTLE_BINS[self.throttle_bin],
            steer=STEER_BINS[self.steer_bin],
        )


class AgentState(_Frozen):
    """A background vehicle."""
    id: int
    state: VehicleState
    length: float = 4.6
    width: float = 1.9
    behavior: AgentBehavior = "non-reactive"
    target_speed: float = 0.0
    # (time s, desired speed m/s) switch points for reactive agents
    speed_profile: list[tuple[float, float]] = Field(default_factory=list)


class LanePolyline(_Frozen):
    id: int
    centerline: list[tuple[float, float]]
    width: float = 3.5


class Goal(_Frozen):
    x: float
    y: float
    radius: float


class Scenario(_Frozen):
    """A closed-loop driving scenario.

    Structural invariants (route ids, point counts, positive extents) are
    checked by ``src.world.validate_scenario`` so that violations can be
    reported as data instead of construction failures.
    """
    lanes: list[LanePolyline]
    ego_init: VehicleState
    agents: list[AgentState] = Field(default_factory=list)
    nav_command: NavCommand = "follow"
    expert_route: list[int]
    goal: Goal
    time_limit: float
    seed: int = 0
    # Derived from the file name; never serialized.
    scenario_id: str = Field(default="", exclude=True)

    @property
    def family(self) -> str:
        return self.scenario_id.rsplit("-", 1)[0] if self.scenario_id else ""

    def lane(self, lane_id: int) -> LanePolyline:
        for lane in self.lanes:
            if lane.id == lane_id:
                return lane
        raise KeyError(lane_id)
