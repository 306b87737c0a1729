"""
Kinematic bicycle model, actuation mapping, control rollout, trajectory
resampling and the pure-pursuit tracker.

All rollouts integrate at 10 Hz. Trajectories are expressed in the ego
frame of their starting state; the state at t=0 (the origin) is implicit.
"""

import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core.errors import TrajectoryError
from core.schemas import ControlTuple, VehicleState, wrap_angle
from .world import to_ego_frame

SIM_HZ = 10
SUBSTEP_DT = 1.0 / SIM_HZ
CONTROL_FREQUENCIES = (2, 10)


class VehicleParams(BaseModel):
    """Ego vehicle geometry and actuation limits."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    wheelbase: float = Field(default=2.8, gt=0)
    max_accel: float = Field(default=3.0, gt=0)
    brake_decel: float = Field(default=6.0, gt=0)
    drag_coeff: float = Field(default=0.1, gt=0)
    max_steer_angle: float = Field(default=0.7, gt=0, lt=math.pi / 2)
    ego_length: float = Field(default=4.6, gt=0)
    ego_width: float = Field(default=1.9, gt=0)


class PidGains(BaseModel):
    """Tracker gains: pure pursuit laterally, P + drag feedforward longitudinally."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    k_p: float = Field(default=0.5, ge=0)
    k_ff: float = Field(default=1.0, ge=0)
    lookahead_time: float = Field(default=1.0, gt=0)
    min_lookahead: float = Field(default=2.0, gt=0)
    max_lookahead: float = Field(default=6.0, gt=0)
    stop_speed: float = Field(default=0.5, ge=0)
    overspeed: float = Field(default=2.0, gt=0)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly timed ego-frame waypoints (x, y, heading); first waypoint at t = dt."""
    waypoints: np.ndarray
    dt: float

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=np.float64)
        if wp.ndim != 2 or wp.shape[1] != 3 or wp.shape[0] < 1:
            raise TrajectoryError(f"waypoints must be (n>=1, 3), got {wp.shape}")
        if not self.dt > 0:
            raise TrajectoryError("dt must be > 0")
        object.__setattr__(self, "waypoints", wp)

    def __len__(self) -> int:
        return self.waypoints.shape[0]

    @property
    def horizon(self) -> float:
        return len(self) * self.dt

    @property
    def frequency(self) -> float:
        return 1.0 / self.dt

    @property
    def xy(self) -> np.ndarray:
        return self.waypoints[:, :2]

    def truncated(self, n: int) -> "Trajectory":
        return Trajectory(self.waypoints[:n], self.dt)


@dataclass(frozen=True)
class ControlSequence:
    controls: tuple[ControlTuple, ...]
    frequency: int

    def __post_init__(self):
        if self.frequency not in CONTROL_FREQUENCIES:
            raise ValueError(f"frequency must be one of {CONTROL_FREQUENCIES}")
        if len(self.controls) < 1:
            raise ValueError("control sequence must not be empty")
        object.__setattr__(self, "controls", tuple(self.controls))

    def __len__(self) -> int:
        return len(self.controls)

    @property
    def first(self) -> ControlTuple:
        return self.controls[0]


def expand_to_10hz(seq: ControlSequence) -> ControlSequence:
    """Hold each control for its sub-steps, yielding an equivalent 10 Hz sequence."""
    repeat = SIM_HZ // seq.frequency
    return ControlSequence(tuple(c for c in seq.controls for _ in range(repeat)), SIM_HZ)


# ══════════════════════════════════════════════════════════════════════════
#  BICYCLE MODEL
# ══════════════════════════════════════════════════════════════════════════

def actuation_map(control: ControlTuple, speed: float, params: VehicleParams) -> tuple[float, float]:
    """Map a control tuple to (longitudinal accel m/s^2, front-wheel steer angle rad)."""
    if control.brake:
        accel = -params.brake_decel
    else:
        accel = params.max_accel * control.throttle - params.drag_coeff * speed
    return accel, params.max_steer_angle * control.steer


def _integrate(x: float, y: float, heading: float, speed: float,
               control: ControlTuple, dt: float, params: VehicleParams) -> tuple[float, float, float, float]:
    # rear-axle kinematic bicycle, explicit Euler
    accel, steer_angle = actuation_map(control, speed, params)
    heading_rate = speed * math.tan(steer_angle) / params.wheelbase
    x = x + speed * math.cos(heading) * dt
    y = y + speed * math.sin(heading) * dt
    heading = wrap_angle(heading + heading_rate * dt)
    speed = max(0.0, speed + accel * dt)
    return x, y, heading, speed


def bicycle_step(state: VehicleState, control: ControlTuple, dt: float,
                 params: VehicleParams) -> VehicleState:
    """Advance one control interval, sub-stepping at <= 0.1 s."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    n = max(1, math.ceil(dt / SUBSTEP_DT - 1e-9))
    h = dt / n
    x, y, heading, speed = state.x, state.y, state.heading, state.speed
    for _ in range(n):
        x, y, heading, speed = _integrate(x, y, heading, speed, control, h, params)
    return VehicleState(x=x, y=y, heading=heading, speed=speed)


def rollout(seq: ControlSequence, init: VehicleState, params: VehicleParams) -> Trajectory:
    """Integrate a control sequence at 10 Hz from ``init``; output in init's ego frame."""
    repeat = SIM_HZ // seq.frequency
    x, y, heading, speed = 0.0, 0.0, 0.0, init.speed
    waypoints = np.empty((len(seq) * repeat, 3))
    k = 0
    for control in seq.controls:
        for _ in range(repeat):
            x, y, heading, speed = _integrate(x, y, heading, speed, control, SUBSTEP_DT, params)
            waypoints[k] = (x, y, heading)
            k += 1
    return Trajectory(waypoints, SUBSTEP_DT)


def relative_trajectory(poses: np.ndarray, reference: VehicleState, dt: float) -> Trajectory:
    """Express global (n, 3) poses in the ego frame of ``reference``."""
    xy = to_ego_frame(poses[:, :2], reference)
    heading = np.array([wrap_angle(h - reference.heading) for h in poses[:, 2]])
    return Trajectory(np.column_stack([xy, heading]), dt)


# ══════════════════════════════════════════════════════════════════════════
#  RESAMPLING
# ══════════════════════════════════════════════════════════════════════════

def resample(traj: Trajectory, target_hz: float) -> Trajectory:
    """Linear resampling of x, y; heading on the circle. The origin anchors t = 0."""
    if not target_hz > 0:
        raise TrajectoryError("target_hz must be > 0")
    source_hz = traj.frequency
    if math.isclose(source_hz, target_hz, rel_tol=1e-12):
        return traj
    if len(traj) < 2 and target_hz > source_hz:
        raise TrajectoryError("need ≥ 2 waypoints")

    n_new = math.floor(traj.horizon * target_hz + 1e-9)
    if n_new < 1:
        raise TrajectoryError("trajectory horizon shorter than the target period")
    src_t = np.concatenate([[0.0], np.arange(1, len(traj) + 1) / source_hz])
    new_t = np.arange(1, n_new + 1) / target_hz

    wp = np.vstack([[0.0, 0.0, 0.0], traj.waypoints])
    x = np.interp(new_t, src_t, wp[:, 0])
    y = np.interp(new_t, src_t, wp[:, 1])
    heading = np.interp(new_t, src_t, np.unwrap(wp[:, 2]))
    heading = np.array([wrap_angle(h) for h in heading])
    return Trajectory(np.column_stack([x, y, heading]), 1.0 / target_hz)


# ══════════════════════════════════════════════════════════════════════════
#  TRACKER
# ══════════════════════════════════════════════════════════════════════════

def pid_control(traj: Trajectory, state: VehicleState, gains: PidGains,
                params: VehicleParams = VehicleParams()) -> ControlTuple:
    """Single control that tracks ``traj`` (expressed in the ego frame of ``state``)."""
    path = np.vstack([[0.0, 0.0], traj.xy])
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    v = state.speed
    lookahead = min(max(v * gains.lookahead_time, gains.min_lookahead), gains.max_lookahead)

    if lookahead >= cum[-1]:
        index = len(traj) - 1
        target = path[-1]
    else:
        index = int(np.searchsorted(cum, lookahead, side="right")) - 1
        frac = (lookahead - cum[index]) / seg[index]
        target = path[index] + frac * (path[index + 1] - path[index])

    distance = math.hypot(target[0], target[1])
    if distance < 1e-6:
        steer = 0.0
    else:
        alpha = math.atan2(target[1], target[0])
        delta = math.atan2(2.0 * params.wheelbase * math.sin(alpha), distance)
        steer = delta / params.max_steer_angle

    v_target = seg[index] / traj.dt
    brake = v_target < gains.stop_speed or v - v_target > gains.overspeed
    if brake:
        throttle = 0.0
    else:
        feedforward = gains.k_ff * params.drag_coeff * v_target / params.max_accel
        throttle = gains.k_p * (v_target - v) + feedforward
    return ControlTuple(brake=int(brake), throttle=throttle, steer=steer)
