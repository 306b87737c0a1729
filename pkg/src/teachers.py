"""
Rule-based open-loop metric teachers: collision (COL), soft lane keeping
(SLK) and ego progress (EP), plus imitation targets for a trajectory
vocabulary.

Scalar operations delegate to batched implementations so that labeling a
whole vocabulary is a handful of numpy calls.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core.errors import DegenerateRouteError
from core.schemas import AgentState, LanePolyline, VehicleState
from .kinematics import SIM_HZ, Trajectory, VehicleParams, resample
from .world import lane_array, project_onto_polyline, to_ego_frame

logger = logging.getLogger(__name__)


class TeacherParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    angle_max_deg: float = Field(default=30.0, gt=0, le=180)
    lateral_margin: float = Field(default=0.5, ge=0)
    ep_threshold: float = Field(default=0.5, gt=0)
    min_expert_progress: float = Field(default=0.5, gt=0)


@dataclass(frozen=True)
class OrientedBox:
    x: float
    y: float
    heading: float
    length: float
    width: float

    def corners(self) -> np.ndarray:
        return box_corners(self.x, self.y, self.heading, self.length, self.width)


@dataclass(frozen=True)
class MetricScores:
    """Per-anchor teacher labels."""
    col: np.ndarray
    slk: np.ndarray
    ep: np.ndarray
    ep_ratio: np.ndarray
    y_imitation: np.ndarray

    def __len__(self) -> int:
        return len(self.y_imitation)

    def stacked(self) -> np.ndarray:
        """(K, 3) binary targets in COL, SLK, EP order."""
        return np.stack([self.col, self.slk, self.ep], axis=-1).astype(np.float64)


@dataclass(frozen=True)
class LabelingFrame:
    """Privileged scene context in the ego frame of the labeled instant."""
    agents: Sequence[AgentState]
    lanes: Sequence[LanePolyline]
    route: np.ndarray


def labeling_frame(ego: VehicleState, agents: Sequence[AgentState],
                   lanes: Sequence[LanePolyline], route: np.ndarray) -> LabelingFrame:
    """Transform global agents, lanes and route into the ego frame."""
    rel_agents = []
    for agent in agents:
        xy = to_ego_frame(np.array([agent.state.x, agent.state.y]), ego)
        state = VehicleState(x=float(xy[0]), y=float(xy[1]),
                             heading=agent.state.heading - ego.heading, speed=agent.state.speed)
        rel_agents.append(agent.model_copy(update={"state": state}))
    rel_lanes = [
        lane.model_copy(update={"centerline": [tuple(p) for p in to_ego_frame(lane_array(lane), ego).tolist()]})
        for lane in lanes
    ]
    return LabelingFrame(rel_agents, rel_lanes, to_ego_frame(route, ego))


# ══════════════════════════════════════════════════════════════════════════
#  ORIENTED BOXES
# ══════════════════════════════════════════════════════════════════════════

_CORNER_SIGNS = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])


def box_corners(x, y, heading, length, width) -> np.ndarray:
    """Corners (..., 4, 2) of boxes; arguments broadcast."""
    x, y, heading, length, width = np.broadcast_arrays(*map(np.asarray, (x, y, heading, length, width)))
    c, s = np.cos(heading)[..., None], np.sin(heading)[..., None]
    lx = 0.5 * length[..., None] * _CORNER_SIGNS[:, 0]
    ly = 0.5 * width[..., None] * _CORNER_SIGNS[:, 1]
    return np.stack([x[..., None] + c * lx - s * ly, y[..., None] + s * lx + c * ly], axis=-1)


def boxes_overlap(corners_a: np.ndarray, corners_b: np.ndarray) -> np.ndarray:
    """Separating-axis test over the four face normals; touching counts as overlap."""
    corners_a, corners_b = np.broadcast_arrays(corners_a, corners_b)
    axes = np.stack([
        corners_a[..., 1, :] - corners_a[..., 0, :],
        corners_a[..., 2, :] - corners_a[..., 1, :],
        corners_b[..., 1, :] - corners_b[..., 0, :],
        corners_b[..., 2, :] - corners_b[..., 1, :],
    ], axis=-2)
    proj_a = np.einsum("...kd,...ad->...ak", corners_a, axes)
    proj_b = np.einsum("...kd,...ad->...ak", corners_b, axes)
    separated = (proj_a.max(-1) < proj_b.min(-1)) | (proj_b.max(-1) < proj_a.min(-1))
    return ~separated.any(-1)


def obb_overlap(box_a: OrientedBox, box_b: OrientedBox) -> bool:
    return bool(boxes_overlap(box_a.corners(), box_b.corners()))


# ══════════════════════════════════════════════════════════════════════════
#  COLLISION
# ══════════════════════════════════════════════════════════════════════════

def _agent_array(agents: Sequence[AgentState]) -> np.ndarray:
    return np.array([[a.state.x, a.state.y, a.state.heading, a.state.speed, a.length, a.width]
                     for a in agents]).reshape(-1, 6)


def collision_labels(waypoints: np.ndarray, dt: float, agents: Sequence[AgentState],
                     vehicle: VehicleParams) -> np.ndarray:
    """Batched collision teacher: (K, n, 3) ego-frame waypoints -> (K,) in {0, 1}.

    Agents move at constant velocity; waypoint k is checked at time (k+1)·dt.
    """
    K, n = waypoints.shape[:2]
    if not agents:
        return np.ones(K, dtype=np.int64)
    ag = _agent_array(agents)
    times = np.arange(1, n + 1) * dt
    ax = ag[None, :, 0] + ag[None, :, 3] * np.cos(ag[None, :, 2]) * times[:, None]
    ay = ag[None, :, 1] + ag[None, :, 3] * np.sin(ag[None, :, 2]) * times[:, None]
    agent_corners = box_corners(ax, ay, ag[None, :, 2], ag[None, :, 4], ag[None, :, 5])  # (n, A, 4, 2)
    ego_corners = box_corners(waypoints[..., 0], waypoints[..., 1], waypoints[..., 2],
                              vehicle.ego_length, vehicle.ego_width)                  # (K, n, 4, 2)
    hit = boxes_overlap(ego_corners[:, :, None], agent_corners[None])                 # (K, n, A)
    return (~hit.any(axis=(1, 2))).astype(np.int64)


def collision_score(traj: Trajectory, agents: Sequence[AgentState], vehicle: VehicleParams) -> int:
    dense = resample(traj, SIM_HZ)
    return int(collision_labels(dense.waypoints[None], dense.dt, agents, vehicle)[0])


# ══════════════════════════════════════════════════════════════════════════
#  SOFT LANE KEEPING
# ══════════════════════════════════════════════════════════════════════════

def _lane_segments(lanes: Sequence[LanePolyline]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    starts, dirs, half_widths = [], [], []
    for lane in lanes:
        poly = lane_array(lane)
        starts.append(poly[:-1])
        dirs.append(np.diff(poly, axis=0))
        half_widths.append(np.full(len(poly) - 1, 0.5 * lane.width))
    return np.concatenate(starts), np.concatenate(dirs), np.concatenate(half_widths)


def _nearest_segment(points: np.ndarray, starts: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance to and index of the closest lane segment for (..., 2) points."""
    rel = points[..., None, :] - starts
    len2 = np.einsum("sd,sd->s", dirs, dirs)
    t = np.clip(np.einsum("...sd,sd->...s", rel, dirs) / len2, 0.0, 1.0)
    dist = np.linalg.norm(rel - t[..., None] * dirs, axis=-1)
    index = np.argmin(dist, axis=-1)
    return np.take_along_axis(dist, index[..., None], axis=-1)[..., 0], index


def lane_keeping_labels(xy: np.ndarray, lanes: Sequence[LanePolyline], params: TeacherParams) -> np.ndarray:
    """Batched soft lane keeping: (K, n, 2) ego-frame points -> (K,) in {0, 1}."""
    K = xy.shape[0]
    if not lanes:
        return np.zeros(K, dtype=np.int64)
    starts, dirs, half_widths = _lane_segments(lanes)

    dist, index = _nearest_segment(xy, starts, dirs)
    off_lane = (dist > half_widths[index] + params.lateral_margin).any(axis=1)

    path = np.concatenate([np.zeros((K, 1, 2)), xy], axis=1)
    seg = np.diff(path, axis=1)
    mid = 0.5 * (path[:, 1:] + path[:, :-1])
    _, lane_index = _nearest_segment(mid, starts, dirs)
    traj_angle = np.arctan2(seg[..., 1], seg[..., 0])
    lane_dir = dirs[lane_index]
    lane_angle = np.arctan2(lane_dir[..., 1], lane_dir[..., 0])
    diff = np.abs(np.angle(np.exp(1j * (traj_angle - lane_angle))))
    moving = np.linalg.norm(seg, axis=-1) > 1e-3
    misaligned = ((diff > math.radians(params.angle_max_deg)) & moving).any(axis=1)
    return (~(off_lane | misaligned)).astype(np.int64)


def lane_keeping_score(traj: Trajectory, lanes: Sequence[LanePolyline], params: TeacherParams) -> int:
    return int(lane_keeping_labels(traj.xy[None], lanes, params)[0])


# ══════════════════════════════════════════════════════════════════════════
#  EGO PROGRESS
# ══════════════════════════════════════════════════════════════════════════

def _expert_progress(route: np.ndarray, expert_final: np.ndarray) -> tuple[float, float]:
    arcs, _, _ = project_onto_polyline(np.vstack([[0.0, 0.0], expert_final]), route)
    return float(arcs[0]), float(arcs[1] - arcs[0])


def progress_ratios(final_xy: np.ndarray, route: np.ndarray, start_arc: float, expert_progress: float) -> np.ndarray:
    arcs, _, _ = project_onto_polyline(final_xy, route)
    return np.maximum(arcs - start_arc, 0.0) / expert_progress


def ego_progress_score(traj: Trajectory, route: np.ndarray, expert: Trajectory,
                       params: TeacherParams) -> tuple[int, float]:
    """Progress along the expert route, normalized by the expert's own progress."""
    start_arc, expert_progress = _expert_progress(route, expert.xy[-1])
    if expert_progress <= 1e-9:
        raise DegenerateRouteError("degenerate expert route")
    ratio = float(progress_ratios(traj.xy[-1:], route, start_arc, expert_progress)[0])
    return int(ratio >= params.ep_threshold), ratio


# ══════════════════════════════════════════════════════════════════════════
#  VOCABULARY LABELS
# ══════════════════════════════════════════════════════════════════════════

def imitation_targets(anchors_xy: np.ndarray, expert_xy: np.ndarray) -> np.ndarray:
    """Softmax over anchors of the negative summed squared waypoint distance."""
    d2 = ((anchors_xy - expert_xy[None]) ** 2).sum(axis=(1, 2))
    logits = -(d2 - d2.min())
    weights = np.exp(logits)
    return weights / weights.sum()


def label_vocabulary(vocab, frame: LabelingFrame, expert: Trajectory,
                     params: TeacherParams, vehicle: VehicleParams) -> MetricScores:
    """Teacher labels and imitation targets for every anchor of ``vocab``."""
    anchors = vocab.anchors
    n = min(anchors.shape[1], len(expert))
    y = imitation_targets(anchors[:, :n, :2], expert.xy[:n])

    dense = np.stack([resample(Trajectory(a, vocab.dt), SIM_HZ).waypoints for a in anchors])
    col = collision_labels(dense, 1.0 / SIM_HZ, frame.agents, vehicle)
    slk = lane_keeping_labels(anchors[..., :2], frame.lanes, params)

    start_arc, expert_progress = _expert_progress(frame.route, expert.xy[-1])
    if expert_progress < params.min_expert_progress:
        ratio = np.ones(len(anchors))
    else:
        ratio = progress_ratios(anchors[:, -1, :2], frame.route, start_arc, expert_progress)
    ep = (ratio >= params.ep_threshold).astype(np.int64)
    return MetricScores(col=col, slk=slk, ep=ep, ep_ratio=ratio, y_imitation=y)
