"""
Scene data model operations: scenario file I/O, validation, ego-frame
geometry and structured scene tokenization.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core.errors import ScenarioError
from core.schemas import NAV_COMMANDS, AgentState, LanePolyline, Scenario, VehicleState

logger = logging.getLogger(__name__)

SCENARIO_KEYS = frozenset(
    {"lanes", "ego_init", "agents", "nav_command", "expert_route", "goal", "time_limit", "seed"}
)

EGO_TOKEN_DIM = 1 + len(NAV_COMMANDS)
AGENT_TOKEN_DIM = 7
POINTS_PER_LANE_TOKEN = 4
LANE_TOKEN_DIM = 2 * POINTS_PER_LANE_TOKEN


class TokenizerSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_agents: int = Field(default=8, ge=1)
    max_lanes: int = Field(default=8, ge=1)
    lane_sample_spacing: float = Field(default=4.0, gt=0.0)
    token_range: float = Field(default=60.0, gt=0.0)


# ══════════════════════════════════════════════════════════════════════════
#  SCENARIO FILES
# ══════════════════════════════════════════════════════════════════════════

def validate_scenario(scenario: Scenario) -> list[str]:
    """Return every violated invariant; an empty list means the scenario is valid."""
    violations: list[str] = []
    if not scenario.lanes:
        violations.append("lanes must not be empty")

    seen_lanes: set[int] = set()
    for i, lane in enumerate(scenario.lanes):
        if lane.id in seen_lanes:
            violations.append(f"lanes[{i}].id {lane.id} is duplicated")
        seen_lanes.add(lane.id)
        if len(lane.centerline) < 2:
            violations.append(f"lanes[{i}].centerline must have >= 2 points")
        for k in range(len(lane.centerline) - 1):
            if lane.centerline[k] == lane.centerline[k + 1]:
                violations.append(f"lanes[{i}].centerline points {k} and {k + 1} coincide")
                break
        if lane.width <= 0:
            violations.append(f"lanes[{i}].width must be > 0")

    if not scenario.expert_route:
        violations.append("expert_route must not be empty")
    for lane_id in scenario.expert_route:
        if lane_id not in seen_lanes:
            violations.append(f"expert_route references unknown lane id {lane_id}")

    seen_agents: set[int] = set()
    for i, agent in enumerate(scenario.agents):
        if agent.id in seen_agents:
            violations.append(f"agents[{i}].id {agent.id} is duplicated")
        seen_agents.add(agent.id)
        if agent.length <= 0 or agent.width <= 0:
            violations.append(f"agents[{i}] length and width must be > 0")
        if agent.target_speed < 0:
            violations.append(f"agents[{i}].target_speed must be >= 0")

    if scenario.goal.radius <= 0:
        violations.append("goal.radius must be > 0")
    if scenario.time_limit <= 0:
        violations.append("time_limit must be > 0")
    return violations


def _field_of(message: str) -> str:
    return message.split(" ", 1)[0]


def scenario_from_dict(data: Any, scenario_id: str = "") -> Scenario:
    """Build and validate a Scenario from parsed JSON."""
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    unknown = sorted(set(data) - SCENARIO_KEYS)
    if unknown:
        raise ScenarioError(f"unknown key '{unknown[0]}'", field=unknown[0])
    missing = sorted(SCENARIO_KEYS - set(data))
    if missing:
        raise ScenarioError(f"missing key '{missing[0]}'", field=missing[0])
    try:
        scenario = Scenario.model_validate({**data, "scenario_id": scenario_id})
    except ValidationError as exc:
        error = exc.errors()[0]
        path = ".".join(str(part) for part in error["loc"])
        raise ScenarioError(error["msg"], field=path) from exc

    violations = validate_scenario(scenario)
    if violations:
        raise ScenarioError(violations[0], field=_field_of(violations[0]))
    return scenario


def load_scenario(path: Path) -> Scenario:
    """Load a scenario JSON file; the scenario id is the file stem."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    return scenario_from_dict(data, scenario_id=path.stem)


def scenario_to_dict(scenario: Scenario) -> dict:
    return scenario.model_dump(mode="json")


def save_scenario(scenario: Scenario, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scenario_to_dict(scenario), indent=2) + "\n", encoding="utf-8")
    return path


# ══════════════════════════════════════════════════════════════════════════
#  GEOMETRY
# ══════════════════════════════════════════════════════════════════════════

def to_ego_frame(points: np.ndarray, ego: VehicleState) -> np.ndarray:
    """Express global (..., 2) points in the ego frame (x forward, y left)."""
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    dx = points[..., 0] - ego.x
    dy = points[..., 1] - ego.y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def from_ego_frame(points: np.ndarray, ego: VehicleState) -> np.ndarray:
    """Map ego-frame (..., 2) points back to the global frame."""
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    px, py = points[..., 0], points[..., 1]
    return np.stack([ego.x + c * px - s * py, ego.y + s * px + c * py], axis=-1)


def polyline_arclength(poly: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def project_onto_polyline(points: np.ndarray, poly: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project (P, 2) points onto a polyline.

    Returns arc-length of the foot point, Euclidean distance and the
    segment index, each of shape (P,). Ties pick the first segment.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    a = poly[:-1]
    d = poly[1:] - a
    seg_len2 = np.einsum("ij,ij->i", d, d)
    rel = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pij,ij->pi", rel, d) / seg_len2[None, :], 0.0, 1.0)
    foot = a[None, :, :] + t[..., None] * d[None, :, :]
    dist = np.linalg.norm(points[:, None, :] - foot, axis=-1)
    seg = np.argmin(dist, axis=1)
    rows = np.arange(points.shape[0])
    cum = polyline_arclength(poly)
    arc = cum[seg] + t[rows, seg] * np.sqrt(seg_len2[seg])
    return arc, dist[rows, seg], seg


def point_at_arclength(poly: np.ndarray, s: float) -> np.ndarray:
    cum = polyline_arclength(poly)
    s = min(max(s, 0.0), cum[-1])
    return np.array([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])])


def sample_polyline(poly: np.ndarray, spacing: float) -> np.ndarray:
    """Points every ``spacing`` meters of arc-length, starting at the first vertex."""
    cum = polyline_arclength(poly)
    s = np.arange(0.0, cum[-1] + 1e-9, spacing)
    return np.stack([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])], axis=-1)


def lane_array(lane: LanePolyline) -> np.ndarray:
    return np.asarray(lane.centerline, dtype=np.float64)


def route_polyline(scenario: Scenario) -> np.ndarray:
    """Concatenate the expert route lanes into one forward polyline.

    Each following lane is trimmed to start after the projection of the
    current route end, so lanes that overlap (merges) do not fold back.
    """
    route = lane_array(scenario.lane(scenario.expert_route[0]))
    for lane_id in scenario.expert_route[1:]:
        nxt = lane_array(scenario.lane(lane_id))
        arc, _, _ = project_onto_polyline(route[-1:], nxt)
        cum = polyline_arclength(nxt)
        tail = nxt[cum > arc[0] + 1e-6]
        if len(tail):
            route = np.vstack([route, tail])
    return route


def nearest_lane_distance(point: np.ndarray, lanes: Sequence[LanePolyline]) -> tuple[float, LanePolyline]:
    """Distance from a global point to the closest lane centerline."""
    best, best_lane = math.inf, lanes[0]
    for lane in lanes:
        _, dist, _ = project_onto_polyline(point[None, :], lane_array(lane))
        if dist[0] < best:
            best, best_lane = float(dist[0]), lane
    return best, best_lane


# ══════════════════════════════════════════════════════════════════════════
#  SCENE TOKENS
# ══════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class SceneSnapshot:
    """Everything tokenize_scene needs from a world at one instant."""
    ego: VehicleState
    agents: Sequence[AgentState]
    lanes: Sequence[LanePolyline]
    nav_command: str = "follow"


@dataclass(frozen=True)
class SceneTokens:
    """Fixed-size ego-frame tokens; invalid slots are zero with mask 0."""
    ego: np.ndarray           # (EGO_TOKEN_DIM,)
    agents: np.ndarray        # (M_a, AGENT_TOKEN_DIM)
    agent_mask: np.ndarray    # (M_a,)
    lanes: np.ndarray         # (M_l, LANE_TOKEN_DIM)
    lane_mask: np.ndarray     # (M_l,)
    agent_ids: tuple[int, ...] = field(default=())

    @property
    def mask(self) -> np.ndarray:
        """Validity bits for [ego, agents..., lanes...]."""
        return np.concatenate([[1.0], self.agent_mask, self.lane_mask])

    def to_dict(self) -> dict:
        return {
            "ego": self.ego.tolist(),
            "agents": self.agents.tolist(),
            "agent_mask": self.agent_mask.tolist(),
            "lanes": self.lanes.tolist(),
            "lane_mask": self.lane_mask.tolist(),
            "agent_ids": list(self.agent_ids),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneTokens":
        return cls(
            ego=np.asarray(data["ego"], dtype=np.float64),
            agents=np.asarray(data["agents"], dtype=np.float64).reshape(-1, AGENT_TOKEN_DIM),
            agent_mask=np.asarray(data["agent_mask"], dtype=np.float64),
            lanes=np.asarray(data["lanes"], dtype=np.float64).reshape(-1, LANE_TOKEN_DIM),
            lane_mask=np.asarray(data["lane_mask"], dtype=np.float64),
            agent_ids=tuple(data.get("agent_ids", ())),
        )


def nav_one_hot(command: str) -> np.ndarray:
    vec = np.zeros(len(NAV_COMMANDS))
    vec[NAV_COMMANDS.index(command)] = 1.0
    return vec


@lru_cache(maxsize=256)
def _lane_chunks(centerline: tuple[tuple[float, float], ...], spacing: float) -> np.ndarray:
    """Split a lane into (C, 4, 2) windows of consecutive arc-length samples."""
    poly = np.asarray(centerline, dtype=np.float64)
    samples = sample_polyline(poly, spacing)
    n = POINTS_PER_LANE_TOKEN
    if len(samples) < n:
        cum = polyline_arclength(poly)
        s = np.linspace(0.0, cum[-1], n)
        samples = np.stack([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])], axis=-1)
    starts = range(0, len(samples) - n + 1, n - 1)
    chunks = np.stack([samples[k:k + n] for k in starts])
    chunks.setflags(write=False)
    return chunks


def tokenize_scene(snapshot: SceneSnapshot, settings: TokenizerSettings) -> SceneTokens:
    """Encode a snapshot into ego-frame tokens.

    Agents and lane chunks within ``token_range`` are ordered by distance to
    the ego (ties by id) and the nearest ``max_agents`` / ``max_lanes`` kept.
    """
    ego = snapshot.ego
    ego_token = np.concatenate([[ego.speed], nav_one_hot(snapshot.nav_command)])
    ego_xy = np.array([ego.x, ego.y])

    agents = np.zeros((settings.max_agents, AGENT_TOKEN_DIM))
    agent_mask = np.zeros(settings.max_agents)
    agent_ids: list[int] = []
    if snapshot.agents:
        pos = np.array([[a.state.x, a.state.y] for a in snapshot.agents])
        dist = np.linalg.norm(pos - ego_xy, axis=1)
        ids = np.array([a.id for a in snapshot.agents])
        order = [k for k in np.lexsort((ids, dist)) if dist[k] <= settings.token_range]
        rel = to_ego_frame(pos, ego)
        for slot, k in enumerate(order[: settings.max_agents]):
            agent = snapshot.agents[k]
            rel_heading = agent.state.heading - ego.heading
            agents[slot] = (
                rel[k, 0], rel[k, 1], math.sin(rel_heading), math.cos(rel_heading),
                agent.state.speed, agent.length, agent.width,
            )
            agent_mask[slot] = 1.0
            agent_ids.append(agent.id)

    lanes = np.zeros((settings.max_lanes, LANE_TOKEN_DIM))
    lane_mask = np.zeros(settings.max_lanes)
    chunks, keys = [], []
    for lane in snapshot.lanes:
        for index, chunk in enumerate(_lane_chunks(tuple(lane.centerline), settings.lane_sample_spacing)):
            chunks.append(chunk)
            keys.append((lane.id, index))
    if chunks:
        stacked = np.stack(chunks)
        dist = np.linalg.norm(stacked - ego_xy, axis=-1).min(axis=1)
        lane_ids = np.array([k[0] for k in keys])
        chunk_ids = np.array([k[1] for k in keys])
        order = [k for k in np.lexsort((chunk_ids, lane_ids, dist)) if dist[k] <= settings.token_range]
        for slot, k in enumerate(order[: settings.max_lanes]):
            lanes[slot] = to_ego_frame(stacked[k], ego).reshape(-1)
            lane_mask[slot] = 1.0

    return SceneTokens(
        ego=ego_token,
        agents=agents,
        agent_mask=agent_mask,
        lanes=lanes,
        lane_mask=lane_mask,
        agent_ids=tuple(agent_ids),
    )
