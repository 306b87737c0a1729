"""
╔══════════════════════════════════════════════════════════════════════════════╗
║                          CLOSED-LOOP MICRO-SIMULATOR                         ║
║                                                                              ║
║  10 Hz world stepping with IDM-driven reactive agents, a scripted expert    ║
║  autopilot, episode execution and logging, outcome metrics, suite reports   ║
║  and expert demo collection.                                                ║
╚══════════════════════════════════════════════════════════════════════════════╝
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from core.base_policy import BasePolicy
from core.errors import EpisodeError, ExpertLostError, PlannerError
from core.output_writer import OutputWriter, read_jsonl, write_jsonl
from core.schemas import AgentState, ControlTuple, DiscreteControl, LanePolyline, Scenario, VehicleState, wrap_angle
from .heads import snap_control
from .kinematics import SIM_HZ, Trajectory, VehicleParams, bicycle_step
from .teachers import box_corners, boxes_overlap
from .world import (
    SceneSnapshot, TokenizerSettings, lane_array, nearest_lane_distance, point_at_arclength,
    project_onto_polyline, route_polyline, scenario_to_dict, to_ego_frame, tokenize_scene,
)

logger = logging.getLogger(__name__)

STEP_DT = 1.0 / SIM_HZ
FRAME_STRIDE = SIM_HZ // 2
TRAJ_STEPS = 6
CTRL_STEPS_10HZ = 20


class IdmParams(BaseModel):
    """Intelligent driver model for background agents and the expert."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    s0: float = Field(default=2.0, ge=0)
    headway: float = Field(default=1.5, ge=0)
    max_accel: float = Field(default=2.0, gt=0)
    comfort_decel: float = Field(default=3.0, gt=0)
    delta: float = Field(default=4.0, gt=0)
    emergency_decel: float = Field(default=6.0, gt=0)
    lane_band: float = Field(default=1.8, gt=0)


class SimParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    vehicle: VehicleParams = VehicleParams()
    idm: IdmParams = IdmParams()
    offroad_margin: float = Field(default=1.0, ge=0)


class ExpertSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    cruise_speed: float = Field(default=8.0, gt=0)
    brake_threshold: float = Field(default=3.0, gt=0)
    lookahead_time: float = Field(default=1.0, gt=0)
    min_lookahead: float = Field(default=3.0, gt=0)
    max_lookahead: float = Field(default=8.0, gt=0)
    lead_lateral: float = Field(default=2.2, gt=0)
    lead_heading_deg: float = Field(default=60.0, gt=0, le=180)
    crossing_heading_deg: float = Field(default=30.0, gt=0, le=180)
    crossing_horizon: float = Field(default=5.0, gt=0)
    corridor_half_width: float = Field(default=2.0, gt=0)
    clear_margin: float = Field(default=1.5, ge=0)
    lost_distance: float = Field(default=10.0, gt=0)


# ══════════════════════════════════════════════════════════════════════════════
#  WORLD STATE
# ══════════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class WorldState:
    """Simulator state; time is derived from the integer step counter."""
    step: int
    ego: VehicleState
    agents: tuple[AgentState, ...]
    lanes: tuple[LanePolyline, ...]
    collision_flag: bool = False
    offroad_flag: bool = False

    @property
    def time(self) -> float:
        return self.step / SIM_HZ


def _collides(ego: VehicleState, agents: Sequence[AgentState], vehicle: VehicleParams) -> bool:
    if not agents:
        return False
    ego_box = box_corners(ego.x, ego.y, ego.heading, vehicle.ego_length, vehicle.ego_width)
    ag = np.array([[a.state.x, a.state.y, a.state.heading, a.length, a.width] for a in agents])
    boxes = box_corners(ag[:, 0], ag[:, 1], ag[:, 2], ag[:, 3], ag[:, 4])
    return bool(boxes_overlap(ego_box[None], boxes).any())


def _offroad(ego: VehicleState, lanes: Sequence[LanePolyline], margin: float) -> bool:
    dist, lane = nearest_lane_distance(np.array([ego.x, ego.y]), lanes)
    return dist > 0.5 * lane.width + margin


def initial_world(scenario: Scenario, params: SimParams) -> WorldState:
    world = WorldState(0, scenario.ego_init, tuple(scenario.agents), tuple(scenario.lanes))
    return replace(world,
                   collision_flag=_collides(world.ego, world.agents, params.vehicle),
                   offroad_flag=_offroad(world.ego, world.lanes, params.offroad_margin))


# ══════════════════════════════════════════════════════════════════════════════
#  AGENTS
# ══════════════════════════════════════════════════════════════════════════════

def idm_accel(v: float, v_desired: float, gap: Optional[float], closing_speed: float, idm: IdmParams) -> float:
    """IDM acceleration, clamped to [-emergency_decel, max_accel].

    A desired speed of 0 requests an emergency stop.
    """
    if v_desired <= 0.0:
        return -idm.emergency_decel if v > 0.0 else 0.0
    accel = idm.max_accel * (1.0 - (v / v_desired) ** idm.delta)
    if gap is not None:
        if gap <= 0.0:
            return -idm.emergency_decel
        s_star = idm.s0 + max(0.0, v * idm.headway + v * closing_speed / (2.0 * math.sqrt(idm.max_accel * idm.comfort_decel)))
        accel -= idm.max_accel * (s_star / gap) ** 2
    return min(max(accel, -idm.emergency_decel), idm.max_accel)


def desired_speed(agent: AgentState, time: float) -> float:
    speed = agent.target_speed
    for switch_time, value in agent.speed_profile:
        if time + 1e-9 >= switch_time:
            speed = value
    return speed


def _lead_for(agent: AgentState, others: Sequence[tuple[float, float, float, float, float]],
              band: float) -> tuple[Optional[float], float]:
    """Closest vehicle ahead in the agent's lane band: (bumper gap, closing speed)."""
    best_gap, closing = None, 0.0
    s = agent.state
    c, sn = math.cos(s.heading), math.sin(s.heading)
    for x, y, heading, speed, length in others:
        dx = c * (x - s.x) + sn * (y - s.y)
        dy = -sn * (x - s.x) + c * (y - s.y)
        if dx <= 0.0 or abs(dy) >= band:
            continue
        gap = dx - 0.5 * (agent.length + length)
        if best_gap is None or gap < best_gap:
            best_gap = gap
            closing = s.speed - speed * math.cos(heading - s.heading)
    return best_gap, closing


def _advance_agents(world: WorldState, params: SimParams) -> tuple[AgentState, ...]:
    vehicles = [(a.state.x, a.state.y, a.state.heading, a.state.speed, a.length) for a in world.agents]
    vehicles.append((world.ego.x, world.ego.y, world.ego.heading, world.ego.speed, params.vehicle.ego_length))
    moved = []
    for k, agent in enumerate(world.agents):
        s = agent.state
        x = s.x + s.speed * math.cos(s.heading) * STEP_DT
        y = s.y + s.speed * math.sin(s.heading) * STEP_DT
        speed = s.speed
        if agent.behavior == "reactive":
            others = vehicles[:k] + vehicles[k + 1:]
            gap, closing = _lead_for(agent, others, params.idm.lane_band)
            accel = idm_accel(s.speed, desired_speed(agent, world.time), gap, closing, params.idm)
            speed = max(0.0, s.speed + accel * STEP_DT)
        moved.append(agent.model_copy(update={"state": VehicleState(x=x, y=y, heading=s.heading, speed=speed)}))
    return tuple(moved)


def step_world(world: WorldState, ego_control: ControlTuple, params: SimParams) -> WorldState:
    """Advance 0.1 s. Flags latch once set."""
    ego = bicycle_step(world.ego, ego_control, STEP_DT, params.vehicle)
    agents = _advance_agents(world, params)
    return WorldState(
        step=world.step + 1,
        ego=ego,
        agents=agents,
        lanes=world.lanes,
        collision_flag=world.collision_flag or _collides(ego, agents, params.vehicle),
        offroad_flag=world.offroad_flag or _offroad(ego, world.lanes, params.offroad_margin),
    )


# ══════════════════════════════════════════════════════════════════════════════
#  EXPERT
# ══════════════════════════════════════════════════════════════════════════════

def _route_heading(route: np.ndarray, segment: int) -> float:
    d = route[segment + 1] - route[segment]
    return math.atan2(d[1], d[0])


def _expert_gap(world: WorldState, route: np.ndarray, ego_arc: float, settings: ExpertSettings,
                vehicle: VehicleParams) -> tuple[Optional[float], float]:
    """Bumper gap and closing speed to the nearest in-route leader or crossing conflict."""
    best_gap, closing = None, 0.0
    v = world.ego.speed
    for agent in world.agents:
        s = agent.state
        arcs, dists, segs = project_onto_polyline(np.array([[s.x, s.y]]), route)
        diff = abs(wrap_angle(s.heading - _route_heading(route, int(segs[0]))))

        if diff < math.radians(settings.lead_heading_deg):
            if dists[0] < settings.lead_lateral and arcs[0] > ego_arc:
                gap = arcs[0] - ego_arc - 0.5 * (vehicle.ego_length + agent.length)
                if best_gap is None or gap < best_gap:
                    best_gap, closing = gap, v - s.speed * math.cos(diff)
            continue
        if diff <= math.radians(settings.crossing_heading_deg):
            continue

        times = np.arange(0.0, settings.crossing_horizon + 1e-9, STEP_DT)
        path = np.column_stack([s.x + s.speed * math.cos(s.heading) * times,
                                s.y + s.speed * math.sin(s.heading) * times])
        p_arcs, p_dists, _ = project_onto_polyline(path, route)
        inside = np.nonzero((p_dists <= settings.corridor_half_width) & (p_arcs > ego_arc))[0]
        if not len(inside):
            continue
        k = int(inside[0])
        conflict = float(p_arcs[k]) - ego_arc
        clear_time = (conflict + vehicle.ego_length + agent.width) / max(v, 0.1)
        if clear_time + settings.clear_margin < times[k]:
            continue
        gap = conflict - 0.5 * (vehicle.ego_length + agent.width)
        if best_gap is None or gap < best_gap:
            best_gap, closing = gap, v
    return best_gap, closing


def expert_autopilot(world: WorldState, scenario: Scenario, settings: ExpertSettings, params: SimParams,
                     route: Optional[np.ndarray] = None) -> tuple[ControlTuple, DiscreteControl]:
    """Pure pursuit on the route centerline, IDM longitudinally; returns the continuous
    control and its bin-snapped copy."""
    ego, vehicle = world.ego, params.vehicle
    if route is None:
        route = route_polyline(scenario)
    ego_xy = np.array([ego.x, ego.y])
    lane_dist, _ = nearest_lane_distance(ego_xy, scenario.lanes)
    if lane_dist > settings.lost_distance:
        raise ExpertLostError("expert lost")

    arcs, _, _ = project_onto_polyline(ego_xy[None], route)
    ego_arc = float(arcs[0])
    lookahead = min(max(ego.speed * settings.lookahead_time, settings.min_lookahead), settings.max_lookahead)
    target = to_ego_frame(point_at_arclength(route, ego_arc + lookahead), ego)
    distance = float(np.hypot(*target))
    if distance < 1e-6:
        steer = 0.0
    else:
        alpha = math.atan2(target[1], target[0])
        steer = math.atan2(2.0 * vehicle.wheelbase * math.sin(alpha), distance) / vehicle.max_steer_angle

    gap, closing = _expert_gap(world, route, ego_arc, settings, vehicle)
    a_cmd = idm_accel(ego.speed, settings.cruise_speed, gap, closing, params.idm)
    if a_cmd < -settings.brake_threshold or (ego.speed < 0.1 and a_cmd <= 0.0):
        control = ControlTuple(brake=1, throttle=0.0, steer=steer)
    else:
        throttle = (a_cmd + vehicle.drag_coeff * ego.speed) / vehicle.max_accel
        control = ControlTuple(brake=0, throttle=throttle, steer=steer)
    return control, snap_control(control)


class ExpertPolicy(BasePolicy):
    """Scripted autopilot with access to the full scenario."""

    name = "expert"

    def __init__(self, settings: ExpertSettings, params: SimParams, seed: int = 0):
        super().__init__(seed)
        self.settings = settings
        self.params = params
        self._routes: dict[str, np.ndarray] = {}

    def act(self, world: WorldState, scenario: Scenario) -> tuple[ControlTuple, dict]:
        key = scenario.scenario_id or str(id(scenario))
        if key not in self._routes:
            self._routes[key] = route_polyline(scenario)
        control, discrete = expert_autopilot(world, scenario, self.settings, self.params, self._routes[key])
        return control, {"discrete": [discrete.brake_class, discrete.throttle_bin, discrete.steer_bin]}


# ══════════════════════════════════════════════════════════════════════════════
#  EPISODES
# ══════════════════════════════════════════════════════════════════════════════

def _state_dict(s: VehicleState) -> dict:
    return {"x": s.x, "y": s.y, "heading": s.heading, "speed": s.speed}


def _agent_dict(a: AgentState) -> dict:
    return {"id": a.id, **_state_dict(a.state), "length": a.length, "width": a.width}


@dataclass
class EpisodeLog:
    header: dict
    steps: list[dict] = field(default_factory=list)
    final: Optional[dict] = None
    outcome: Optional[dict] = None
    partial: bool = False

    @property
    def scenario_id(self) -> str:
        return self.header["scenario_id"]

    @property
    def family(self) -> str:
        return self.scenario_id.rsplit("-", 1)[0]

    def poses(self) -> np.ndarray:
        """(n_steps + 1, 4) ego x, y, heading, speed including the final state."""
        states = [s["ego"] for s in self.steps] + ([self.final["ego"]] if self.final else [])
        return np.array([[e["x"], e["y"], e["heading"], e["speed"]] for e in states]).reshape(-1, 4)

    def records(self) -> list[dict]:
        out = [{"type": "header", **self.header}]
        out.extend({"type": "step", **s} for s in self.steps)
        out.append({"type": "outcome", "partial": self.partial, "final": self.final, **(self.outcome or {})})
        return out

    def write(self, path: Path) -> Path:
        return write_jsonl(path, self.records())

    @classmethod
    def read(cls, path: Path) -> "EpisodeLog":
        records = list(read_jsonl(path))
        if not records or records[0].get("type") != "header":
            raise PlannerError(f"{path}: episode log must start with a header record")
        log = cls({k: v for k, v in records[0].items() if k != "type"})
        for record in records[1:]:
            kind = record.pop("type", None)
            if kind == "step":
                log.steps.append(record)
            elif kind == "outcome":
                log.partial = record.pop("partial", False)
                log.final = record.pop("final", None)
                log.outcome = record
        return log


def executed_future(log: EpisodeLog, step: int, n: int = TRAJ_STEPS, stride: int = FRAME_STRIDE) -> Optional[Trajectory]:
    """Ego poses after ``step`` at 2 Hz, expressed in the ego frame at ``step``."""
    poses = log.poses()
    idx = [step + stride * (k + 1) for k in range(n) if step + stride * (k + 1) < len(poses)]
    if step >= len(poses) or not idx:
        return None
    x, y, heading, speed = poses[step]
    ref = VehicleState(x=x, y=y, heading=heading, speed=speed)
    xy = to_ego_frame(poses[idx, :2], ref)
    rel_heading = [wrap_angle(h - ref.heading) for h in poses[idx, 2]]
    return Trajectory(np.column_stack([xy, rel_heading]), stride / SIM_HZ)


def run_episode(scenario: Scenario, policy: BasePolicy, params: SimParams, config_hash: str = "",
                seed: int = 0, reference: Optional[EpisodeLog] = None) -> EpisodeLog:
    """Run until the goal is reached, a collision occurs or the time limit expires."""
    policy.reset(seed)
    route = route_polyline(scenario)
    log = EpisodeLog({
        "scenario_id": scenario.scenario_id, "seed": seed, "config_hash": config_hash,
        "policy": policy.name, "route": route.tolist(),
        "goal": [scenario.goal.x, scenario.goal.y, scenario.goal.radius],
        "lanes": [{"id": lane.id, "width": lane.width, "centerline": lane_array(lane).tolist()} for lane in scenario.lanes],
    })
    world = initial_world(scenario, params)
    n_steps = math.ceil(scenario.time_limit * SIM_HZ - 1e-9)
    while world.step < n_steps and not world.collision_flag and not _goal_reached(world.ego, scenario):
        try:
            control, diagnostics = policy.act(world, scenario)
        except PlannerError as e:
            log.final = {"ego": _state_dict(world.ego), "agents": [_agent_dict(a) for a in world.agents]}
            log.partial = True
            log.outcome = episode_metrics(log, reference, world, scenario)
            logger.warning("episode %s aborted at step %d: %s", scenario.scenario_id, world.step, e)
            raise EpisodeError(f"{scenario.scenario_id}: {e}", log=log) from e
        log.steps.append({
            "step": world.step, "t": world.time,
            "ego": _state_dict(world.ego), "agents": [_agent_dict(a) for a in world.agents],
            "control": {"brake": control.brake, "throttle": control.throttle, "steer": control.steer},
            "diagnostics": diagnostics,
            "collision": world.collision_flag, "offroad": world.offroad_flag,
        })
        world = step_world(world, control, params)
    log.final = {"ego": _state_dict(world.ego), "agents": [_agent_dict(a) for a in world.agents]}
    log.outcome = episode_metrics(log, reference, world, scenario)
    return log


def _goal_reached(ego: VehicleState, scenario: Scenario) -> bool:
    return math.hypot(ego.x - scenario.goal.x, ego.y - scenario.goal.y) <= scenario.goal.radius


# ══════════════════════════════════════════════════════════════════════════════
#  METRICS
# ══════════════════════════════════════════════════════════════════════════════

def _route_completion(log: EpisodeLog, goal_reached: bool) -> float:
    if goal_reached:
        return 1.0
    route = np.asarray(log.header["route"])
    poses = log.poses()
    goal = np.asarray(log.header["goal"][:2])
    arcs, _, _ = project_onto_polyline(np.vstack([poses[0, :2], poses[-1, :2], goal]), route)
    total = arcs[2] - arcs[0]
    if total <= 0:
        return 0.0
    return float(min(max((arcs[1] - arcs[0]) / total, 0.0), 1.0))


def _comfort(speeds: np.ndarray, max_accel: float = 3.0, max_jerk: float = 6.0) -> float:
    if len(speeds) < 2:
        return 1.0
    accel = np.diff(speeds) * SIM_HZ
    jerk = np.concatenate([[0.0], np.diff(accel) * SIM_HZ])
    ok = (np.abs(accel) <= max_accel + 1e-9) & (np.abs(jerk) <= max_jerk + 1e-9)
    return float(ok.mean())


def _planned(log: EpisodeLog, step: int) -> Optional[Trajectory]:
    if log.header.get("policy") == "expert":
        return executed_future(log, step)
    diag = log.steps[step].get("diagnostics") or {}
    if "trajectory" not in diag:
        return None
    return Trajectory(np.asarray(diag["trajectory"]), 1.0 / 2)


def _mean_l2(log: EpisodeLog, reference: Optional[EpisodeLog]) -> Optional[float]:
    reference = reference if reference is not None else (log if log.header.get("policy") == "expert" else None)
    if reference is None:
        return None
    distances = []
    for k in range(min(len(log.steps), len(reference.steps))):
        planned, expert = _planned(log, k), executed_future(reference, k)
        if planned is None or expert is None:
            continue
        n = min(len(planned), len(expert))
        distances.append(float(np.linalg.norm(planned.xy[:n] - expert.xy[:n], axis=1).mean()))
    return float(np.mean(distances)) if distances else None


def episode_metrics(log: EpisodeLog, reference: Optional[EpisodeLog] = None,
                    world: Optional[WorldState] = None, scenario: Optional[Scenario] = None) -> dict:
    """Outcome fields; ``world`` and ``scenario`` are optional when re-scoring a stored log."""
    if world is not None:
        collision, offroad = world.collision_flag, world.offroad_flag
    else:
        collision = bool(log.outcome and log.outcome.get("collision"))
        offroad = bool(log.outcome and log.outcome.get("offroad"))
    if scenario is not None and world is not None:
        goal_reached = _goal_reached(world.ego, scenario)
    else:
        final = log.poses()[-1]
        gx, gy, radius = log.header["goal"]
        goal_reached = math.hypot(final[0] - gx, final[1] - gy) <= radius
    goal_reached = goal_reached and not collision
    completion = _route_completion(log, goal_reached)
    return {
        "success": bool(goal_reached and not offroad and not log.partial),
        "goal_reached": bool(goal_reached),
        "collision": bool(collision),
        "offroad": bool(offroad),
        "route_completion": completion,
        "comfort": _comfort(log.poses()[:, 3]),
        "mean_l2": _mean_l2(log, reference),
        "ds_like": completion * 0.5 ** int(collision) * 0.7 ** int(offroad),
        "steps": len(log.steps),
    }


REPORT_COLUMNS = ("group", "episodes", "success_rate", "collision_rate", "route_completion",
                  "comfort", "mean_l2", "ds_like", "config_hash", "seed")


def _aggregate(group: str, logs: Sequence[EpisodeLog]) -> dict:
    outcomes = [log.outcome for log in logs]
    l2 = [o["mean_l2"] for o in outcomes if o.get("mean_l2") is not None]
    return {
        "group": group,
        "episodes": len(outcomes),
        "success_rate": 100.0 * sum(o["success"] for o in outcomes) / len(outcomes),
        "collision_rate": sum(o["collision"] for o in outcomes) / len(outcomes),
        "route_completion": float(np.mean([o["route_completion"] for o in outcomes])),
        "comfort": float(np.mean([o["comfort"] for o in outcomes])),
        "mean_l2": float(np.mean(l2)) if l2 else None,
        "ds_like": float(np.mean([o["ds_like"] for o in outcomes])),
    }


def suite_report(logs: Sequence[EpisodeLog], out_dir: Optional[Path] = None, config_hash: str = "",
                 seed: int = 0) -> list[dict]:
    """Per-family rows followed by an ``overall`` row; optionally written as CSV and JSON."""
    if not logs:
        raise ValueError("suite_report needs at least one episode log")
    families = sorted({log.family for log in logs})
    rows = [_aggregate(f, [log for log in logs if log.family == f]) for f in families]
    rows.append(_aggregate("overall", logs))
    for row in rows:
        row["config_hash"], row["seed"] = config_hash, seed
    if out_dir is not None:
        writer = OutputWriter(out_dir)
        writer.write_csv("suite_report.csv", rows, REPORT_COLUMNS)
        writer.write_json("suite_report.json", {"config_hash": config_hash, "seed": seed, "rows": rows})
        logger.info("suite report written to %s", out_dir)
    return rows


def run_suite(jobs: Sequence, runner: Callable, workers: int = 1) -> list:
    """Apply a picklable ``runner`` to every job; results keep the job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [runner(job) for job in tqdm(jobs, desc="episodes", disable=None)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(runner, jobs), total=len(jobs), desc="episodes", disable=None))


# ══════════════════════════════════════════════════════════════════════════════
#  DEMOS
# ══════════════════════════════════════════════════════════════════════════════

def demo_frames(log: EpisodeLog, scenario: Scenario, tokenizer: TokenizerSettings) -> list[dict]:
    """2 Hz frames with every future horizon inside the episode."""
    frames = []
    n_states = len(log.steps) + 1
    for k in range(0, len(log.steps), FRAME_STRIDE):
        if k + FRAME_STRIDE * TRAJ_STEPS >= n_states or k + CTRL_STEPS_10HZ > len(log.steps):
            break
        step = log.steps[k]
        ego = VehicleState(**step["ego"])
        agents = [AgentState(id=a["id"], length=a["length"], width=a["width"],
                             state=VehicleState(x=a["x"], y=a["y"], heading=a["heading"], speed=a["speed"]))
                  for a in step["agents"]]
        tokens = tokenize_scene(SceneSnapshot(ego, agents, scenario.lanes, scenario.nav_command), tokenizer)
        future = executed_future(log, k)
        frames.append({
            "type": "frame",
            "scenario_id": scenario.scenario_id,
            "t": step["t"],
            "tokens": tokens.to_dict(),
            "expert_traj": future.waypoints.tolist(),
            "expert_ctrl_2hz": [log.steps[k + FRAME_STRIDE * i]["diagnostics"]["discrete"] for i in range(TRAJ_STEPS)],
            "expert_ctrl_10hz": [[s["control"]["brake"], s["control"]["throttle"], s["control"]["steer"]]
                                 for s in log.steps[k:k + CTRL_STEPS_10HZ]],
            "nav": scenario.nav_command,
            "ego_pose": [ego.x, ego.y, ego.heading, ego.speed],
            "agents": [a.model_dump() for a in agents],
        })
    return frames


def collect_demos(scenarios: Sequence[Scenario], out_path: Path, expert: ExpertSettings, params: SimParams,
                  tokenizer: TokenizerSettings, config_hash: str = "", seed: int = 0) -> tuple[Path, int]:
    """Run the expert on every scenario and write its 2 Hz frames as JSONL."""
    header = {"type": "header", "config_hash": config_hash, "seed": seed,
              "scenarios": [{"scenario_id": s.scenario_id, **scenario_to_dict(s)} for s in scenarios]}
    records = [header]
    policy = ExpertPolicy(expert, params, seed)
    skipped = 0
    for scenario in tqdm(scenarios, desc="collect", disable=None):
        try:
            log = run_episode(scenario, policy, params, config_hash, scenario.seed)
        except EpisodeError as e:
            logger.warning("skipping %s: %s", scenario.scenario_id, e)
            skipped += 1
            continue
        if not log.outcome["success"]:
            logger.warning("skipping %s: expert did not succeed", scenario.scenario_id)
            skipped += 1
            continue
        records.extend(demo_frames(log, scenario, tokenizer))
    write_jsonl(out_path, records)
    n_frames = len(records) - 1
    logger.info("wrote %d demo frames to %s (%d scenarios skipped)", n_frames, out_path, skipped)
    return Path(out_path), n_frames
