"""
Episode drawings: a static SVG summary of one episode log and an optional
mp4 animation of the ego and agents over time.
"""

import logging
from pathlib import Path
from typing import Optional

import numpy as np

from core.errors import PlannerError
from core.image_utils import CanvasTransform, ImageRenderer, SvgCanvas
from core.schemas import VehicleState
from core.video_utils import EpisodeVideoWriter
from .kinematics import SIM_HZ, VehicleParams
from .simloop import EpisodeLog
from .teachers import box_corners
from .world import from_ego_frame

logger = logging.getLogger(__name__)

LANE_COLOR = (190, 190, 190)
AGENT_COLOR = (90, 90, 200)
EGO_COLOR = (20, 120, 40)
PLAN_COLOR = (240, 140, 0)
PROPOSAL_COLOR = (120, 180, 120)
CHOSEN_COLOR = (220, 30, 30)
AGENT_EVERY = 10          # steps between drawn agent snapshots
VIDEO_STRIDE = 2


def _ego_state(step: dict) -> VehicleState:
    e = step["ego"]
    return VehicleState(x=e["x"], y=e["y"], heading=e["heading"], speed=e["speed"])


def _transform(log: EpisodeLog, size: tuple[int, int]) -> CanvasTransform:
    poses = log.poses()
    points = [poses[:, :2]] if len(poses) else []
    points.append(np.array([log.header["goal"][:2]]))
    for step in log.steps[::AGENT_EVERY]:
        points.extend(np.array([[a["x"], a["y"]]]) for a in step["agents"])
    return CanvasTransform.fit(np.concatenate(points), size)


def _agent_boxes(agents: list[dict]) -> np.ndarray:
    if not agents:
        return np.empty((0, 4, 2))
    a = {k: np.array([ag[k] for ag in agents]) for k in ("x", "y", "heading", "length", "width")}
    return box_corners(a["x"], a["y"], a["heading"], a["length"], a["width"])


def _default_step(log: EpisodeLog) -> Optional[int]:
    planned = [k for k, s in enumerate(log.steps) if "trajectory" in (s.get("diagnostics") or {})]
    return planned[len(planned) // 2] if planned else None


def render_svg(log: EpisodeLog, out_path: Path, step: Optional[int] = None,
               vehicle: VehicleParams = VehicleParams(), size: tuple[int, int] = (800, 800)) -> Path:
    """Lanes, faded agent boxes over time, the ego path and one planning cycle."""
    canvas = SvgCanvas(_transform(log, size))
    lanes = canvas.group("lanes")
    for lane in log.header["lanes"]:
        centerline = np.asarray(lane["centerline"])
        canvas.polyline(lanes, centerline, LANE_COLOR, width=lane["width"] * canvas.transform.scale, opacity=0.5)
        canvas.polyline(lanes, centerline, (255, 255, 255), width=1.0)
    gx, gy, radius = log.header["goal"]
    canvas.circle(lanes, (gx, gy), radius, EGO_COLOR)

    agents = canvas.group("agents")
    snapshots = log.steps[::AGENT_EVERY]
    for k, record in enumerate(snapshots):
        opacity = 0.15 + 0.6 * (k + 1) / len(snapshots)
        for corners in _agent_boxes(record["agents"]):
            canvas.polygon(agents, corners, AGENT_COLOR, opacity, css_class="agent")

    ego = canvas.group("ego")
    poses = log.poses()
    if len(poses):
        canvas.polyline(ego, poses[:, :2], EGO_COLOR, width=2.0, css_class="ego-path")

    step = _default_step(log) if step is None else step
    if step is not None and 0 <= step < len(log.steps):
        record = log.steps[step]
        diag = record.get("diagnostics") or {}
        state = _ego_state(record)
        plan = canvas.group("plan")
        canvas.polygon(plan, box_corners(state.x, state.y, state.heading, vehicle.ego_length, vehicle.ego_width),
                       EGO_COLOR, 0.9, css_class="ego")
        proposals = diag.get("proposals") or []
        chosen = diag.get("i")
        for k, xy in enumerate(proposals):
            world_xy = from_ego_frame(np.asarray(xy), state)
            if k == chosen:
                canvas.polyline(plan, world_xy, CHOSEN_COLOR, width=2.0, css_class="proposal chosen")
            else:
                canvas.polyline(plan, world_xy, PROPOSAL_COLOR, width=1.0, opacity=0.8, css_class="proposal")
        if "trajectory" in diag:
            xy = np.vstack([[0.0, 0.0], np.asarray(diag["trajectory"])[:, :2]])
            color = PLAN_COLOR if proposals else CHOSEN_COLOR
            canvas.polyline(plan, from_ego_frame(xy, state), color, width=2.5, css_class="planned")
        canvas.text(f"{log.scenario_id} step {record['step']} mode {diag.get('mode', log.header.get('policy'))}",
                    (8, 16))

    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(canvas.tostring(), encoding="utf-8")
    except OSError as e:
        raise PlannerError(f"cannot write {out_path}: {e}") from e
    logger.info("wrote %s", out_path)
    return out_path


def render_video(log: EpisodeLog, out_path: Path, vehicle: VehicleParams = VehicleParams(),
                 size: tuple[int, int] = (640, 640)) -> Path:
    if not log.steps:
        raise PlannerError(f"episode {log.scenario_id} has no steps to animate")
    renderer = ImageRenderer(_transform(log, size))
    base = renderer.create_blank_image()
    for lane in log.header["lanes"]:
        renderer.draw_polyline(base, np.asarray(lane["centerline"]), LANE_COLOR,
                               width=max(1, int(lane["width"] * renderer.transform.scale)))
    poses = log.poses()
    with EpisodeVideoWriter(out_path, fps=SIM_HZ // VIDEO_STRIDE) as video:
        for k in range(0, len(log.steps), VIDEO_STRIDE):
            record = log.steps[k]
            frame = base.copy()
            renderer.draw_polyline(frame, poses[: k + 1, :2], EGO_COLOR, width=2)
            renderer.draw_polygons(frame, _agent_boxes(record["agents"]), AGENT_COLOR)
            state = _ego_state(record)
            renderer.draw_polygons(frame, [box_corners(state.x, state.y, state.heading,
                                                       vehicle.ego_length, vehicle.ego_width)], EGO_COLOR)
            diag = record.get("diagnostics") or {}
            if "trajectory" in diag:
                xy = np.vstack([[0.0, 0.0], np.asarray(diag["trajectory"])[:, :2]])
                renderer.draw_polyline(frame, from_ego_frame(xy, state), PLAN_COLOR, width=2)
            renderer.draw_text(frame, f"t={record['t']:.1f}s v={state.speed:.1f}m/s", (8, 8))
            video.add(frame)
    return video.output_path
