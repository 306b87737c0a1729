"""
╔══════════════════════════════════════════════════════════════════════════════╗
║                          BUNDLED SCENARIO SUITE                              ║
║                                                                              ║
║  Five families (free cruise, emergency brake, merge, give way, overtake)    ║
║  with seeded parameter draws. Evaluation uses seeds 0-3; demo collection    ║
║  uses a disjoint seed range.                                                ║
╚══════════════════════════════════════════════════════════════════════════════╝
"""

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from core.schemas import AgentState, Goal, LanePolyline, Scenario, VehicleState
from .world import validate_scenario

FAMILIES = ("free_cruise", "emergency_brake", "merge", "give_way", "overtake")
EVAL_SEEDS = (0, 1, 2, 3)
DEMO_SEED_OFFSET = 1000
LANE_SPACING = 2.0


# ══════════════════════════════════════════════════════════════════════════
#  LANE SHAPES
# ══════════════════════════════════════════════════════════════════════════

def _straight(x0: float, x1: float, y: float = 0.0) -> list[tuple[float, float]]:
    xs = np.arange(x0, x1 + 1e-9, LANE_SPACING)
    return [(float(x), y) for x in xs]


def _curve(lead_in: float, radius: float, angle: float, lead_out: float, sign: int) -> list[tuple[float, float]]:
    """Straight, circular arc turning ``sign`` (+1 left), straight."""
    points = [(float(x), 0.0) for x in np.arange(0.0, lead_in + 1e-9, LANE_SPACING)]
    n_arc = max(2, int(radius * angle / LANE_SPACING))
    for k in range(1, n_arc + 1):
        phi = angle * k / n_arc
        points.append((lead_in + radius * math.sin(phi), sign * radius * (1.0 - math.cos(phi))))
    end_x, end_y = points[-1]
    heading = sign * angle
    for s in np.arange(LANE_SPACING, lead_out + 1e-9, LANE_SPACING):
        points.append((end_x + s * math.cos(heading), end_y + s * math.sin(heading)))
    return [(float(x), float(y)) for x, y in points]


def _shift(x: np.ndarray, x0: float, x1: float, y0: float, y1: float) -> np.ndarray:
    """Cosine blend from y0 at x0 to y1 at x1."""
    u = np.clip((x - x0) / (x1 - x0), 0.0, 1.0)
    return y0 + (y1 - y0) * (1.0 - np.cos(math.pi * u)) / 2.0


def _pose_on(points: Sequence[tuple[float, float]], index: int, speed: float) -> VehicleState:
    (x0, y0), (x1, y1) = points[index], points[index + 1]
    return VehicleState(x=x0, y=y0, heading=math.atan2(y1 - y0, x1 - x0), speed=speed)


# ══════════════════════════════════════════════════════════════════════════
#  FAMILIES
# ══════════════════════════════════════════════════════════════════════════

def free_cruise(rng: np.random.Generator) -> dict:
    radius = rng.uniform(80.0, 150.0)
    sign = int(rng.choice([-1, 1]))
    centerline = _curve(40.0, radius, rng.uniform(0.4, 0.7), 120.0, sign)
    lane = LanePolyline(id=1, centerline=centerline)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(np.array(centerline), axis=0).T))])
    gx, gy = centerline[int(np.searchsorted(cum, rng.uniform(140.0, 170.0)))]
    return dict(lanes=[lane], ego_init=_pose_on(centerline, 0, rng.uniform(5.0, 8.0)), agents=[],
                nav_command="follow", expert_route=[1], goal=Goal(x=gx, y=gy, radius=4.0), time_limit=30.0)


def emergency_brake(rng: np.random.Generator) -> dict:
    lane = LanePolyline(id=1, centerline=_straight(-10.0, 260.0))
    t_brake = rng.uniform(2.0, 5.0)
    lead = AgentState(
        id=1, state=VehicleState(x=rng.uniform(20.0, 30.0), y=0.0, heading=0.0, speed=8.0),
        behavior="reactive", target_speed=8.0, speed_profile=[(t_brake, 0.0), (t_brake + 3.0, 8.0)],
    )
    return dict(lanes=[lane], ego_init=VehicleState(x=0.0, y=0.0, heading=0.0, speed=8.0), agents=[lead],
                nav_command="follow", expert_route=[1], goal=Goal(x=rng.uniform(150.0, 170.0), y=0.0, radius=4.0),
                time_limit=35.0)


def merge(rng: np.random.Generator) -> dict:
    xs = np.arange(-30.0, 10.0 + 1e-9, LANE_SPACING)
    ramp = LanePolyline(id=1, centerline=[(float(x), float(y)) for x, y in zip(xs, _shift(xs, -30.0, 10.0, -6.0, 0.0))])
    main = LanePolyline(id=2, centerline=_straight(-70.0, 260.0))
    ahead = AgentState(id=1, state=VehicleState(x=rng.uniform(15.0, 25.0), y=0.0, heading=0.0, speed=7.0),
                       behavior="reactive", target_speed=7.0)
    behind = AgentState(id=2, state=VehicleState(x=-30.0 - rng.uniform(12.0, 16.0), y=0.0, heading=0.0, speed=7.0),
                        behavior="reactive", target_speed=7.0)
    return dict(lanes=[ramp, main], ego_init=_pose_on(ramp.centerline, 0, rng.uniform(6.0, 7.5)),
                agents=[ahead, behind], nav_command="follow", expert_route=[1, 2],
                goal=Goal(x=rng.uniform(140.0, 160.0), y=0.0, radius=4.0), time_limit=35.0)


def give_way(rng: np.random.Generator) -> dict:
    main = LanePolyline(id=1, centerline=_straight(-10.0, 260.0))
    crossing = LanePolyline(id=2, centerline=[(40.0, float(y)) for y in np.arange(-80.0, 80.0 + 1e-9, LANE_SPACING)])
    speed = rng.uniform(5.0, 7.0)
    first = rng.uniform(25.0, 35.0)
    agents = [
        AgentState(id=k + 1, state=VehicleState(x=40.0, y=-(first + 12.0 * k), heading=math.pi / 2, speed=speed),
                   behavior="non-reactive", target_speed=speed)
        for k in range(int(rng.integers(1, 3)) + 1)
    ]
    return dict(lanes=[main, crossing], ego_init=VehicleState(x=0.0, y=0.0, heading=0.0, speed=rng.uniform(6.0, 8.0)),
                agents=agents, nav_command="straight", expert_route=[1],
                goal=Goal(x=rng.uniform(140.0, 160.0), y=0.0, radius=4.0), time_limit=35.0)


def overtake(rng: np.random.Generator) -> dict:
    main = LanePolyline(id=1, centerline=_straight(-10.0, 300.0))
    left = LanePolyline(id=2, centerline=_straight(-10.0, 300.0, 3.5))
    xs = np.arange(-10.0, 300.0 + 1e-9, LANE_SPACING)
    ys = _shift(xs, 10.0, 30.0, 0.0, 3.5) - _shift(xs, 120.0, 140.0, 0.0, 3.5)
    path = LanePolyline(id=3, centerline=[(float(x), float(y)) for x, y in zip(xs, ys)])
    speed = rng.uniform(2.5, 4.0)
    lead = AgentState(id=1, state=VehicleState(x=rng.uniform(30.0, 40.0), y=0.0, heading=0.0, speed=speed),
                      behavior="non-reactive", target_speed=speed)
    return dict(lanes=[main, left, path], ego_init=VehicleState(x=0.0, y=0.0, heading=0.0, speed=rng.uniform(6.0, 8.0)),
                agents=[lead], nav_command="left", expert_route=[3],
                goal=Goal(x=rng.uniform(190.0, 210.0), y=0.0, radius=4.0), time_limit=35.0)


BUILDERS: dict[str, Callable[[np.random.Generator], dict]] = {
    "free_cruise": free_cruise,
    "emergency_brake": emergency_brake,
    "merge": merge,
    "give_way": give_way,
    "overtake": overtake,
}


def build_scenario(family: str, seed: int) -> Scenario:
    if family not in BUILDERS:
        raise ValueError(f"unknown scenario family '{family}'")
    rng = np.random.default_rng([FAMILIES.index(family), seed])
    scenario = Scenario(**BUILDERS[family](rng), seed=seed, scenario_id=f"{family}-seed{seed}")
    violations = validate_scenario(scenario)
    if violations:
        raise ValueError(f"{scenario.scenario_id}: {violations[0]}")
    return scenario


def bundled_suite(seeds: Iterable[int] = EVAL_SEEDS, families: Sequence[str] = FAMILIES) -> list[Scenario]:
    return [build_scenario(family, seed) for family in families for seed in seeds]


def demo_suite(per_family: int, families: Sequence[str] = FAMILIES) -> list[Scenario]:
    return bundled_suite(range(DEMO_SEED_OFFSET, DEMO_SEED_OFFSET + per_family), families)
