import math

import numpy as np
import pytest

from core.errors import TrajectoryError
from core.schemas import ControlTuple, VehicleState
from src.kinematics import (
    ControlSequence, PidGains, Trajectory, VehicleParams, actuation_map, bicycle_step, expand_to_10hz,
    pid_control, relative_trajectory, resample, rollout,
)
from tests.conftest import straight_anchor

PARAMS = VehicleParams()


def _fit_circle_radius(xy: np.ndarray) -> float:
    A = np.column_stack([xy[:, 0], xy[:, 1], np.ones(len(xy))])
    rhs = -(xy ** 2).sum(axis=1)
    (d, e, f), *_ = np.linalg.lstsq(A, rhs, rcond=None)
    return math.sqrt(d * d / 4 + e * e / 4 - f)


def test_actuation_map_brake_and_throttle():
    assert actuation_map(ControlTuple(brake=1, throttle=1.0), 5.0, PARAMS) == (-PARAMS.brake_decel, 0.0)
    accel, steer = actuation_map(ControlTuple(throttle=0.5, steer=-1.0), 4.0, PARAMS)
    assert accel == pytest.approx(PARAMS.max_accel * 0.5 - PARAMS.drag_coeff * 4.0)
    assert steer == pytest.approx(-PARAMS.max_steer_angle)


def test_straight_line_has_no_lateral_error():
    state = VehicleState(x=0.0, y=0.0, heading=0.0, speed=6.0)
    for _ in range(100):
        state = bicycle_step(state, ControlTuple(throttle=0.4), 0.1, PARAMS)
    assert abs(state.y) < 1e-9
    assert abs(state.heading) < 1e-9


def test_constant_steer_traces_circle():
    steer = 0.3
    speed = 5.0
    throttle = PARAMS.drag_coeff * speed / PARAMS.max_accel
    state = VehicleState(x=0.0, y=0.0, speed=speed)
    points = []
    for _ in range(200):
        state = bicycle_step(state, ControlTuple(throttle=throttle, steer=steer), 0.1, PARAMS)
        points.append((state.x, state.y))
    expected = PARAMS.wheelbase / math.tan(PARAMS.max_steer_angle * steer)
    assert _fit_circle_radius(np.array(points)) == pytest.approx(expected, rel=0.01)


def test_speed_never_negative():
    state = VehicleState(x=0.0, y=0.0, speed=1.0)
    for _ in range(20):
        state = bicycle_step(state, ControlTuple(brake=1), 0.1, PARAMS)
    assert state.speed == 0.0


def test_large_dt_is_substepped():
    state = VehicleState(x=0.0, y=0.0, speed=5.0)
    control = ControlTuple(throttle=0.3, steer=0.2)
    once = bicycle_step(state, control, 0.5, PARAMS)
    stepped = state
    for _ in range(5):
        stepped = bicycle_step(stepped, control, 0.1, PARAMS)
    assert once.x == pytest.approx(stepped.x, abs=1e-12)
    assert once.heading == pytest.approx(stepped.heading, abs=1e-12)


def test_2hz_rollout_matches_expanded_10hz():
    controls = tuple(ControlTuple(throttle=0.2 * k, steer=0.1 * (k - 2)) for k in range(5))
    seq = ControlSequence(controls, 2)
    state = VehicleState(x=10.0, y=-3.0, heading=1.0, speed=4.0)
    a, b = rollout(seq, state, PARAMS), rollout(expand_to_10hz(seq), state, PARAMS)
    assert len(a) == 25
    np.testing.assert_allclose(a.waypoints, b.waypoints)


def test_rollout_is_in_ego_frame():
    seq = ControlSequence((ControlTuple(),) * 10, 10)
    traj = rollout(seq, VehicleState(x=50.0, y=20.0, heading=2.0, speed=3.0), PARAMS)
    assert traj.waypoints[0, 0] == pytest.approx(0.3)
    assert np.all(np.abs(traj.waypoints[:, 1]) < 1e-12)


def test_resample_down_picks_matching_waypoints():
    seq = ControlSequence((ControlTuple(throttle=0.5, steer=0.3),) * 30, 10)
    dense = rollout(seq, VehicleState(x=0.0, y=0.0, speed=4.0), PARAMS)
    coarse = resample(dense, 2)
    assert len(coarse) == 6
    assert coarse.dt == 0.5
    np.testing.assert_allclose(coarse.waypoints, dense.waypoints[4::5], atol=1e-12)


def test_resample_up_interpolates_from_origin():
    traj = Trajectory(straight_anchor(4.0), 0.5)
    dense = resample(traj, 10)
    assert len(dense) == 30
    np.testing.assert_allclose(dense.xy[:, 0], 0.4 * np.arange(1, 31), atol=1e-12)


def test_resample_rejects_bad_requests():
    with pytest.raises(TrajectoryError):
        resample(Trajectory(np.zeros((1, 3)), 0.5), 10)
    with pytest.raises(TrajectoryError):
        resample(Trajectory(np.zeros((2, 3)), 0.1), 2)


def test_pid_tracks_straight_trajectory():
    traj = Trajectory(straight_anchor(5.0), 0.5)
    control = pid_control(traj, VehicleState(x=0.0, y=0.0, speed=5.0), PidGains(), PARAMS)
    assert control.brake == 0
    assert control.steer == pytest.approx(0.0, abs=1e-12)
    assert control.throttle == pytest.approx(PARAMS.drag_coeff * 5.0 / PARAMS.max_accel)


def test_pid_brakes_for_stationary_trajectory():
    traj = Trajectory(np.zeros((6, 3)), 0.5)
    control = pid_control(traj, VehicleState(x=0.0, y=0.0, speed=6.0), PidGains(), PARAMS)
    assert control.brake == 1
    assert control.throttle == 0.0


def test_pid_steers_toward_left_curve():
    t = np.arange(1, 7) * 0.5
    traj = Trajectory(np.column_stack([4.0 * t, 0.3 * t ** 2, np.zeros(6)]), 0.5)
    control = pid_control(traj, VehicleState(x=0.0, y=0.0, speed=4.0), PidGains(), PARAMS)
    assert control.steer > 0


@pytest.mark.parametrize("controls", [
    [ControlTuple(throttle=0.2)] * 6,
    [ControlTuple(throttle=0.2, steer=0.1)] * 6,
    [ControlTuple(throttle=0.17, steer=s) for s in (0.08, 0.08, -0.08, -0.08, 0.0, 0.0)],
], ids=["straight", "left-arc", "lane-change"])
def test_pid_closed_loop_reaches_kb_endpoint(controls):
    start = VehicleState(x=0.0, y=0.0, heading=0.0, speed=5.0)
    reference = rollout(ControlSequence(tuple(controls), 2), start, PARAMS)
    assert len(reference) == 30

    state = start
    for k in range(len(reference)):
        ahead = relative_trajectory(reference.waypoints[k:], state, reference.dt)
        state = bicycle_step(state, pid_control(ahead, state, PidGains(), PARAMS), reference.dt, PARAMS)
    end = reference.waypoints[-1]
    assert math.hypot(state.x - end[0], state.y - end[1]) < 0.5


def test_control_sequence_frequency_checked():
    with pytest.raises(ValueError):
        ControlSequence((ControlTuple(),), 5)
