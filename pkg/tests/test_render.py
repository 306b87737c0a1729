import xml.etree.ElementTree as ET

import pytest
from PIL import Image

from core.errors import PlannerError
from core.video_utils import EpisodeVideoWriter
from src.kinematics import VehicleParams
from src.refine import Planner, PlannerSettings
from src.render import render_svg, render_video
from src.simloop import ExpertPolicy, ExpertSettings, SimParams, run_episode
from tests.conftest import TINY_DIFFUSION, TINY_TOKENIZER, make_scenario

PARAMS = SimParams()


def _classes(path) -> list[str]:
    root = ET.fromstring(path.read_text())
    return [el.get("class") for el in root.iter() if el.get("class")]


@pytest.fixture
def planner_log(tiny_model, lead_agent):
    planner = Planner(tiny_model, PlannerSettings(mode="full"), TINY_TOKENIZER, VehicleParams(), seed=0)
    return run_episode(make_scenario([lead_agent], time_limit=1.0), planner, PARAMS)


def test_full_mode_drawing(tmp_path, planner_log):
    path = render_svg(planner_log, tmp_path / "full.svg")
    classes = _classes(path)
    assert classes.count("proposal") + classes.count("proposal chosen") == TINY_DIFFUSION.proposals
    assert classes.count("proposal chosen") == 1
    assert classes.count("planned") == 1
    assert classes.count("ego") == 2          # group and box
    assert classes.count("agent") == len(planner_log.steps[::10])


def test_explicit_step(tmp_path, planner_log):
    path = render_svg(planner_log, tmp_path / "step0.svg", step=0)
    root = ET.fromstring(path.read_text())
    labels = [el.text for el in root.iter() if el.text and "step" in el.text]
    assert labels == ["test_straight-seed0 step 0 mode full"]


def test_expert_without_agents_draws_lanes_and_path(tmp_path, scenario):
    log = run_episode(scenario, ExpertPolicy(ExpertSettings(), PARAMS), PARAMS)
    classes = _classes(render_svg(log, tmp_path / "expert.svg"))
    assert "agent" not in classes
    assert "plan" not in classes and "proposal" not in classes
    assert classes.count("ego-path") == 1
    assert "lanes" in classes


def test_unwritable_output(tmp_path, planner_log):
    with pytest.raises(PlannerError, match="cannot write"):
        render_svg(planner_log, tmp_path)


def test_video_needs_steps(tmp_path, scenario):
    log = run_episode(scenario.model_copy(update={"time_limit": 0.05}), ExpertPolicy(ExpertSettings(), PARAMS),
                      PARAMS)
    log.steps.clear()
    with pytest.raises(PlannerError, match="no steps"):
        render_video(log, tmp_path / "empty.mp4")


def test_video(tmp_path, planner_log):
    pytest.importorskip("cv2")
    path = render_video(planner_log, tmp_path / "episode.mp4")
    assert path.exists() and path.stat().st_size > 0


def test_video_writer_holds_last_frame(tmp_path):
    cv2 = pytest.importorskip("cv2")
    with EpisodeVideoWriter(tmp_path / "hold.avi", fps=4, hold_seconds=0.5) as video:
        video.add(Image.new("RGB", (64, 48), (255, 0, 0)))
        video.add(Image.new("RGB", (32, 32), (0, 0, 255)))
    assert video.output_path.suffix == ".mp4"
    assert video.frame_count == 2 and video.hold_frames == 2
    capture = cv2.VideoCapture(str(video.output_path))
    frames = 0
    while capture.read()[0]:
        frames += 1
    assert frames == 4
    capture.release()


def test_video_writer_without_frames(tmp_path):
    pytest.importorskip("cv2")
    with pytest.raises(PlannerError, match="no frames"):
        EpisodeVideoWriter(tmp_path / "none.mp4").close()
