import numpy as np
import pytest

from core.schemas import AgentState, Goal, LanePolyline, Scenario, VehicleState
from src.config import RunConfig
from src.diffusion import DiffusionSettings
from src.heads import TrajectoryVocabulary
from src.nn import ArchSettings, stack_tokens
from src.refine import PlannerModel
from src.world import SceneSnapshot, TokenizerSettings, tokenize_scene

TINY_ARCH = ArchSettings(width=6, hidden=5, ctrl_steps=6, dp_hidden=7, time_embed_dim=4)
TINY_DIFFUSION = DiffusionSettings(steps=10, beta_min=1e-3, beta_max=0.2, horizon=20, proposals=3,
                                   ddim_steps=5, sampler="ddim")
TINY_TOKENIZER = TokenizerSettings(max_agents=2, max_lanes=3)


def straight_lane(lane_id: int = 1, length: float = 200.0, y: float = 0.0) -> LanePolyline:
    return LanePolyline(id=lane_id, centerline=[(float(x), y) for x in np.arange(-10.0, length + 1e-9, 2.0)])


def make_scenario(agents=(), speed: float = 5.0, goal_x: float = 60.0, time_limit: float = 20.0) -> Scenario:
    return Scenario(
        lanes=[straight_lane()],
        ego_init=VehicleState(x=0.0, y=0.0, heading=0.0, speed=speed),
        agents=list(agents),
        nav_command="follow",
        expert_route=[1],
        goal=Goal(x=goal_x, y=0.0, radius=4.0),
        time_limit=time_limit,
        seed=0,
        scenario_id="test_straight-seed0",
    )


def straight_anchor(speed: float, lateral: float = 0.0, n: int = 6, dt: float = 0.5) -> np.ndarray:
    t = np.arange(1, n + 1) * dt
    return np.column_stack([speed * t, lateral * t / t[-1], np.zeros(n)])


@pytest.fixture
def scenario() -> Scenario:
    return make_scenario()


@pytest.fixture
def lead_agent() -> AgentState:
    return AgentState(id=7, state=VehicleState(x=20.0, y=0.0, heading=0.0, speed=3.0),
                      behavior="reactive", target_speed=3.0)


@pytest.fixture
def tiny_vocab() -> TrajectoryVocabulary:
    anchors = np.stack([straight_anchor(0.0), straight_anchor(3.0), straight_anchor(6.0, 1.0),
                        straight_anchor(8.0, -1.0)])
    return TrajectoryVocabulary(anchors, dt=0.5, seed=0)


@pytest.fixture
def tiny_model(tiny_vocab) -> PlannerModel:
    return PlannerModel.initialize(tiny_vocab, TINY_ARCH, TINY_DIFFUSION, seed=3)


@pytest.fixture
def scene_tokens(lead_agent):
    lane = straight_lane()
    other = AgentState(id=2, state=VehicleState(x=-8.0, y=3.5, heading=0.1, speed=6.0))
    first = tokenize_scene(SceneSnapshot(VehicleState(x=0.0, y=0.0, speed=5.0), [lead_agent, other], [lane]),
                           TINY_TOKENIZER)
    second = tokenize_scene(SceneSnapshot(VehicleState(x=30.0, y=0.5, heading=0.05, speed=2.0), [], [lane],
                                          "left"), TINY_TOKENIZER)
    return [first, second]


@pytest.fixture
def token_batch(scene_tokens):
    return stack_tokens(scene_tokens)


def make_small_config(root) -> RunConfig:
    """Tiny network and two demo scenarios with every output under ``root``."""
    data = RunConfig.default().model_dump()
    data["model"].update(width=6, hidden=5, dp_hidden=7, time_embed_dim=4, max_agents=2, max_lanes=3)
    data["diffusion"] = TINY_DIFFUSION.model_dump()
    data["vocab"].update(size=4, iterations=5)
    data["train"].update(epochs=2, batch_size=16, lr=1e-3, holdout_every=2)
    data["collect"].update(per_family=1, families=["emergency_brake", "free_cruise"])
    data["paths"] = {
        "vocab": root / "vocab.json",
        "demos": root / "demos.jsonl",
        "checkpoint": root / "model.ckpt",
        "episodes": root / "episodes",
        "reports": root / "reports",
    }
    data["output_dir"] = root
    return RunConfig.model_validate(data)


@pytest.fixture
def small_config(tmp_path) -> RunConfig:
    return make_small_config(tmp_path)
