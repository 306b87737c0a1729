"""
╔══════════════════════════════════════════════════════════════════════════════╗
║                     TRAJECTORY REFINEMENT AND ENSEMBLING                     ║
║                                                                              ║
║  Rolls control proposals out through the bicycle model, picks the ones      ║
║  nearest to the trajectory branch and to the control branch, and votes the  ║
║  candidates into one final control. Also hosts the per-step planner.        ║
╚══════════════════════════════════════════════════════════════════════════════╝
"""

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core.base_policy import BasePolicy
from core.errors import TrajectoryError
from core.schemas import ControlTuple, VehicleState
from .diffusion import (
    DiffusionSchedule, DiffusionSettings, Sampler, decode_proposal, dp_param_specs, sample_proposals, schedule_from,
)
from .heads import (
    MetricWeights, TrajectoryVocabulary, ctrl_forward, ctrl_param_specs, decode_controls,
    select_trajectory, traj_forward, traj_param_specs,
)
from .kinematics import ControlSequence, PidGains, Trajectory, VehicleParams, pid_control, resample, rollout
from .nn import ArchSettings, ParamSpecs, ParamStore, stack_tokens
from .world import SceneSnapshot, SceneTokens, TokenizerSettings, tokenize_scene

logger = logging.getLogger(__name__)

MATCH_HZ = 2
PlannerMode = Literal["traj", "traj+ctrl", "full", "expert", "ctrl", "dp-rand", "dp-traj"]
LEARNED_MODES = ("traj", "traj+ctrl", "full", "ctrl", "dp-rand", "dp-traj")


class PlannerSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: PlannerMode = "full"
    tau: int = Field(default=2, ge=1, le=4)
    tau_pair: int = Field(default=1, ge=1, le=2)
    postprocess: bool = True
    turn_steer: float = Field(default=0.4, ge=0, le=1)
    turn_throttle: float = Field(default=0.5, ge=0, le=1)
    weights: MetricWeights = MetricWeights()
    pid: PidGains = PidGains()


# ═══════════════════════════════════════════════════════════════════════════
#  MATCHING
# ═══════════════════════════════════════════════════════════════════════════

def l2_distance(a: Trajectory, b: Trajectory) -> float:
    """Mean Euclidean distance over the common prefix of two equally timed trajectories."""
    if not np.isclose(a.dt, b.dt, rtol=1e-12, atol=0.0):
        raise TrajectoryError(f"trajectories are timed differently ({a.dt} s vs {b.dt} s)")
    n = min(len(a), len(b))
    if n < 1:
        raise TrajectoryError("no common horizon")
    return float(np.linalg.norm(a.xy[:n] - b.xy[:n], axis=1).mean())


def match_distance(a: Trajectory, b: Trajectory, hz: float = MATCH_HZ) -> float:
    return l2_distance(resample(a, hz), resample(b, hz))


@dataclass(frozen=True)
class Candidate:
    control: ControlTuple
    source: str


@dataclass(frozen=True)
class CandidateSet:
    """Controls voted on by the ensemble, with their provenance."""
    candidates: tuple[Candidate, ...]
    traj_index: Optional[int] = None
    ctrl_index: Optional[int] = None
    traj_distances: tuple[float, ...] = ()
    ctrl_distances: tuple[float, ...] = ()
    rollouts: tuple[Trajectory, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if len(self.candidates) not in (2, 4):
            raise ValueError(f"candidate set must hold 2 or 4 controls, got {len(self.candidates)}")

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def controls(self) -> list[ControlTuple]:
        return [c.control for c in self.candidates]


def nearest_neighbor_match(traj: Trajectory, ctrl_seq: ControlSequence, proposals: Sequence[ControlSequence],
                           state: VehicleState, vehicle: VehicleParams, gains: PidGains) -> CandidateSet:
    """Four candidates: PID(T), the first discrete control, and the first controls of the
    proposals nearest to T and to the control branch's own rollout (ties: lowest index)."""
    if not proposals:
        raise ValueError("need at least one proposal")
    ctrl_traj = rollout(ctrl_seq, state, vehicle)
    rollouts = tuple(rollout(p, state, vehicle) for p in proposals)
    to_traj = np.array([match_distance(r, traj) for r in rollouts])
    to_ctrl = np.array([match_distance(r, ctrl_traj) for r in rollouts])
    i, j = int(np.argmin(to_traj)), int(np.argmin(to_ctrl))
    candidates = (
        Candidate(pid_control(traj, state, gains, vehicle), "pid"),
        Candidate(ctrl_seq.first, "ctrl"),
        Candidate(proposals[i].first, "dp_traj"),
        Candidate(proposals[j].first, "dp_ctrl"),
    )
    return CandidateSet(candidates, i, j, tuple(to_traj.tolist()), tuple(to_ctrl.tolist()), rollouts)


def ensemble(candidates: CandidateSet, tau: int) -> ControlTuple:
    """Mean throttle and steer; brake iff at least ``tau`` candidates brake."""
    if not 1 <= tau <= len(candidates):
        raise ValueError(f"tau must be in [1, {len(candidates)}], got {tau}")
    controls = candidates.controls
    brake = int(sum(c.brake for c in controls) >= tau)
    throttle = 0.0 if brake else sum(c.throttle for c in controls) / len(controls)
    steer = sum(c.steer for c in controls) / len(controls)
    return ControlTuple(brake=brake, throttle=throttle, steer=steer)


def postprocess(control: ControlTuple, enabled: bool, settings: PlannerSettings) -> ControlTuple:
    """Cap the throttle during sharp turns."""
    if enabled and abs(control.steer) > settings.turn_steer and control.throttle > settings.turn_throttle:
        return control.model_copy(update={"throttle": settings.turn_throttle})
    return control


# ═══════════════════════════════════════════════════════════════════════════
#  MODEL BUNDLE
# ═══════════════════════════════════════════════════════════════════════════

def model_param_specs(arch: ArchSettings, anchor_dim: int, horizon: int) -> ParamSpecs:
    return {**traj_param_specs(arch, anchor_dim), **ctrl_param_specs(arch), **dp_param_specs(arch, horizon)}


@dataclass
class PlannerModel:
    """Everything plan_step needs: parameters, vocabulary and diffusion setup."""
    params: ParamStore
    vocab: TrajectoryVocabulary
    arch: ArchSettings
    diffusion: DiffusionSettings
    schedule: DiffusionSchedule = None

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = schedule_from(self.diffusion)
        self.params.check(model_param_specs(self.arch, self.vocab.anchor_dim, self.diffusion.horizon))

    @classmethod
    def initialize(cls, vocab: TrajectoryVocabulary, arch: ArchSettings, diffusion: DiffusionSettings,
                   seed: int) -> "PlannerModel":
        specs = model_param_specs(arch, vocab.anchor_dim, diffusion.horizon)
        return cls(ParamStore.initialize(specs, np.random.default_rng(seed)), vocab, arch, diffusion)


# ═══════════════════════════════════════════════════════════════════════════
#  PLANNING
# ═══════════════════════════════════════════════════════════════════════════

def _control_dict(c: ControlTuple) -> dict:
    return {"brake": c.brake, "throttle": c.throttle, "steer": c.steer}


def plan_step(model: PlannerModel, tokens: SceneTokens, state: VehicleState, settings: PlannerSettings,
              vehicle: VehicleParams, rng: np.random.Generator,
              sampler: Optional[Sampler] = None) -> tuple[ControlTuple, dict]:
    """One planning cycle; returns the final control and its diagnostics."""
    mode = settings.mode
    if mode not in LEARNED_MODES:
        raise ValueError(f"plan_step does not handle mode '{mode}'")
    batch = stack_tokens([tokens])
    diag: dict = {"mode": mode}

    traj = None
    if mode in ("traj", "traj+ctrl", "full", "dp-traj"):
        out = traj_forward(model.params, batch, model.vocab)
        traj, anchor = select_trajectory(out, settings.weights, model.vocab)
        diag["anchor"] = anchor
        diag["trajectory"] = traj.waypoints.tolist()

    ctrl_seq = None
    if mode in ("ctrl", "traj+ctrl", "full"):
        ctrl_seq = decode_controls(ctrl_forward(model.params, batch))
        diag["ctrl_seq"] = [_control_dict(c) for c in ctrl_seq.controls]

    proposals: list[ControlSequence] = []
    if mode in ("full", "dp-rand", "dp-traj"):
        raw = sample_proposals(model.params, batch, model.diffusion, model.schedule, rng, sampler)
        proposals = [decode_proposal(x) for x in raw]

    if mode == "traj":
        control = pid_control(traj, state, settings.pid, vehicle)
    elif mode == "ctrl":
        control = ctrl_seq.first
    elif mode == "traj+ctrl":
        cset = CandidateSet((Candidate(pid_control(traj, state, settings.pid, vehicle), "pid"),
                             Candidate(ctrl_seq.first, "ctrl")))
        diag["candidates"] = [{"source": c.source, **_control_dict(c.control)} for c in cset.candidates]
        control = ensemble(cset, settings.tau_pair)
    elif mode == "full":
        cset = nearest_neighbor_match(traj, ctrl_seq, proposals, state, vehicle, settings.pid)
        diag["candidates"] = [{"source": c.source, **_control_dict(c.control)} for c in cset.candidates]
        diag["i"], diag["j"] = cset.traj_index, cset.ctrl_index
        diag["dist_traj"] = list(cset.traj_distances)
        diag["dist_ctrl"] = list(cset.ctrl_distances)
        diag["proposals"] = [resample(r, MATCH_HZ).xy.tolist() for r in cset.rollouts]
        control = ensemble(cset, settings.tau)
    elif mode == "dp-rand":
        k = int(rng.integers(len(proposals)))
        diag["i"] = k
        control = proposals[k].first
    else:
        rollouts = [rollout(p, state, vehicle) for p in proposals]
        distances = [match_distance(r, traj) for r in rollouts]
        k = int(np.argmin(distances))
        diag["i"], diag["dist_traj"] = k, distances
        diag["proposals"] = [resample(r, MATCH_HZ).xy.tolist() for r in rollouts]
        control = proposals[k].first

    control = postprocess(control, settings.postprocess, settings)
    diag["control"] = _control_dict(control)
    logger.debug("plan_step %s -> %s", mode, diag["control"])
    return control, diag


class Planner(BasePolicy):
    """Learned policy driving the ego from fresh scene tokens every step."""

    def __init__(self, model: PlannerModel, settings: PlannerSettings, tokenizer: TokenizerSettings,
                 vehicle: VehicleParams, seed: int = 0, sampler: Optional[Sampler] = None):
        super().__init__(seed)
        self.model = model
        self.settings = settings
        self.tokenizer = tokenizer
        self.vehicle = vehicle
        self.sampler = sampler
        self.name = settings.mode

    def act(self, world, scenario) -> tuple[ControlTuple, dict]:
        snapshot = SceneSnapshot(world.ego, world.agents, scenario.lanes, scenario.nav_command)
        tokens = tokenize_scene(snapshot, self.tokenizer)
        return plan_step(self.model, tokens, world.ego, self.settings, self.vehicle, self.rng, self.sampler)
