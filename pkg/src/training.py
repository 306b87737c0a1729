"""
Demo datasets, joint training of the three heads, open-loop evaluation and
the closed-loop job runner used by the suite command.
"""

import functools
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from tqdm import tqdm

from core.errors import CheckpointError, EpisodeError, NonFiniteError, PlannerError, ShapeError
from core.output_writer import read_jsonl, write_csv
from core.schemas import AgentState, Scenario, VehicleState
from .config import RunConfig
from .diffusion import dp_loss_and_grad
from .heads import (
    TrajectoryVocabulary, build_vocabulary, ctrl_forward, ctrl_backward, ctrl_loss_and_grad,
    decode_discrete, load_vocabulary, select_trajectory, traj_backward, traj_forward, traj_loss_and_grad,
)
from .kinematics import Trajectory
from .nn import ParamStore, cosine_lr, load_checkpoint, optimizer_step, save_checkpoint, stack_tokens
from .refine import Planner, PlannerModel, l2_distance
from .simloop import EpisodeLog, ExpertPolicy, run_episode
from .teachers import MetricScores, label_vocabulary, labeling_frame
from .world import SceneTokens, route_polyline, scenario_from_dict

logger = logging.getLogger(__name__)

TRAJ_DT = 0.5


# ══════════════════════════════════════════════════════════════════════════════
#  DATASET
# ══════════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class DemoFrame:
    scenario_id: str
    t: float
    tokens: SceneTokens
    expert_traj: Trajectory
    ctrl_2hz: np.ndarray      # (t_ctrl, 3) class indices
    ctrl_10hz: np.ndarray     # (t_dp, 3) continuous controls
    nav: str
    ego: VehicleState
    agents: tuple[AgentState, ...]

    @property
    def family(self) -> str:
        return self.scenario_id.rsplit("-", 1)[0]

    def normalized_controls(self) -> np.ndarray:
        c = self.ctrl_10hz
        return np.column_stack([2.0 * c[:, 0] - 1.0, 2.0 * c[:, 1] - 1.0, c[:, 2]])


@dataclass
class DemoDataset:
    scenarios: dict[str, Scenario]
    frames: list[DemoFrame]
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.frames)

    def split(self, holdout_every: int) -> tuple[list[DemoFrame], list[DemoFrame]]:
        """Hold out every ``holdout_every``-th scenario (sorted by id)."""
        ids = sorted({f.scenario_id for f in self.frames})
        held = {sid for i, sid in enumerate(ids) if i % holdout_every == holdout_every - 1}
        return ([f for f in self.frames if f.scenario_id not in held],
                [f for f in self.frames if f.scenario_id in held])


def _frame_from_record(record: dict) -> DemoFrame:
    x, y, heading, speed = record["ego_pose"]
    return DemoFrame(
        scenario_id=record["scenario_id"],
        t=record["t"],
        tokens=SceneTokens.from_dict(record["tokens"]),
        expert_traj=Trajectory(np.asarray(record["expert_traj"]), TRAJ_DT),
        ctrl_2hz=np.asarray(record["expert_ctrl_2hz"], dtype=np.int64),
        ctrl_10hz=np.asarray(record["expert_ctrl_10hz"], dtype=np.float64),
        nav=record["nav"],
        ego=VehicleState(x=x, y=y, heading=heading, speed=speed),
        agents=tuple(AgentState.model_validate(a) for a in record["agents"]),
    )


def load_demos(path: Path) -> DemoDataset:
    path = Path(path)
    if not path.exists():
        raise PlannerError(f"demo dataset {path} does not exist")
    records = iter(read_jsonl(path))
    header = next(records, None)
    if header is None or header.get("type") != "header":
        raise PlannerError(f"{path}: demo file must start with a header record")
    scenarios = {}
    for entry in header["scenarios"]:
        entry = dict(entry)
        sid = entry.pop("scenario_id")
        scenarios[sid] = scenario_from_dict(entry, sid)
    frames = [_frame_from_record(r) for r in records if r.get("type") == "frame"]
    logger.info("loaded %d demo frames from %d scenarios", len(frames), len(scenarios))
    return DemoDataset(scenarios, frames, header.get("config_hash", ""))


def vocabulary_from_demos(dataset: DemoDataset, config: RunConfig) -> TrajectoryVocabulary:
    trajs = [f.expert_traj for f in dataset.frames]
    return build_vocabulary(trajs, config.vocab.size, config.seed, config.vocab.iterations)


def label_frames(frames: Sequence[DemoFrame], dataset: DemoDataset, vocab: TrajectoryVocabulary,
                 config: RunConfig) -> list[MetricScores]:
    """Teacher labels for every frame from the privileged scene context."""
    routes = {sid: route_polyline(s) for sid, s in dataset.scenarios.items()}
    labels = []
    for frame in tqdm(frames, desc="labels", disable=None):
        scenario = dataset.scenarios[frame.scenario_id]
        lf = labeling_frame(frame.ego, frame.agents, scenario.lanes, routes[frame.scenario_id])
        labels.append(label_vocabulary(vocab, lf, frame.expert_traj, config.teachers, config.vehicle))
    return labels


# ══════════════════════════════════════════════════════════════════════════════
#  TRAINING
# ══════════════════════════════════════════════════════════════════════════════

@dataclass
class BatchLoss:
    traj: float
    ctrl: float
    dp: float

    @property
    def total(self) -> float:
        return self.traj + self.ctrl + self.dp


def batch_loss(model: PlannerModel, frames: Sequence[DemoFrame], labels: Sequence[MetricScores],
               rng: np.random.Generator, gamma: float, with_grads: bool = True):
    """Summed loss L_traj + L_ctrl + L_dp of one batch and its parameter gradients."""
    params = model.params
    batch = stack_tokens([f.tokens for f in frames])

    traj_out = traj_forward(params, batch, model.vocab)
    traj_loss, d_traj = traj_loss_and_grad(traj_out, list(labels))
    ctrl_out = ctrl_forward(params, batch)
    ctrl_loss, d_ctrl = ctrl_loss_and_grad(ctrl_out, np.stack([f.ctrl_2hz for f in frames]), gamma)
    x0 = np.stack([f.normalized_controls() for f in frames])
    dp_loss, grads = dp_loss_and_grad(params, x0, batch, model.schedule, rng)

    loss = BatchLoss(traj_loss, ctrl_loss, dp_loss)
    if not with_grads:
        return loss, {}
    grads.update(traj_backward(params, traj_out, d_traj))
    grads.update(ctrl_backward(params, ctrl_out, d_ctrl))
    return loss, grads


def _metadata(model: PlannerModel, config: RunConfig, epoch: int) -> dict:
    return {
        "config_hash": config.config_hash(), "seed": config.seed, "epoch": epoch,
        "arch": model.arch.model_dump(), "anchor_dim": model.vocab.anchor_dim,
        "horizon": model.diffusion.horizon, "K": len(model.vocab),
    }


def evaluate_loss(model: PlannerModel, frames: Sequence[DemoFrame], labels: Sequence[MetricScores],
                  config: RunConfig) -> float:
    """Mean total loss with a fixed diffusion noise stream."""
    if not frames:
        return math.nan
    rng = np.random.default_rng(config.seed)
    size = config.train.batch_size
    losses = []
    for start in range(0, len(frames), size):
        loss, _ = batch_loss(model, frames[start:start + size], labels[start:start + size], rng,
                             config.train.focal_gamma, with_grads=False)
        losses.append(loss.total * len(frames[start:start + size]))
    return float(sum(losses) / len(frames))


def train(config: RunConfig, dataset: DemoDataset, vocab: TrajectoryVocabulary,
          out_dir: Optional[Path] = None) -> tuple[PlannerModel, list[dict]]:
    """Joint AdamW training; writes the loss curve plus final and best checkpoints."""
    out_dir = Path(out_dir or config.paths.checkpoint.parent)
    model = PlannerModel.initialize(vocab, config.model.arch, config.diffusion, config.seed)
    train_frames, val_frames = dataset.split(config.train.holdout_every)
    if not train_frames:
        raise PlannerError("no training frames after the held-out split")
    train_labels = label_frames(train_frames, dataset, vocab, config)
    val_labels = label_frames(val_frames, dataset, vocab, config)

    rng = np.random.default_rng(config.seed)
    epochs, size = config.train.epochs, config.train.batch_size
    curve: list[dict] = []
    best = math.inf
    final_path = config.paths.checkpoint
    best_path = final_path.with_name(final_path.stem + ".best" + final_path.suffix)
    save_checkpoint(final_path, model.params, _metadata(model, config, 0))

    for epoch in tqdm(range(epochs), desc="train", disable=None):
        lr = cosine_lr(config.train.lr, epoch, epochs, config.train.min_lr)
        order = rng.permutation(len(train_frames))
        sums = np.zeros(3)
        for b, start in enumerate(range(0, len(order), size)):
            index = order[start:start + size]
            frames = [train_frames[i] for i in index]
            loss, grads = batch_loss(model, frames, [train_labels[i] for i in index], rng, config.train.focal_gamma)
            if not math.isfinite(loss.total):
                raise NonFiniteError(f"non-finite loss in epoch {epoch + 1}, batch {b}")
            optimizer_step(model.params, grads, lr, config.train.adamw)
            sums += np.array([loss.traj, loss.ctrl, loss.dp]) * len(index)
        means = sums / len(train_frames)
        val = evaluate_loss(model, val_frames, val_labels, config)
        row = {"epoch": epoch + 1, "lr": lr, "traj": means[0], "ctrl": means[1], "dp": means[2],
               "total": float(means.sum()), "val_total": None if math.isnan(val) else val}
        curve.append(row)
        logger.info("epoch %d/%d total %.4f (traj %.4f ctrl %.4f dp %.4f) val %s",
                    epoch + 1, epochs, row["total"], means[0], means[1], means[2], row["val_total"])
        score = row["total"] if math.isnan(val) else val
        if score < best:
            best = score
            save_checkpoint(best_path, model.params, _metadata(model, config, epoch + 1))

    save_checkpoint(final_path, model.params, _metadata(model, config, epochs))
    if not curve:
        save_checkpoint(best_path, model.params, _metadata(model, config, 0))
    rows = [{**r, "config_hash": config.config_hash(), "seed": config.seed} for r in curve]
    write_csv(out_dir / "loss_curve.csv", rows,
              ["epoch", "lr", "traj", "ctrl", "dp", "total", "val_total", "config_hash", "seed"])
    return model, curve


def load_model(config: RunConfig, checkpoint: Optional[Path] = None) -> PlannerModel:
    vocab = load_vocabulary(config.paths.vocab)
    params, meta = load_checkpoint(checkpoint or config.paths.checkpoint)
    arch = config.model.arch
    if meta.get("arch") and meta["arch"] != arch.model_dump():
        raise CheckpointError("checkpoint/config dim mismatch: architecture differs")
    try:
        return PlannerModel(params, vocab, arch, config.diffusion)
    except ShapeError as e:
        raise CheckpointError(f"checkpoint/config dim mismatch: {e}") from e


# ══════════════════════════════════════════════════════════════════════════════
#  OPEN-LOOP EVALUATION
# ══════════════════════════════════════════════════════════════════════════════

EVAL_COLUMNS = ("group", "frames", "mean_l2", "col_agreement", "slk_agreement", "ep_agreement",
                "brake_accuracy", "config_hash", "seed")


def open_loop_predictions(model: Optional[PlannerModel], frames: Sequence[DemoFrame], config: RunConfig,
                          expert: bool = False) -> list[dict]:
    """Per-frame selected trajectory, its predicted metric flags and the first brake decision."""
    if expert:
        return [{"trajectory": f.expert_traj, "anchor": None, "metrics": None, "brake": int(f.ctrl_2hz[0, 0])}
                for f in frames]
    out_rows = []
    size = config.train.batch_size
    for start in range(0, len(frames), size):
        chunk = frames[start:start + size]
        batch = stack_tokens([f.tokens for f in chunk])
        traj_out = traj_forward(model.params, batch, model.vocab)
        ctrl_out = ctrl_forward(model.params, batch)
        for b in range(len(chunk)):
            traj, anchor = select_trajectory(traj_out, config.planner.weights, model.vocab, index=b)
            out_rows.append({
                "trajectory": traj, "anchor": anchor,
                "metrics": (traj_out.s_metrics[b, anchor] > 0.5).astype(int),
                "brake": decode_discrete(ctrl_out, b)[0].brake_class,
            })
    return out_rows


def _summary(group: str, frames, predictions, labels) -> dict:
    l2 = [l2_distance(p["trajectory"], f.expert_traj) for f, p in zip(frames, predictions)]
    brake = [p["brake"] == int(f.ctrl_2hz[0, 0]) for f, p in zip(frames, predictions)]
    row = {"group": group, "frames": len(frames), "mean_l2": float(np.mean(l2)),
           "brake_accuracy": float(np.mean(brake))}
    for m, name in enumerate(("col", "slk", "ep")):
        agree = [int(p["metrics"][m]) == int(lab.stacked()[p["anchor"], m])
                 for p, lab in zip(predictions, labels) if p["metrics"] is not None]
        row[f"{name}_agreement"] = float(np.mean(agree)) if agree else None
    return row


def eval_open(config: RunConfig, dataset: DemoDataset, model: Optional[PlannerModel],
              out_dir: Optional[Path] = None, expert: bool = False) -> list[dict]:
    """Held-out open-loop report per family and overall."""
    _, frames = dataset.split(config.train.holdout_every)
    if not frames:
        raise PlannerError("no held-out frames to evaluate")
    vocab = model.vocab if model is not None else None
    labels = label_frames(frames, dataset, vocab, config) if vocab is not None else [None] * len(frames)
    predictions = open_loop_predictions(model, frames, config, expert)

    groups = defaultdict(list)
    for k, f in enumerate(frames):
        groups[f.family].append(k)
    rows = [_summary(fam, [frames[k] for k in idx], [predictions[k] for k in idx], [labels[k] for k in idx])
            for fam, idx in sorted(groups.items())]
    rows.append(_summary("overall", frames, predictions, labels))
    for row in rows:
        row["config_hash"], row["seed"] = config.config_hash(), config.seed
    if out_dir is not None:
        write_csv(Path(out_dir) / "eval_open.csv", rows, EVAL_COLUMNS)
    overall = rows[-1]
    logger.info("open-loop L2 %.3f m, brake accuracy %.3f on %d frames",
                overall["mean_l2"], overall["brake_accuracy"], overall["frames"])
    return rows


# ══════════════════════════════════════════════════════════════════════════════
#  CLOSED LOOP
# ══════════════════════════════════════════════════════════════════════════════

def episode_seed(run_seed: int, scenario_seed: int) -> int:
    return int(np.random.SeedSequence([run_seed, scenario_seed]).generate_state(1, dtype=np.uint64)[0])


@functools.lru_cache(maxsize=4)
def _cached_model(config_json: str) -> PlannerModel:
    return load_model(RunConfig.model_validate_json(config_json))


def run_closed_job(job: tuple[Scenario, str]) -> tuple[EpisodeLog, Optional[str]]:
    """One closed-loop episode plus its expert reference; returns (log, error message)."""
    scenario, config_json = job
    config = RunConfig.model_validate_json(config_json)
    params = config.sim_params()
    seed = episode_seed(config.seed, scenario.seed)
    expert = ExpertPolicy(config.expert, params, seed)
    try:
        reference = run_episode(scenario, expert, params, config.config_hash(), seed)
        if config.planner.mode == "expert":
            return reference, None
        policy = Planner(_cached_model(config_json), config.planner, config.model.tokenizer,
                         config.vehicle, seed, config.diffusion.sampler)
        return run_episode(scenario, policy, params, config.config_hash(), seed, reference), None
    except EpisodeError as e:
        return e.log, str(e)
