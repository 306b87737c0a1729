"""
Trajectory decoder (vocabulary imitation + metric distillation) and control
decoder (discrete brake / throttle / steer classification).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core.errors import ShapeError, VocabularyError
from core.schemas import STEER_BINS, THROTTLE_BINS, ControlTuple, DiscreteControl
from .kinematics import ControlSequence, Trajectory
from .nn import (
    ArchSettings, Grads, ParamSpecs, ParamStore, Tape, TokenBatch,
    attention_specs, backward, forward, linear_specs, mlp_backward, mlp_forward, sigmoid, softmax,
)
from .teachers import MetricScores

logger = logging.getLogger(__name__)

SCORE_EPS = 1e-7
ANCHOR_SCALE = 10.0
METRICS = ("col", "slk", "ep")
CTRL_SIGNALS = {"brake": 2, "throttle": len(THROTTLE_BINS), "steer": len(STEER_BINS)}
CONTROL_HZ = 2

_THROTTLE = np.array(THROTTLE_BINS)
_STEER = np.array(STEER_BINS)


class MetricWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    col: float = Field(default=1.0, ge=0)
    slk: float = Field(default=1.0, ge=0)
    ep: float = Field(default=1.0, ge=0)

    def as_array(self) -> np.ndarray:
        return np.array([self.col, self.slk, self.ep])


# ══════════════════════════════════════════════════════════════════════════
#  VOCABULARY
# ══════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class TrajectoryVocabulary:
    anchors: np.ndarray      # (K, n, 3) ego-frame waypoints
    dt: float = 0.5
    seed: int = 0
    method: str = "kmeans"

    def __post_init__(self):
        anchors = np.asarray(self.anchors, dtype=np.float64)
        if anchors.ndim != 3 or anchors.shape[2] != 3:
            raise VocabularyError(f"anchors must be (K, n, 3), got {anchors.shape}")
        if anchors.shape[0] < 2:
            raise VocabularyError("vocabulary needs K >= 2 anchors")
        if len(np.unique(anchors.reshape(len(anchors), -1), axis=0)) != len(anchors):
            raise VocabularyError("anchors pairwise distinct")
        object.__setattr__(self, "anchors", anchors)

    def __len__(self) -> int:
        return self.anchors.shape[0]

    @property
    def anchor_dim(self) -> int:
        return self.anchors.shape[1] * 3

    def trajectory(self, index: int) -> Trajectory:
        return Trajectory(self.anchors[index], self.dt)

    def features(self) -> np.ndarray:
        return self.anchors.reshape(len(self), -1) / ANCHOR_SCALE


def build_vocabulary(demo_trajs: Sequence[Trajectory], K: int, seed: int,
                     iterations: int = 50) -> TrajectoryVocabulary:
    """k-means over flattened demo waypoints; centroids become the anchors."""
    if len(demo_trajs) < K:
        raise VocabularyError(f"fewer demo trajectories ({len(demo_trajs)}) than K={K}")
    dt = demo_trajs[0].dt
    n = len(demo_trajs[0])
    if any(len(t) != n or t.dt != dt for t in demo_trajs):
        raise VocabularyError("demo trajectories must share length and dt")
    points = np.unique(np.stack([t.waypoints.reshape(-1) for t in demo_trajs]), axis=0)
    if len(points) < K:
        raise VocabularyError(f"anchors pairwise distinct: {len(points)} distinct demos for K={K}")

    rng = np.random.default_rng(seed)
    centroids = points[rng.choice(len(points), size=K, replace=False)].copy()
    previous = np.inf
    for iteration in range(iterations):
        d2 = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
        assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(points)), assign].sum())
        if inertia > previous * (1 + 1e-9) + 1e-9:
            logger.warning("k-means inertia increased at iteration %d: %.6g -> %.6g", iteration, previous, inertia)
        previous = inertia
        for k in range(K):
            members = points[assign == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
    logger.info("built vocabulary K=%d from %d distinct demos (inertia %.4g)", K, len(points), previous)
    return TrajectoryVocabulary(centroids.reshape(K, n, 3), dt=dt, seed=seed)


def save_vocabulary(vocab: TrajectoryVocabulary, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {"K": len(vocab), "seed": vocab.seed, "method": vocab.method, "dt": vocab.dt,
            "anchors": vocab.anchors.tolist()}
    path.write_text(json.dumps(data))
    return path


def load_vocabulary(path: Path) -> TrajectoryVocabulary:
    try:
        data = json.loads(Path(path).read_text())
        vocab = TrajectoryVocabulary(np.array(data["anchors"]), dt=data["dt"],
                                     seed=data["seed"], method=data.get("method", "kmeans"))
    except (OSError, KeyError, ValueError) as e:
        raise VocabularyError(f"cannot load vocabulary {path}: {e}") from e
    if len(vocab) != data["K"]:
        raise VocabularyError(f"vocabulary {path} declares K={data['K']} but holds {len(vocab)} anchors")
    return vocab


# ══════════════════════════════════════════════════════════════════════════
#  DISCRETE CONTROLS
# ══════════════════════════════════════════════════════════════════════════

def snap_control(control: ControlTuple) -> DiscreteControl:
    """Nearest bin per signal; ties go to the lower index."""
    return DiscreteControl(
        brake_class=control.brake,
        throttle_bin=int(np.argmin(np.abs(_THROTTLE - control.throttle))),
        steer_bin=int(np.argmin(np.abs(_STEER - control.steer))),
    )


def control_targets(sequences: Sequence[Sequence[DiscreteControl]]) -> np.ndarray:
    """(B, t_ctrl, 3) integer class indices."""
    return np.array([[(c.brake_class, c.throttle_bin, c.steer_bin) for c in seq] for seq in sequences],
                    dtype=np.int64).reshape(len(sequences), -1, 3)


# ══════════════════════════════════════════════════════════════════════════
#  TRAJECTORY DECODER
# ══════════════════════════════════════════════════════════════════════════

def traj_param_specs(arch: ArchSettings, anchor_dim: int) -> ParamSpecs:
    specs = attention_specs("traj", 1, arch.width)
    specs["traj.W_anc"] = (anchor_dim, arch.width)
    specs["traj.b_anc"] = (arch.width,)
    specs.update(linear_specs("traj.head", [arch.width, arch.hidden, 1 + len(METRICS)]))
    return specs


@dataclass
class TrajHeadOutput:
    logits: np.ndarray               # (B, K, 4): imitation, col, slk, ep
    tape: Optional[Tape] = None
    cache: Optional[dict] = None

    @property
    def s_im(self) -> np.ndarray:
        return softmax(self.logits[..., 0], axis=-1)

    @property
    def s_metrics(self) -> np.ndarray:
        return sigmoid(self.logits[..., 1:])

    @property
    def s_col(self) -> np.ndarray:
        return self.s_metrics[..., 0]

    @property
    def s_slk(self) -> np.ndarray:
        return self.s_metrics[..., 1]

    @property
    def s_ep(self) -> np.ndarray:
        return self.s_metrics[..., 2]


def traj_forward(params: ParamStore, batch: TokenBatch, vocab: TrajectoryVocabulary) -> TrajHeadOutput:
    """Anchor embeddings as queries over the scene; one logit per anchor and metric."""
    W_anc = params["traj.W_anc"]
    anchor_features = vocab.features()
    if anchor_features.shape[1] != W_anc.shape[0]:
        raise ShapeError(f"parameter 'traj.W_anc' expects {W_anc.shape[0]} anchor values, got {anchor_features.shape[1]}")
    anchor_embed = anchor_features @ W_anc + params["traj.b_anc"]
    features, tape = forward(params, batch, "traj", query_input=anchor_embed)
    logits, mlp_cache = mlp_forward(params, "traj.head", features, 2)
    return TrajHeadOutput(logits, tape, {"mlp": mlp_cache, "anchor_features": anchor_features})


def traj_backward(params: ParamStore, out: TrajHeadOutput, grad_logits: np.ndarray) -> Grads:
    grads: Grads = {}
    d_features = mlp_backward(params, "traj.head", out.cache["mlp"], grad_logits, grads)
    attn_grads, d_anchor_embed = backward(params, out.tape, d_features, query_grad=True)
    grads.update(attn_grads)
    grads["traj.W_anc"] = out.cache["anchor_features"].T @ d_anchor_embed
    grads["traj.b_anc"] = d_anchor_embed.sum(axis=0)
    return grads


def imitation_loss(s_im: np.ndarray, y: np.ndarray) -> float:
    """-sum_i y_i log s_i on clamped scores."""
    return float(-(y * np.log(np.clip(s_im, SCORE_EPS, 1 - SCORE_EPS))).sum())


def distillation_loss(s_metrics: np.ndarray, targets: np.ndarray) -> float:
    """Binary cross-entropy summed over anchors and metrics."""
    s = np.clip(s_metrics, SCORE_EPS, 1 - SCORE_EPS)
    return float(-(targets * np.log(s) + (1 - targets) * np.log(1 - s)).sum())


def _label_arrays(labels) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(labels, MetricScores):
        labels = [labels]
    y = np.stack([lab.y_imitation for lab in labels])
    targets = np.stack([lab.stacked() for lab in labels])
    return y, targets


def traj_loss_and_grad(out: TrajHeadOutput, labels) -> tuple[float, np.ndarray]:
    """Batch-mean L_im + L_kd and its gradient w.r.t. the logits."""
    y, targets = _label_arrays(labels)
    logits = out.logits.reshape(-1, *out.logits.shape[-2:])
    if y.shape != logits.shape[:2]:
        raise ShapeError(f"labels cover {y.shape} anchors, outputs {logits.shape[:2]}")
    B = logits.shape[0]

    s_im = softmax(logits[..., 0], axis=-1)
    inside = (s_im > SCORE_EPS) & (s_im < 1 - SCORE_EPS)
    clamped = np.clip(s_im, SCORE_EPS, 1 - SCORE_EPS)
    loss = -(y * np.log(clamped)).sum()
    d_s = np.where(inside, -y / clamped, 0.0)
    d_im = s_im * (d_s - (d_s * s_im).sum(axis=-1, keepdims=True))

    s_m = sigmoid(logits[..., 1:])
    inside_m = (s_m > SCORE_EPS) & (s_m < 1 - SCORE_EPS)
    sc = np.clip(s_m, SCORE_EPS, 1 - SCORE_EPS)
    loss += -(targets * np.log(sc) + (1 - targets) * np.log(1 - sc)).sum()
    d_sm = np.where(inside_m, -targets / sc + (1 - targets) / (1 - sc), 0.0)
    d_metrics = d_sm * s_m * (1 - s_m)

    grad = np.concatenate([d_im[..., None], d_metrics], axis=-1) / B
    return float(loss / B), grad.reshape(out.logits.shape)


def traj_loss(out: TrajHeadOutput, labels) -> float:
    return traj_loss_and_grad(out, labels)[0]


def combined_scores(out: TrajHeadOutput, weights: MetricWeights) -> np.ndarray:
    log_im = np.log(np.clip(out.s_im, SCORE_EPS, 1.0))
    log_m = np.log(np.clip(out.s_metrics, SCORE_EPS, 1.0))
    return log_im + log_m @ weights.as_array()


def select_trajectory(out: TrajHeadOutput, weights: MetricWeights, vocab: TrajectoryVocabulary,
                      index: int = 0) -> tuple[Trajectory, int]:
    """Highest combined score for scene ``index`` of the batch; ties pick the lowest anchor."""
    scores = combined_scores(out, weights)
    if scores.ndim == 2:
        scores = scores[index]
    best = int(np.argmax(scores))
    return vocab.trajectory(best), best


# ══════════════════════════════════════════════════════════════════════════
#  CONTROL DECODER
# ══════════════════════════════════════════════════════════════════════════

def ctrl_param_specs(arch: ArchSettings) -> ParamSpecs:
    specs = attention_specs("ctrl", arch.ctrl_steps, arch.width)
    for signal, classes in CTRL_SIGNALS.items():
        specs.update(linear_specs(f"ctrl.{signal}", [arch.width, arch.hidden, classes]))
    return specs


@dataclass
class CtrlHeadOutput:
    brake: np.ndarray        # (B, t_ctrl, 2)
    throttle: np.ndarray     # (B, t_ctrl, 5)
    steer: np.ndarray        # (B, t_ctrl, 21)
    tape: Optional[Tape] = None
    cache: Optional[dict] = None

    def logits(self, signal: str) -> np.ndarray:
        return getattr(self, signal)

    @property
    def steps(self) -> int:
        return self.brake.shape[-2]


def ctrl_forward(params: ParamStore, batch: TokenBatch) -> CtrlHeadOutput:
    features, tape = forward(params, batch, "ctrl")
    logits, caches = {}, {}
    for signal in CTRL_SIGNALS:
        logits[signal], caches[signal] = mlp_forward(params, f"ctrl.{signal}", features, 2)
    return CtrlHeadOutput(**logits, tape=tape, cache=caches)


def ctrl_backward(params: ParamStore, out: CtrlHeadOutput, grad_logits: dict[str, np.ndarray]) -> Grads:
    grads: Grads = {}
    d_features = None
    for signal in CTRL_SIGNALS:
        d = mlp_backward(params, f"ctrl.{signal}", out.cache[signal], grad_logits[signal], grads)
        d_features = d if d_features is None else d_features + d
    grads.update(backward(params, out.tape, d_features))
    return grads


def decode_discrete(out: CtrlHeadOutput, index: int = 0) -> list[DiscreteControl]:
    brake, throttle, steer = (np.asarray(out.logits(s)) for s in CTRL_SIGNALS)
    if brake.ndim == 3:
        brake, throttle, steer = brake[index], throttle[index], steer[index]
    return [
        DiscreteControl(brake_class=int(np.argmax(b)), throttle_bin=int(np.argmax(th)), steer_bin=int(np.argmax(st)))
        for b, th, st in zip(brake, throttle, steer)
    ]


def decode_controls(out: CtrlHeadOutput, index: int = 0) -> ControlSequence:
    """Per-step argmax of every head mapped to bin centers (2 Hz)."""
    return ControlSequence(tuple(d.to_control() for d in decode_discrete(out, index)), CONTROL_HZ)


def _focal_and_grad(logits: np.ndarray, target: np.ndarray, gamma: float) -> tuple[float, np.ndarray]:
    probs = softmax(logits, axis=-1)
    onehot = np.eye(logits.shape[-1])[target]
    p = (probs * onehot).sum(axis=-1)
    pc = np.clip(p, SCORE_EPS, 1.0)
    log_p = np.log(pc)
    weight = (1.0 - p) ** gamma
    loss = -(weight * log_p).sum()
    # d/dp of -(1-p)^g log p
    if gamma > 0:
        safe = np.where(p < 1.0, 1.0 - p, 1.0)
        d_weight = np.where(p < 1.0, gamma * safe ** (gamma - 1.0) * log_p, 0.0)
    else:
        d_weight = np.zeros_like(p)
    d_p = d_weight - np.where(p > SCORE_EPS, weight / pc, 0.0)
    d_logits = d_p[..., None] * p[..., None] * (onehot - probs)
    return float(loss), d_logits


def _cross_entropy_and_grad(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    onehot = np.eye(logits.shape[-1])[target]
    loss = -(onehot * log_probs).sum()
    return float(loss), np.exp(log_probs) - onehot


def ctrl_loss_and_grad(out: CtrlHeadOutput, expert: Sequence[Sequence[DiscreteControl]] | np.ndarray,
                       gamma: float = 2.0) -> tuple[float, dict[str, np.ndarray]]:
    """Focal loss on brake, cross-entropy on throttle and steer; summed over steps, batch mean."""
    targets = expert if isinstance(expert, np.ndarray) else control_targets(expert)
    brake = out.brake.reshape(-1, *out.brake.shape[-2:])
    if targets.shape[:2] != brake.shape[:2]:
        raise ShapeError(f"expert controls {targets.shape[:2]} do not match outputs {brake.shape[:2]}")
    B = brake.shape[0]
    total, grads = 0.0, {}
    loss, grads["brake"] = _focal_and_grad(brake, targets[..., 0], gamma)
    total += loss
    for k, signal in ((1, "throttle"), (2, "steer")):
        logits = out.logits(signal).reshape(-1, *out.logits(signal).shape[-2:])
        loss, grads[signal] = _cross_entropy_and_grad(logits, targets[..., k])
        total += loss
    grads = {s: (g / B).reshape(out.logits(s).shape) for s, g in grads.items()}
    return total / B, grads


def ctrl_loss(out: CtrlHeadOutput, expert, gamma: float = 2.0) -> float:
    return ctrl_loss_and_grad(out, expert, gamma)[0]
