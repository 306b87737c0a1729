"""
╔══════════════════════════════════════════════════════════════════════════════╗
║                      MINIMAL DIFFERENTIABLE BUILDING BLOCKS                  ║
║                                                                              ║
║  Parameter storage, one masked cross-attention block, small MLPs, AdamW     ║
║  with cosine annealing, a central-difference gradient checker and the       ║
║  binary checkpoint format. Everything is float64 numpy with hand-written    ║
║  backward passes.                                                           ║
╚══════════════════════════════════════════════════════════════════════════════╝
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core.errors import CheckpointError, NonFiniteError, ShapeError, TapeError
from .world import AGENT_TOKEN_DIM, EGO_TOKEN_DIM, LANE_TOKEN_DIM, SceneTokens

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HYNX"
CHECKPOINT_VERSION = 1

TOKEN_VALUES = max(EGO_TOKEN_DIM, AGENT_TOKEN_DIM, LANE_TOKEN_DIM)
TOKEN_FEATURES = TOKEN_VALUES + 3


class ArchSettings(BaseModel):
    """Network dimensions."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    width: int = Field(default=64, ge=1)
    hidden: int = Field(default=64, ge=1)
    ctrl_steps: int = Field(default=6, ge=1)
    dp_hidden: int = Field(default=128, ge=1)
    time_embed_dim: int = Field(default=32, ge=2)


# ══════════════════════════════════════════════════════════════════════════════
#  PARAMETERS
# ══════════════════════════════════════════════════════════════════════════════

ParamSpecs = dict[str, tuple[int, ...]]


class ParamStore:
    """Named float64 parameters plus AdamW moment state."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = {name: np.asarray(value, dtype=np.float64) for name, value in arrays.items()}
        self.first_moment = {name: np.zeros_like(a) for name, a in self.arrays.items()}
        self.second_moment = {name: np.zeros_like(a) for name, a in self.arrays.items()}
        self.step = 0

    @classmethod
    def initialize(cls, specs: ParamSpecs, rng: np.random.Generator) -> "ParamStore":
        """Xavier-uniform matrices, zero vectors; drawn in sorted name order."""
        arrays = {}
        for name in sorted(specs):
            shape = specs[name]
            if len(shape) >= 2:
                bound = math.sqrt(6.0 / (shape[0] + shape[-1]))
                arrays[name] = rng.uniform(-bound, bound, size=shape)
            else:
                arrays[name] = np.zeros(shape)
        return cls(arrays)

    @classmethod
    def zeros(cls, specs: ParamSpecs) -> "ParamStore":
        return cls({name: np.zeros(shape) for name, shape in specs.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.arrays[name]
        except KeyError:
            raise ShapeError(f"missing parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __len__(self) -> int:
        return len(self.arrays)

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def num_values(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def check(self, specs: ParamSpecs) -> None:
        for name, shape in specs.items():
            if self[name].shape != tuple(shape):
                raise ShapeError(f"parameter '{name}' has shape {self[name].shape}, expected {tuple(shape)}")

    def copy(self) -> "ParamStore":
        clone = ParamStore({name: a.copy() for name, a in self.arrays.items()})
        clone.first_moment = {name: a.copy() for name, a in self.first_moment.items()}
        clone.second_moment = {name: a.copy() for name, a in self.second_moment.items()}
        clone.step = self.step
        return clone


Grads = dict[str, np.ndarray]


def _accumulate(grads: Grads, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def zero_grads(params: ParamStore, names: Optional[Iterable[str]] = None) -> Grads:
    return {name: np.zeros_like(params[name]) for name in (names or params.names())}


class Tape:
    """Forward intermediates for exactly one backward pass."""

    def __init__(self, kind: str, **cache):
        self.kind = kind
        self.cache = cache
        self.consumed = False

    def consume(self, kind: str) -> dict:
        if self.consumed:
            raise TapeError(f"{self.kind} tape already consumed")
        if kind != self.kind:
            raise TapeError(f"expected a {kind} tape, got {self.kind}")
        self.consumed = True
        return self.cache


# ══════════════════════════════════════════════════════════════════════════════
#  TOKENS
# ══════════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class TokenBatch:
    """Scaled, type-tagged tokens for a batch of scenes."""
    x: np.ndarray       # (B, N, TOKEN_FEATURES)
    mask: np.ndarray    # (B, N)
    ego: np.ndarray     # (B, EGO_TOKEN_DIM)

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, index: Sequence[int]) -> "TokenBatch":
        index = np.asarray(index)
        return TokenBatch(self.x[index], self.mask[index], self.ego[index])

    def permuted(self, order: Sequence[int]) -> "TokenBatch":
        """Reorder the token axis; used to check permutation invariance."""
        order = np.asarray(order)
        return TokenBatch(self.x[:, order], self.mask[:, order], self.ego)


_AGENT_SCALE = np.array([50.0, 50.0, 1.0, 1.0, 10.0, 5.0, 5.0])
_LANE_SCALE = 50.0


def _scaled_ego(tokens: SceneTokens) -> np.ndarray:
    ego = tokens.ego.copy()
    ego[0] /= 10.0
    return ego


def stack_tokens(scenes: Sequence[SceneTokens]) -> TokenBatch:
    n_agents = scenes[0].agents.shape[0]
    n_lanes = scenes[0].lanes.shape[0]
    n = 1 + n_agents + n_lanes
    x = np.zeros((len(scenes), n, TOKEN_FEATURES))
    mask = np.zeros((len(scenes), n))
    ego = np.zeros((len(scenes), EGO_TOKEN_DIM))
    for b, tokens in enumerate(scenes):
        if tokens.agents.shape[0] != n_agents or tokens.lanes.shape[0] != n_lanes:
            raise ShapeError("scene tokens in a batch must share max_agents and max_lanes")
        ego[b] = _scaled_ego(tokens)
        x[b, 0, :EGO_TOKEN_DIM] = ego[b]
        x[b, 1:1 + n_agents, :AGENT_TOKEN_DIM] = tokens.agents / _AGENT_SCALE
        x[b, 1 + n_agents:, :LANE_TOKEN_DIM] = tokens.lanes / _LANE_SCALE
        x[b, 0, TOKEN_VALUES] = 1.0
        x[b, 1:1 + n_agents, TOKEN_VALUES + 1] = 1.0
        x[b, 1 + n_agents:, TOKEN_VALUES + 2] = 1.0
        mask[b] = tokens.mask
    x *= mask[..., None]
    return TokenBatch(x, mask, ego)


# ══════════════════════════════════════════════════════════════════════════════
#  LAYERS
# ══════════════════════════════════════════════════════════════════════════════

def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to mask == 1; fully masked rows are zero."""
    valid = mask > 0
    shifted = np.where(valid, scores, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(valid, np.exp(np.where(valid, scores, 0.0) - row_max), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def linear_specs(prefix: str, sizes: Sequence[int]) -> ParamSpecs:
    specs: ParamSpecs = {}
    for i in range(len(sizes) - 1):
        specs[f"{prefix}.W{i}"] = (sizes[i], sizes[i + 1])
        specs[f"{prefix}.b{i}"] = (sizes[i + 1],)
    return specs


def mlp_forward(params: ParamStore, prefix: str, x: np.ndarray, n_layers: int) -> tuple[np.ndarray, list]:
    """Linear layers with ReLU between them (none after the last)."""
    cache = []
    h = x
    for i in range(n_layers):
        W, b = params[f"{prefix}.W{i}"], params[f"{prefix}.b{i}"]
        if h.shape[-1] != W.shape[0]:
            raise ShapeError(f"parameter '{prefix}.W{i}' expects {W.shape[0]} inputs, got {h.shape[-1]}")
        z = h @ W + b
        cache.append((h, z))
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
    return h, cache


def mlp_backward(params: ParamStore, prefix: str, cache: list, grad_out: np.ndarray, grads: Grads) -> np.ndarray:
    g = grad_out
    for i in reversed(range(len(cache))):
        h, z = cache[i]
        if i < len(cache) - 1:
            g = g * (z > 0)
        W = params[f"{prefix}.W{i}"]
        _accumulate(grads, f"{prefix}.W{i}", h.reshape(-1, h.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        _accumulate(grads, f"{prefix}.b{i}", g.reshape(-1, g.shape[-1]).sum(axis=0))
        g = g @ W.T
    return g


# ══════════════════════════════════════════════════════════════════════════════
#  CROSS-ATTENTION
# ══════════════════════════════════════════════════════════════════════════════

def attention_specs(prefix: str, n_queries: int, width: int) -> ParamSpecs:
    return {
        f"{prefix}.queries": (n_queries, width),
        f"{prefix}.W_eq": (EGO_TOKEN_DIM, width),
        f"{prefix}.W_in": (TOKEN_FEATURES, width),
        f"{prefix}.b_in": (width,),
        f"{prefix}.W_q": (width, width),
        f"{prefix}.W_k": (width, width),
        f"{prefix}.W_v": (width, width),
        f"{prefix}.W_o": (width, width),
    }


def forward(params: ParamStore, batch: TokenBatch, prefix: str,
            query_input: Optional[np.ndarray] = None) -> tuple[np.ndarray, Tape]:
    """Learned queries (shifted by the ego status) attend to the masked scene tokens.

    ``query_input`` of shape (Q, width) is added to the learned queries,
    which then broadcast to Q rows. Returns features of shape (B, Q, width).
    """
    W_in = params[f"{prefix}.W_in"]
    if batch.x.shape[-1] != W_in.shape[0]:
        raise ShapeError(f"parameter '{prefix}.W_in' expects {W_in.shape[0]} token features, got {batch.x.shape[-1]}")
    W_eq = params[f"{prefix}.W_eq"]
    if batch.ego.shape[-1] != W_eq.shape[0]:
        raise ShapeError(f"parameter '{prefix}.W_eq' expects {W_eq.shape[0]} ego features, got {batch.ego.shape[-1]}")

    width = W_in.shape[1]
    scale = 1.0 / math.sqrt(width)
    embedded = batch.x @ W_in + params[f"{prefix}.b_in"]
    keys = embedded @ params[f"{prefix}.W_k"]
    values = embedded @ params[f"{prefix}.W_v"]
    queries = params[f"{prefix}.queries"]
    if query_input is not None:
        queries = queries + query_input
    q_in = queries[None] + (batch.ego @ W_eq)[:, None, :]
    q_proj = q_in @ params[f"{prefix}.W_q"]
    scores = np.einsum("bqd,bnd->bqn", q_proj, keys) * scale
    weights = masked_softmax(scores, batch.mask[:, None, :])
    context = weights @ values
    features = q_in + context @ params[f"{prefix}.W_o"]

    tape = Tape("attention", prefix=prefix, batch=batch, embedded=embedded, keys=keys, values=values,
                q_in=q_in, q_proj=q_proj, weights=weights, context=context, scale=scale)
    return features, tape


def attention_weights(tape: Tape) -> np.ndarray:
    return tape.cache["weights"]


def backward(params: ParamStore, tape: Tape, grad_features: np.ndarray,
             query_grad: bool = False):
    """Gradients of every attention parameter given dL/dfeatures.

    With ``query_grad`` the gradient w.r.t. ``query_input`` is returned too.
    """
    c = tape.consume("attention")
    p, batch = c["prefix"], c["batch"]
    grads: Grads = {}

    d_q_in = grad_features.copy()
    d_context = grad_features @ params[f"{p}.W_o"].T
    grads[f"{p}.W_o"] = np.einsum("bqd,bqe->de", c["context"], grad_features)

    weights = c["weights"]
    d_weights = d_context @ np.swapaxes(c["values"], 1, 2)
    d_values = np.swapaxes(weights, 1, 2) @ d_context
    d_scores = weights * (d_weights - (d_weights * weights).sum(axis=-1, keepdims=True)) * c["scale"]

    d_q_proj = d_scores @ c["keys"]
    d_keys = np.swapaxes(d_scores, 1, 2) @ c["q_proj"]
    grads[f"{p}.W_q"] = np.einsum("bqd,bqe->de", c["q_in"], d_q_proj)
    d_q_in += d_q_proj @ params[f"{p}.W_q"].T

    embedded = c["embedded"]
    grads[f"{p}.W_k"] = np.einsum("bnd,bne->de", embedded, d_keys)
    grads[f"{p}.W_v"] = np.einsum("bnd,bne->de", embedded, d_values)
    d_embedded = d_keys @ params[f"{p}.W_k"].T + d_values @ params[f"{p}.W_v"].T
    grads[f"{p}.W_in"] = np.einsum("bnf,bnd->fd", batch.x, d_embedded)
    grads[f"{p}.b_in"] = d_embedded.sum(axis=(0, 1))

    d_queries = d_q_in.sum(axis=0)
    n_learned = params[f"{p}.queries"].shape[0]
    grads[f"{p}.queries"] = d_queries if n_learned == d_queries.shape[0] else d_queries.sum(axis=0, keepdims=True)
    grads[f"{p}.W_eq"] = batch.ego.T @ d_q_in.sum(axis=1)
    if query_grad:
        return grads, d_queries
    return grads


# ══════════════════════════════════════════════════════════════════════════════
#  OPTIMIZER
# ══════════════════════════════════════════════════════════════════════════════

class AdamWHyper(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)


def cosine_lr(base_lr: float, step: int, total_steps: int, min_lr: float = 0.0) -> float:
    """Cosine annealing from base_lr at step 0 to min_lr at total_steps."""
    if total_steps <= 0:
        return base_lr
    progress = min(max(step / total_steps, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def optimizer_step(params: ParamStore, grads: Grads, lr: float, hyper: AdamWHyper) -> ParamStore:
    """One AdamW update in place; parameters without a gradient only decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
    params.step += 1
    t = params.step
    bias1 = 1.0 - hyper.beta1 ** t
    bias2 = 1.0 - hyper.beta2 ** t
    for name in params.names():
        p = params.arrays[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, expected {p.shape}")
        m = hyper.beta1 * params.first_moment[name] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * params.second_moment[name] + (1.0 - hyper.beta2) * g * g
        params.first_moment[name], params.second_moment[name] = m, v
        update = (m / bias1) / (np.sqrt(v / bias2) + hyper.eps)
        params.arrays[name] = p - lr * (update + hyper.weight_decay * p)
    return params


# ══════════════════════════════════════════════════════════════════════════════
#  GRADIENT CHECK
# ══════════════════════════════════════════════════════════════════════════════

@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst < tol


LossFn = Callable[[ParamStore], tuple[float, Grads]]


def grad_check(loss_fn: LossFn, params: ParamStore, h: float = 1e-5,
               names: Optional[Iterable[str]] = None, max_entries: Optional[int] = None,
               seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Max relative error between analytic and central-difference gradients per parameter.

    ``max_entries`` limits each parameter to a seeded random subset of entries.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    _, analytic = loss_fn(params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name in names or params.names():
        values = params.arrays[name]
        flat = values.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        grad = analytic.get(name, np.zeros_like(values)).reshape(-1)
        worst = 0.0
        for k in entries:
            original = flat[k]
            flat[k] = original + h
            plus, _ = loss_fn(params)
            flat[k] = original - h
            minus, _ = loss_fn(params)
            flat[k] = original
            numeric = (plus - minus) / (2.0 * h)
            denom = max(abs(numeric), abs(grad[k]), floor)
            worst = max(worst, abs(numeric - grad[k]) / denom)
        report.errors[name] = worst
    return report


# ══════════════════════════════════════════════════════════════════════════════
#  CHECKPOINTS
# ══════════════════════════════════════════════════════════════════════════════

def save_checkpoint(path: Path, params: ParamStore, metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(params)))
        for name in params.names():
            values = params[name]
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", values.ndim))
            f.write(struct.pack(f"<{values.ndim}Q", *values.shape))
            f.write(values.astype("<f8").tobytes())
    logger.info("wrote checkpoint %s (%d tensors)", path, len(params))
    return path


def _read(f, size: int) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise CheckpointError("truncated checkpoint")
    return data


def load_checkpoint(path: Path) -> tuple[ParamStore, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with open(path, "rb") as f:
        if _read(f, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read(f, 4))
        metadata = json.loads(_read(f, meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read(f, 4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read(f, 4))
            name = _read(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read(f, 4))
            shape = struct.unpack(f"<{rank}Q", _read(f, 8 * rank))
            size = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(_read(f, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if f.read(1):
            raise CheckpointError("trailing bytes after last tensor")
    return ParamStore(arrays), metadata
