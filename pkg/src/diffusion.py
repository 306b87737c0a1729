"""
╔══════════════════════════════════════════════════════════════════════════════╗
║                        DIFFUSION CONTROL PROPOSALS                           ║
║                                                                              ║
║  A noise predictor conditioned on one attention feature over the scene.     ║
║  Training is the usual epsilon-prediction MSE; sampling runs DDPM           ║
║  (ancestral) or deterministic DDIM over N independent proposals, each with  ║
║  its own RNG stream spawned from the caller's generator.                    ║
╚══════════════════════════════════════════════════════════════════════════════╝
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.schemas import ControlTuple
from .kinematics import SIM_HZ, ControlSequence
from .nn import (
    ArchSettings, Grads, ParamSpecs, ParamStore, TokenBatch,
    attention_specs, backward, forward, linear_specs, mlp_backward, mlp_forward, sinusoidal_embedding,
)

logger = logging.getLogger(__name__)

CHANNELS = 3
Sampler = Literal["ddpm", "ddim"]
NoiseFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class DiffusionSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    steps: int = Field(default=100, ge=1)
    beta_min: float = Field(default=1e-4, gt=0, lt=1)
    beta_max: float = Field(default=0.02, gt=0, lt=1)
    horizon: int = Field(default=20, ge=1)
    proposals: int = Field(default=10, ge=1)
    ddim_steps: int = Field(default=20, ge=1)
    sampler: Sampler = "ddpm"

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.beta_min > self.beta_max:
            raise ValueError("beta_min must be <= beta_max")
        if self.ddim_steps > self.steps:
            raise ValueError("ddim_steps must be <= steps")
        return self


# ═══════════════════════════════════════════════════════════════════════════
#  SCHEDULE
# ═══════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class DiffusionSchedule:
    """Arrays are indexed by t - 1 for t in 1..steps."""
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t) -> np.ndarray:
        """alpha_bar_t with alpha_bar_0 = 1."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bar[np.maximum(t, 1) - 1], 1.0)


def make_schedule(steps: int, beta_min: float, beta_max: float) -> DiffusionSchedule:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    beta = np.linspace(beta_min, beta_max, steps, dtype=np.float64)
    alpha = 1.0 - beta
    return DiffusionSchedule(beta, alpha, np.cumprod(alpha))


def schedule_from(settings: DiffusionSettings) -> DiffusionSchedule:
    return make_schedule(settings.steps, settings.beta_min, settings.beta_max)


def q_sample(x0: np.ndarray, t, noise: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Forward process; ``t`` is a scalar or one step per leading row of ``x0``."""
    if noise.shape != x0.shape:
        raise ValueError("noise must match x0")
    ab = sched.alpha_bar_at(t)
    ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


# ═══════════════════════════════════════════════════════════════════════════
#  NOISE PREDICTOR
# ═══════════════════════════════════════════════════════════════════════════

def dp_param_specs(arch: ArchSettings, horizon: int) -> ParamSpecs:
    specs = attention_specs("dp", 1, arch.width)
    n_in = horizon * CHANNELS + arch.time_embed_dim + arch.width
    specs.update(linear_specs("dp.noise", [n_in, arch.dp_hidden, arch.dp_hidden, horizon * CHANNELS]))
    return specs


def dp_condition(params: ParamStore, batch: TokenBatch):
    features, tape = forward(params, batch, "dp")
    return features[:, 0, :], tape


def _time_embed_dim(params: ParamStore, horizon: int) -> int:
    return params["dp.noise.W0"].shape[0] - horizon * CHANNELS - params["dp.W_o"].shape[1]


def predict_noise(params: ParamStore, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray):
    """epsilon estimate for (B, h, 3) noisy sequences at steps ``t`` (B,)."""
    B, h, _ = x_t.shape
    embed = sinusoidal_embedding(np.broadcast_to(t, (B,)), _time_embed_dim(params, h))
    inputs = np.concatenate([x_t.reshape(B, -1), embed, np.broadcast_to(cond, (B, cond.shape[-1]))], axis=1)
    out, cache = mlp_forward(params, "dp.noise", inputs, 3)
    return out.reshape(B, h, CHANNELS), cache


def _draw_training_noise(rng: np.random.Generator, shape: tuple, steps: int) -> tuple[np.ndarray, np.ndarray]:
    # draw order: steps first, then noise
    t = rng.integers(1, steps + 1, size=shape[0])
    return t, rng.standard_normal(shape)


def dp_loss_and_grad(params: ParamStore, x0: np.ndarray, batch: TokenBatch, sched: DiffusionSchedule,
                     rng: np.random.Generator, noise_fn: Optional[NoiseFn] = None) -> tuple[float, Grads]:
    """MSE between the injected noise and its prediction, with parameter gradients.

    ``noise_fn(x_t, t)`` replaces the learned predictor (no gradients then).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t, noise = _draw_training_noise(rng, x0.shape, sched.steps)
    x_t = q_sample(x0, t, noise, sched)
    if noise_fn is not None:
        diff = noise_fn(x_t, t) - noise
        return float(np.mean(diff ** 2)), {}

    cond, tape = dp_condition(params, batch)
    pred, cache = predict_noise(params, x_t, t, cond)
    diff = pred - noise
    loss = float(np.mean(diff ** 2))

    grads: Grads = {}
    d_pred = (2.0 / diff.size) * diff.reshape(len(x0), -1)
    d_inputs = mlp_backward(params, "dp.noise", cache, d_pred, grads)
    d_cond = d_inputs[:, -cond.shape[1]:]
    grads.update(backward(params, tape, d_cond[:, None, :]))
    return loss, grads


def dp_loss(params: ParamStore, x0: np.ndarray, batch: TokenBatch, sched: DiffusionSchedule,
            rng: np.random.Generator, noise_fn: Optional[NoiseFn] = None) -> float:
    return dp_loss_and_grad(params, x0, batch, sched, rng, noise_fn)[0]


# ═══════════════════════════════════════════════════════════════════════════
#  SAMPLING
# ═══════════════════════════════════════════════════════════════════════════

def proposal_streams(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Per-proposal generators; proposal k's stream does not depend on n."""
    base = int(rng.integers(2 ** 63))
    return [np.random.default_rng(child) for child in np.random.SeedSequence(base).spawn(n)]


def _noise_model(params: Optional[ParamStore], batch: Optional[TokenBatch], n: int,
                 noise_fn: Optional[NoiseFn]) -> NoiseFn:
    if noise_fn is not None:
        return noise_fn
    cond, _ = dp_condition(params, batch)
    cond = np.repeat(cond[:1], n, axis=0)
    return lambda x_t, t: predict_noise(params, x_t, np.full(len(x_t), t), cond)[0]


def ddpm_sample(params: Optional[ParamStore], batch: Optional[TokenBatch], n: int,
                sched: DiffusionSchedule, rng: np.random.Generator, horizon: int = 20,
                noise_fn: Optional[NoiseFn] = None) -> np.ndarray:
    """Ancestral sampling of ``n`` (horizon, 3) sequences for the first scene of ``batch``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    streams = proposal_streams(rng, n)
    eps_model = _noise_model(params, batch, n, noise_fn)
    x = np.stack([g.standard_normal((horizon, CHANNELS)) for g in streams])
    for t in range(sched.steps, 0, -1):
        beta, alpha, ab = sched.beta[t - 1], sched.alpha[t - 1], sched.alpha_bar[t - 1]
        eps = eps_model(x, t)
        mean = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
        if t > 1:
            z = np.stack([g.standard_normal((horizon, CHANNELS)) for g in streams])
            x = mean + math.sqrt(beta) * z
        else:
            x = mean
    return np.clip(x, -1.0, 1.0)


def ddim_timesteps(total: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= total:
        raise ValueError(f"ddim steps must be in [1, {total}], got {steps}")
    return np.arange(steps, 0, -1) * total // steps


def ddim_sample(params: Optional[ParamStore], batch: Optional[TokenBatch], n: int,
                sched: DiffusionSchedule, steps: int, rng: np.random.Generator, horizon: int = 20,
                noise_fn: Optional[NoiseFn] = None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM over an evenly spaced step subsequence."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ts = ddim_timesteps(sched.steps, steps)
    streams = proposal_streams(rng, n)
    eps_model = _noise_model(params, batch, n, noise_fn)
    x = np.stack([g.standard_normal((horizon, CHANNELS)) for g in streams])
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        ab, ab_prev = sched.alpha_bar[t - 1], float(sched.alpha_bar_at(t_prev))
        eps = eps_model(x, int(t))
        x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps
    return np.clip(x, -1.0, 1.0)


def sample_proposals(params: ParamStore, batch: TokenBatch, settings: DiffusionSettings,
                     sched: DiffusionSchedule, rng: np.random.Generator,
                     sampler: Optional[Sampler] = None, n: Optional[int] = None) -> np.ndarray:
    sampler = sampler or settings.sampler
    n = n or settings.proposals
    if sampler == "ddpm":
        return ddpm_sample(params, batch, n, sched, rng, settings.horizon)
    return ddim_sample(params, batch, n, sched, settings.ddim_steps, rng, settings.horizon)


# ═══════════════════════════════════════════════════════════════════════════
#  ENCODING
# ═══════════════════════════════════════════════════════════════════════════

def decode_proposal(x: np.ndarray) -> ControlSequence:
    """(h, 3) normalized sequence -> 10 Hz controls; brake is 1 iff its channel >= 0."""
    x = np.asarray(x, dtype=np.float64)
    controls = tuple(
        ControlTuple(brake=int(b >= 0.0), throttle=float((th + 1.0) / 2.0), steer=float(st))
        for b, th, st in x
    )
    return ControlSequence(controls, SIM_HZ)


def encode_controls(seq: ControlSequence) -> np.ndarray:
    return np.array([[1.0 if c.brake else -1.0, 2.0 * c.throttle - 1.0, c.steer] for c in seq.controls])
