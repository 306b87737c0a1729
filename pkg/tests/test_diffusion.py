import numpy as np
import pytest
from pydantic import ValidationError

from src.diffusion import (
    DiffusionSettings, ddim_sample, ddim_timesteps, ddpm_sample, decode_proposal, dp_loss, dp_loss_and_grad,
    dp_param_specs, encode_controls, make_schedule, q_sample, sample_proposals,
)
from src.nn import ParamStore, grad_check
from tests.conftest import TINY_ARCH, TINY_DIFFUSION

TARGET = np.tile([0.5, -0.3, 0.2], (20, 1))


def _exact_eps(sched):
    """Noise predictor that is exact when every training sample equals TARGET."""
    def eps(x_t, t):
        ab = sched.alpha_bar_at(np.broadcast_to(t, (len(x_t),))).reshape(-1, 1, 1)
        return (x_t - np.sqrt(ab) * TARGET) / np.sqrt(1.0 - ab)
    return eps


def test_schedule_is_linear_and_cumulative():
    sched = make_schedule(100, 1e-4, 0.02)
    assert sched.beta[0] == pytest.approx(1e-4) and sched.beta[-1] == pytest.approx(0.02)
    np.testing.assert_allclose(sched.alpha_bar, np.cumprod(1.0 - sched.beta))
    assert sched.alpha_bar_at(0) == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)


def test_schedule_rejects_bad_ranges():
    with pytest.raises(ValueError):
        make_schedule(10, 0.2, 0.1)
    with pytest.raises(ValueError):
        make_schedule(0, 1e-4, 0.02)
    with pytest.raises(ValidationError):
        DiffusionSettings(steps=10, ddim_steps=20)
    with pytest.raises(ValidationError):
        DiffusionSettings(beta_min=0.1, beta_max=0.01)


def test_q_sample_at_zero_is_identity():
    sched = make_schedule(10, 1e-3, 0.2)
    x0 = np.random.default_rng(0).normal(size=(2, 20, 3))
    np.testing.assert_array_equal(q_sample(x0, 0, np.ones_like(x0), sched), x0)
    noisy = q_sample(x0, np.array([10, 10]), np.zeros_like(x0), sched)
    np.testing.assert_allclose(noisy, np.sqrt(sched.alpha_bar[-1]) * x0)


def test_exact_predictor_has_zero_training_loss(token_batch):
    sched = make_schedule(10, 1e-3, 0.2)
    x0 = np.broadcast_to(TARGET, (2, 20, 3)).copy()
    loss = dp_loss(None, x0, token_batch, sched, np.random.default_rng(0), noise_fn=_exact_eps(sched))
    assert loss == pytest.approx(0.0, abs=1e-20)


@pytest.mark.parametrize("sampler", ["ddpm", "ddim"])
def test_exact_predictor_recovers_target(sampler):
    sched = make_schedule(10, 1e-3, 0.2)
    rng = np.random.default_rng(1)
    if sampler == "ddpm":
        out = ddpm_sample(None, None, 4, sched, rng, noise_fn=_exact_eps(sched))
    else:
        out = ddim_sample(None, None, 4, sched, 5, rng, noise_fn=_exact_eps(sched))
    assert out.shape == (4, 20, 3)
    np.testing.assert_allclose(out, np.broadcast_to(TARGET, out.shape), atol=1e-9)


def test_ddim_20_matches_ddpm_100_channel_means():
    settings = DiffusionSettings()
    sched = make_schedule(settings.steps, settings.beta_min, settings.beta_max)
    eps = _exact_eps(sched)
    full = ddpm_sample(None, None, 64, sched, np.random.default_rng(2), noise_fn=eps)
    fast = ddim_sample(None, None, 64, sched, settings.ddim_steps, np.random.default_rng(2), noise_fn=eps)
    np.testing.assert_allclose(full.mean(axis=(0, 1)), TARGET[0], atol=0.05)
    np.testing.assert_allclose(fast.mean(axis=(0, 1)), full.mean(axis=(0, 1)), atol=0.05)


@pytest.mark.parametrize("sampler", ["ddpm", "ddim"])
def test_proposal_stream_does_not_depend_on_count(tiny_model, token_batch, sampler):
    sched = tiny_model.schedule
    few = sample_proposals(tiny_model.params, token_batch, TINY_DIFFUSION, sched, np.random.default_rng(9),
                           sampler=sampler, n=2)
    many = sample_proposals(tiny_model.params, token_batch, TINY_DIFFUSION, sched, np.random.default_rng(9),
                            sampler=sampler, n=5)
    np.testing.assert_allclose(many[:2], few, atol=1e-12)
    assert np.all(np.abs(many) <= 1.0)


def test_sampling_is_seeded(tiny_model, token_batch):
    draw = lambda seed: sample_proposals(tiny_model.params, token_batch, TINY_DIFFUSION, tiny_model.schedule,
                                         np.random.default_rng(seed))
    np.testing.assert_array_equal(draw(3), draw(3))
    assert draw(3).shape == (TINY_DIFFUSION.proposals, 20, 3)
    assert not np.array_equal(draw(3), draw(4))


def test_ddim_timesteps_are_evenly_spaced():
    assert ddim_timesteps(100, 20).tolist() == list(range(100, 0, -5))
    assert ddim_timesteps(10, 10).tolist() == list(range(10, 0, -1))
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)


def test_noise_predictor_gradients(token_batch):
    params = ParamStore.initialize(dp_param_specs(TINY_ARCH, 20), np.random.default_rng(0))
    x0 = np.random.default_rng(1).uniform(-1, 1, size=(2, 20, 3))
    sched = make_schedule(10, 1e-3, 0.2)

    def loss_fn(p):
        return dp_loss_and_grad(p, x0, token_batch, sched, np.random.default_rng(2))

    report = grad_check(loss_fn, params, h=1e-6, max_entries=8)
    assert report.passed(1e-4), report.errors


def test_decode_proposal_channels():
    x = np.zeros((20, 3))
    x[:, 0] = -0.5
    x[0] = [0.0, 1.0, -0.4]
    seq = decode_proposal(x)
    assert seq.frequency == 10 and len(seq) == 20
    first, second = seq.controls[0], seq.controls[1]
    assert (first.brake, first.throttle, first.steer) == (1, 1.0, pytest.approx(-0.4))
    assert (second.brake, second.throttle, second.steer) == (0, 0.5, 0.0)
    np.testing.assert_allclose(encode_controls(seq)[1], [-1.0, 0.0, 0.0])
