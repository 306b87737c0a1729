import numpy as np
import pytest

from core.errors import ShapeError, VocabularyError
from core.schemas import ControlTuple, DiscreteControl
from src.heads import (
    CtrlHeadOutput, MetricWeights, TrajHeadOutput, TrajectoryVocabulary, _cross_entropy_and_grad,
    _focal_and_grad, build_vocabulary, ctrl_backward, ctrl_forward, ctrl_loss_and_grad, ctrl_param_specs,
    decode_controls, load_vocabulary, save_vocabulary, select_trajectory, snap_control, traj_backward,
    traj_forward, traj_loss_and_grad, traj_param_specs,
)
from src.kinematics import Trajectory
from src.nn import ParamStore, grad_check
from src.teachers import MetricScores
from tests.conftest import TINY_ARCH, straight_anchor


def _labels(K: int, rng: np.random.Generator) -> MetricScores:
    y = rng.uniform(size=K)
    return MetricScores(
        col=rng.integers(0, 2, K), slk=rng.integers(0, 2, K), ep=rng.integers(0, 2, K),
        ep_ratio=rng.uniform(size=K), y_imitation=y / y.sum(),
    )


def test_traj_head_gradients(tiny_vocab, token_batch):
    params = ParamStore.initialize(traj_param_specs(TINY_ARCH, tiny_vocab.anchor_dim), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    labels = [_labels(len(tiny_vocab), rng) for _ in range(len(token_batch))]

    def loss_fn(p):
        out = traj_forward(p, token_batch, tiny_vocab)
        loss, grad = traj_loss_and_grad(out, labels)
        return loss, traj_backward(p, out, grad)

    report = grad_check(loss_fn, params, h=1e-6, max_entries=8)
    assert report.passed(1e-4), report.errors


def test_traj_output_shapes(tiny_vocab, token_batch, tiny_model):
    out = traj_forward(tiny_model.params, token_batch, tiny_vocab)
    assert out.logits.shape == (2, 4, 4)
    np.testing.assert_allclose(out.s_im.sum(axis=-1), 1.0)
    assert np.all((out.s_metrics > 0) & (out.s_metrics < 1))


def test_traj_labels_must_match_vocabulary(tiny_vocab, token_batch, tiny_model):
    out = traj_forward(tiny_model.params, token_batch, tiny_vocab)
    with pytest.raises(ShapeError):
        traj_loss_and_grad(out, [_labels(3, np.random.default_rng(0))] * 2)


def test_selection_tie_picks_lowest_anchor(tiny_vocab):
    out = TrajHeadOutput(np.zeros((1, 4, 4)))
    traj, index = select_trajectory(out, MetricWeights(), tiny_vocab)
    assert index == 0
    np.testing.assert_array_equal(traj.waypoints, tiny_vocab.anchors[0])


def test_selection_weights_metrics(tiny_vocab):
    logits = np.zeros((1, 4, 4))
    logits[0, 2, 0] = 3.0        # imitation prefers anchor 2
    logits[0, 2, 1] = -20.0      # but it is predicted to collide
    _, index = select_trajectory(TrajHeadOutput(logits), MetricWeights(), tiny_vocab)
    assert index != 2
    _, index = select_trajectory(TrajHeadOutput(logits), MetricWeights(col=0.0), tiny_vocab)
    assert index == 2


def test_ctrl_head_gradients(token_batch):
    params = ParamStore.initialize(ctrl_param_specs(TINY_ARCH), np.random.default_rng(2))
    rng = np.random.default_rng(3)
    targets = np.stack([rng.integers(0, 2, (2, 6)), rng.integers(0, 5, (2, 6)), rng.integers(0, 21, (2, 6))],
                       axis=-1)

    def loss_fn(p):
        out = ctrl_forward(p, token_batch)
        loss, grads = ctrl_loss_and_grad(out, targets, gamma=2.0)
        return loss, ctrl_backward(p, out, grads)

    report = grad_check(loss_fn, params, h=1e-6, max_entries=8)
    assert report.passed(1e-4), report.errors


def test_focal_without_gamma_is_cross_entropy():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 6, 2))
    target = rng.integers(0, 2, (3, 6))
    focal, focal_grad = _focal_and_grad(logits, target, 0.0)
    ce, ce_grad = _cross_entropy_and_grad(logits, target)
    assert focal == pytest.approx(ce)
    np.testing.assert_allclose(focal_grad, ce_grad, atol=1e-12)


def test_focal_gradient_matches_finite_difference():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(4, 2))
    target = np.array([0, 1, 1, 0])
    _, grad = _focal_and_grad(logits, target, 2.0)
    h = 1e-6
    for idx in np.ndindex(logits.shape):
        bumped = logits.copy()
        bumped[idx] += h
        plus, _ = _focal_and_grad(bumped, target, 2.0)
        bumped[idx] -= 2 * h
        minus, _ = _focal_and_grad(bumped, target, 2.0)
        assert grad[idx] == pytest.approx((plus - minus) / (2 * h), rel=1e-5, abs=1e-9)


def test_focal_downweights_easy_examples():
    easy = np.array([[4.0, -4.0]])
    focal, _ = _focal_and_grad(easy, np.array([0]), 2.0)
    ce, _ = _cross_entropy_and_grad(easy, np.array([0]))
    assert focal < ce * 1e-3


def test_ctrl_targets_must_match_steps(token_batch, tiny_model):
    out = ctrl_forward(tiny_model.params, token_batch)
    with pytest.raises(ShapeError):
        ctrl_loss_and_grad(out, np.zeros((2, 4, 3), dtype=np.int64))


def test_decode_controls_is_2hz_argmax():
    brake = np.zeros((1, 6, 2))
    throttle = np.zeros((1, 6, 5))
    steer = np.zeros((1, 6, 21))
    brake[0, :, 1] = 1.0
    brake[0, 0] = [1.0, 0.0]
    throttle[0, :, 3] = 1.0
    steer[0, :, 15] = 1.0
    seq = decode_controls(CtrlHeadOutput(brake, throttle, steer))
    assert seq.frequency == 2 and len(seq.controls) == 6
    assert seq.controls[0].brake == 0 and seq.controls[1].brake == 1
    assert seq.controls[0].throttle == 0.75
    assert seq.controls[0].steer == pytest.approx(0.5)


def test_snap_control():
    assert snap_control(ControlTuple(brake=1, throttle=0.0, steer=0.04)) == DiscreteControl(
        brake_class=1, throttle_bin=0, steer_bin=10)
    assert snap_control(ControlTuple(throttle=0.6, steer=0.07)).steer_bin == 11
    assert snap_control(ControlTuple(throttle=0.6, steer=-1.0)).throttle_bin == 2
    # exact tie between bins 0 and 1
    assert snap_control(ControlTuple(throttle=0.125)).throttle_bin == 0


def _demos():
    demos = []
    rng = np.random.default_rng(0)
    for speed in (0.0, 4.0, 8.0):
        for _ in range(5):
            demos.append(Trajectory(straight_anchor(speed + rng.normal(0, 0.05), rng.normal(0, 0.05)), 0.5))
    return demos


def test_build_vocabulary_is_seeded():
    vocab = build_vocabulary(_demos(), K=3, seed=1, iterations=20)
    assert vocab.anchors.shape == (3, 6, 3)
    finals = vocab.anchors[:, -1, 0]
    assert np.all((finals > -0.5) & (finals < 24.5))
    again = build_vocabulary(_demos(), K=3, seed=1, iterations=20)
    np.testing.assert_array_equal(vocab.anchors, again.anchors)


def test_build_vocabulary_rejects_too_few_demos():
    with pytest.raises(VocabularyError):
        build_vocabulary(_demos()[:2], K=3, seed=0)
    same = [Trajectory(straight_anchor(3.0), 0.5)] * 5
    with pytest.raises(VocabularyError, match="distinct"):
        build_vocabulary(same, K=2, seed=0)


def test_vocabulary_rejects_duplicate_anchors():
    with pytest.raises(VocabularyError, match="distinct"):
        TrajectoryVocabulary(np.stack([straight_anchor(1.0)] * 2))


def test_vocabulary_file_round_trip(tmp_path, tiny_vocab):
    loaded = load_vocabulary(save_vocabulary(tiny_vocab, tmp_path / "vocab.json"))
    np.testing.assert_array_equal(loaded.anchors, tiny_vocab.anchors)
    assert loaded.dt == 0.5 and len(loaded) == 4

    broken = tmp_path / "broken.json"
    broken.write_text("{}")
    with pytest.raises(VocabularyError):
        load_vocabulary(broken)
