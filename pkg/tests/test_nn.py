import numpy as np
import pytest

from core.errors import CheckpointError, NonFiniteError, ShapeError, TapeError
from src.nn import (
    AdamWHyper, ParamStore, Tape, attention_specs, attention_weights, backward, cosine_lr, forward,
    grad_check, linear_specs, load_checkpoint, masked_softmax, mlp_backward, mlp_forward, optimizer_step,
    save_checkpoint,
)

WIDTH = 6
QUERIES = 3


@pytest.fixture
def attn_params():
    params = ParamStore.initialize(attention_specs("traj", QUERIES, WIDTH), np.random.default_rng(1))
    params.arrays["traj.b_in"] = np.random.default_rng(2).normal(0, 0.1, WIDTH)
    return params


def test_initialize_is_seeded_and_sorted():
    specs = attention_specs("ctrl", 2, 4)
    a = ParamStore.initialize(specs, np.random.default_rng(0))
    b = ParamStore.initialize(dict(reversed(list(specs.items()))), np.random.default_rng(0))
    for name in specs:
        np.testing.assert_array_equal(a[name], b[name])
    assert np.all(a["ctrl.b_in"] == 0)


def test_missing_parameter_is_shape_error(attn_params):
    with pytest.raises(ShapeError, match="missing parameter"):
        attn_params["dp.W0"]


def test_masked_softmax_ignores_masked_entries():
    scores = np.array([[1.0, 2.0, 100.0], [0.0, 0.0, 0.0]])
    mask = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    out = masked_softmax(scores, mask)
    assert out[0, 2] == 0.0
    assert out[0].sum() == pytest.approx(1.0)
    assert out[0, 1] > out[0, 0]
    np.testing.assert_array_equal(out[1], 0.0)


def test_attention_gradients(attn_params, token_batch):
    target = np.random.default_rng(5).normal(size=(len(token_batch), QUERIES, WIDTH))

    def loss_fn(params):
        features, tape = forward(params, token_batch, "traj")
        return float((features * target).sum()), backward(params, tape, target)

    report = grad_check(loss_fn, attn_params, h=1e-6)
    assert report.passed(1e-4), report.errors


def test_attention_query_input_gradient(attn_params, token_batch):
    target = np.random.default_rng(6).normal(size=(len(token_batch), QUERIES, WIDTH))
    query_input = np.random.default_rng(7).normal(size=(QUERIES, WIDTH))

    features, tape = forward(attn_params, token_batch, "traj", query_input)
    _, d_query = backward(attn_params, tape, target, query_grad=True)

    h = 1e-6
    for q, d in [(0, 0), (1, 3), (2, 5)]:
        bumped = query_input.copy()
        bumped[q, d] += h
        plus = (forward(attn_params, token_batch, "traj", bumped)[0] * target).sum()
        bumped[q, d] -= 2 * h
        minus = (forward(attn_params, token_batch, "traj", bumped)[0] * target).sum()
        assert d_query[q, d] == pytest.approx((plus - minus) / (2 * h), rel=1e-4, abs=1e-7)


def test_attention_is_token_permutation_invariant(attn_params, token_batch):
    n = token_batch.x.shape[1]
    order = np.random.default_rng(3).permutation(n)
    a, _ = forward(attn_params, token_batch, "traj")
    b, _ = forward(attn_params, token_batch.permuted(order), "traj")
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_masked_tokens_get_no_attention(attn_params, token_batch):
    _, tape = forward(attn_params, token_batch, "traj")
    weights = attention_weights(tape)
    masked = token_batch.mask[:, None, :].repeat(QUERIES, axis=1) == 0
    assert np.all(weights[masked] == 0)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0)


def test_tape_is_single_use(attn_params, token_batch):
    features, tape = forward(attn_params, token_batch, "traj")
    backward(attn_params, tape, np.ones_like(features))
    with pytest.raises(TapeError):
        backward(attn_params, tape, np.ones_like(features))
    with pytest.raises(TapeError):
        Tape("mlp").consume("attention")


def test_wrong_feature_width_is_shape_error(attn_params, token_batch):
    bad = type(token_batch)(token_batch.x[..., :-1], token_batch.mask, token_batch.ego)
    with pytest.raises(ShapeError, match="traj.W_in"):
        forward(attn_params, bad, "traj")


def test_mlp_gradients():
    params = ParamStore.initialize(linear_specs("head", [4, 5, 3]), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(7, 4))
    target = np.random.default_rng(2).normal(size=(7, 3))

    def loss_fn(p):
        out, cache = mlp_forward(p, "head", x, 2)
        grads = {}
        mlp_backward(p, "head", cache, target, grads)
        return float((out * target).sum()), grads

    assert grad_check(loss_fn, params, h=1e-6).passed(1e-4)


def test_cosine_schedule():
    assert cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
    assert cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4)
    assert cosine_lr(1e-3, 100, 100, min_lr=1e-5) == pytest.approx(1e-5)
    assert cosine_lr(1e-3, 7, 0) == 1e-3


def test_optimizer_rejects_non_finite_gradient():
    params = ParamStore({"w": np.ones(3)})
    with pytest.raises(NonFiniteError, match="'w'"):
        optimizer_step(params, {"w": np.array([0.0, np.nan, 1.0])}, 1e-3, AdamWHyper())
    assert params.step == 0
    np.testing.assert_array_equal(params["w"], 1.0)


def test_zero_gradient_only_decays():
    params = ParamStore({"w": np.full(2, 2.0)})
    optimizer_step(params, {"w": np.zeros(2)}, 0.1, AdamWHyper(weight_decay=0.5))
    np.testing.assert_allclose(params["w"], 2.0 - 0.1 * 0.5 * 2.0)


def test_optimizer_moves_against_gradient():
    params = ParamStore({"w": np.zeros(2)})
    optimizer_step(params, {"w": np.array([1.0, -1.0])}, 0.01, AdamWHyper(weight_decay=0.0))
    np.testing.assert_allclose(params["w"], [-0.01, 0.01], rtol=1e-6)


def test_checkpoint_round_trip(tmp_path, attn_params):
    path = save_checkpoint(tmp_path / "m.ckpt", attn_params, {"config_hash": "abc", "epoch": 3})
    loaded, meta = load_checkpoint(path)
    assert meta == {"config_hash": "abc", "epoch": 3}
    assert loaded.names() == attn_params.names()
    for name in attn_params.names():
        np.testing.assert_array_equal(loaded[name], attn_params[name])


def test_checkpoint_errors(tmp_path, attn_params):
    with pytest.raises(CheckpointError, match="does not exist"):
        load_checkpoint(tmp_path / "missing.ckpt")

    bad_magic = tmp_path / "bad.ckpt"
    bad_magic.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(bad_magic)

    data = save_checkpoint(tmp_path / "ok.ckpt", attn_params).read_bytes()
    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(truncated)

    trailing = tmp_path / "long.ckpt"
    trailing.write_bytes(data + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(trailing)
