import numpy as np
import pytest

from core.errors import CheckpointError, PlannerError
from core.output_writer import read_csv
from src.config import RunConfig
from src.heads import save_vocabulary
from src.nn import load_checkpoint
from src.refine import PlannerModel
from src.scenarios import demo_suite
from src.simloop import collect_demos
from src.training import (
    EVAL_COLUMNS, episode_seed, eval_open, label_frames, load_demos, load_model, run_closed_job, train,
    vocabulary_from_demos,
)
from tests.conftest import make_scenario, make_small_config


def _updated(config: RunConfig, section: str, **values) -> RunConfig:
    data = config.model_dump()
    data[section].update(values)
    return RunConfig.model_validate(data)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Collected demos, vocabulary and a two-epoch checkpoint shared by this module."""
    config = make_small_config(tmp_path_factory.mktemp("run"))
    collect_demos(demo_suite(config.collect.per_family, config.collect.families), config.paths.demos,
                  config.expert, config.sim_params(), config.model.tokenizer, config.config_hash(), config.seed)
    dataset = load_demos(config.paths.demos)
    vocab = vocabulary_from_demos(dataset, config)
    save_vocabulary(vocab, config.paths.vocab)
    model, curve = train(config, dataset, vocab)
    return config, dataset, vocab, model, curve


def test_demo_dataset(trained):
    config, dataset, *_ = trained
    assert set(dataset.scenarios) == {"emergency_brake-seed1000", "free_cruise-seed1000"}
    assert len(dataset) > 0
    assert dataset.config_hash == config.config_hash()
    frame = dataset.frames[0]
    assert frame.tokens.agents.shape == (2, 7)
    assert frame.ctrl_2hz.shape == (6, 3) and frame.ctrl_10hz.shape == (20, 3)
    assert np.all(np.abs(frame.normalized_controls()) <= 1.0)


def test_split_holds_out_whole_scenarios(trained):
    _, dataset, *_ = trained
    train_frames, held = dataset.split(2)
    assert {f.scenario_id for f in held} == {"free_cruise-seed1000"}
    assert {f.scenario_id for f in train_frames} == {"emergency_brake-seed1000"}
    assert len(train_frames) + len(held) == len(dataset)


def test_missing_demo_file(tmp_path):
    with pytest.raises(PlannerError, match="does not exist"):
        load_demos(tmp_path / "none.jsonl")


def test_labels_cover_vocabulary(trained):
    config, dataset, vocab, *_ = trained
    labels = label_frames(dataset.frames[:3], dataset, vocab, config)
    assert len(labels) == 3
    for lab in labels:
        assert lab.stacked().shape == (len(vocab), 3)
        assert lab.y_imitation.sum() == pytest.approx(1.0)


def test_training_writes_curve_and_checkpoints(trained):
    config, _, _, model, curve = trained
    assert [row["epoch"] for row in curve] == [1, 2]
    assert all(np.isfinite(row["total"]) for row in curve)
    assert curve[0]["lr"] == pytest.approx(config.train.lr)
    table = read_csv(config.paths.checkpoint.parent / "loss_curve.csv")
    assert len(table) == 2 and table[0]["config_hash"] == config.config_hash()

    params, meta = load_checkpoint(config.paths.checkpoint)
    assert meta["epoch"] == 2 and meta["config_hash"] == config.config_hash()
    for name in model.params.names():
        np.testing.assert_array_equal(params[name], model.params[name])
    best = config.paths.checkpoint.with_name("model.best.ckpt")
    assert best.exists()


def test_zero_epochs_keeps_initialization(trained, tmp_path):
    config, dataset, vocab, *_ = trained
    config = _updated(_updated(config, "train", epochs=0), "paths", checkpoint=tmp_path / "zero.ckpt")
    model, curve = train(config, dataset, vocab)
    assert curve == []
    init = PlannerModel.initialize(vocab, config.model.arch, config.diffusion, config.seed)
    for name in init.params.names():
        np.testing.assert_array_equal(model.params[name], init.params[name])
    assert (tmp_path / "zero.best.ckpt").exists()


def test_training_is_deterministic(trained, tmp_path):
    config, dataset, vocab, *_ = trained
    config = _updated(_updated(config, "train", epochs=1), "paths", checkpoint=tmp_path / "a.ckpt")
    _, first = train(config, dataset, vocab)
    _, second = train(config, dataset, vocab)
    assert first == second


def test_load_model_rejects_other_dimensions(trained):
    config, *_ = trained
    model = load_model(config)
    assert len(model.vocab) == config.vocab.size
    with pytest.raises(CheckpointError, match="dim mismatch"):
        load_model(_updated(config, "model", width=8))


def test_eval_open_for_expert(trained, tmp_path):
    config, dataset, *_ = trained
    rows = eval_open(config, dataset, None, tmp_path, expert=True)
    overall = rows[-1]
    assert overall["group"] == "overall"
    assert overall["mean_l2"] == 0.0 and overall["brake_accuracy"] == 1.0
    assert overall["col_agreement"] is None
    table = read_csv(tmp_path / "eval_open.csv")
    assert list(table[0]) == list(EVAL_COLUMNS)


def test_eval_open_for_model(trained):
    config, dataset, _, model, _ = trained
    rows = eval_open(config, dataset, model)
    assert [r["group"] for r in rows] == ["free_cruise", "overall"]
    overall = rows[-1]
    assert overall["mean_l2"] >= 0.0
    for key in ("col_agreement", "slk_agreement", "ep_agreement", "brake_accuracy"):
        assert 0.0 <= overall[key] <= 1.0


def test_episode_seed():
    assert episode_seed(0, 1) == episode_seed(0, 1)
    assert episode_seed(0, 1) != episode_seed(1, 0)


def test_run_closed_job_expert(trained):
    config, *_ = trained
    job = (make_scenario(), config.with_overrides(mode="expert").model_dump_json())
    log, error = run_closed_job(job)
    assert error is None
    assert log.header["policy"] == "expert"
    assert log.outcome["success"]


def test_run_closed_job_learned(trained):
    config, *_ = trained
    job = (make_scenario(time_limit=2.0), config.with_overrides(mode="traj").model_dump_json())
    log, error = run_closed_job(job)
    assert error is None
    assert log.header["policy"] == "traj"
    assert len(log.steps) == 20
    assert log.outcome["mean_l2"] is not None
    assert all("trajectory" in step["diagnostics"] for step in log.steps)
