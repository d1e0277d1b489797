import json
import math

import numpy as np
import pytest

from s2me.config import TrainConfig
from s2me.errors import CheckpointError, ConfigError, MissingCheckpointError
from s2me.evaluation import evaluate_dataset
from s2me.numerics import Parameter
from s2me.trainer import (
    SGD,
    Trainer,
    TrainingState,
    checkpoint_load,
    checkpoint_save,
    poly_lr,
    sgd_step,
    train,
    train_seeds,
)


def test_poly_lr_values():
    assert poly_lr(0, 3000, 0.03) == pytest.approx(0.03, abs=1e-6)
    assert poly_lr(1500, 3000, 0.03) == pytest.approx(0.016077, abs=1e-6)
    assert poly_lr(3000, 3000, 0.03) == 0.0
    with pytest.raises(ValueError):
        poly_lr(3001, 3000, 0.03)
    with pytest.raises(ValueError):
        poly_lr(0, 0, 0.03)


def test_sgd_two_steps_by_hand():
    first = sgd_step([np.array([1.0])], [np.array([1.0])], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert first.accepted
    np.testing.assert_allclose(first.buffers[0], [1.0])
    np.testing.assert_allclose(first.params[0], [0.9])

    second = sgd_step(first.params, [np.array([1.0])], lr=0.1, momentum=0.9, weight_decay=0.0, buffers=first.buffers)
    np.testing.assert_allclose(second.buffers[0], [1.9])
    np.testing.assert_allclose(second.params[0], [0.71])


def test_sgd_weight_decay():
    result = sgd_step([np.array([2.0])], [np.array([0.0])], lr=1.0, momentum=0.0, weight_decay=0.5)
    np.testing.assert_allclose(result.params[0], [1.0])


def test_sgd_rejects_non_finite_gradients():
    params, buffers = [np.array([1.0, 2.0])], [np.array([0.5, 0.5])]
    result = sgd_step(params, [np.array([np.nan, 0.0])], lr=0.1, momentum=0.9, weight_decay=0.0, buffers=buffers)
    assert not result.accepted
    np.testing.assert_array_equal(result.params[0], [1.0, 2.0])
    np.testing.assert_array_equal(result.buffers[0], [0.5, 0.5])


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step([np.zeros(2)], [np.zeros(3)], lr=0.1, momentum=0.0, weight_decay=0.0)


def test_optimizer_clips_and_counts_rejections():
    p = Parameter(np.zeros(2), name="p")
    optimizer = SGD([("p", p)], momentum=0.0, weight_decay=0.0, grad_clip=1.0)
    p.grad = np.array([3.0, 4.0], dtype=np.float32)
    assert optimizer.step(1.0)
    np.testing.assert_allclose(p.data, [-0.6, -0.8], rtol=1e-6)

    p.grad = np.array([np.inf, 0.0], dtype=np.float32)
    assert not optimizer.step(1.0)
    assert optimizer.rejected_steps == 1
    np.testing.assert_allclose(p.data, [-0.6, -0.8], rtol=1e-6)


def test_checkpoint_paths(tmp_path):
    state = TrainingState(
        models={"spa": {}, "spe": {}},
        optimizers={"spa": {}, "spe": {}},
        iteration=0,
        best_val_dsc=-1.0,
        best_iteration=-1,
        config_hash="x",
        config={},
        rng_state={},
    )
    with pytest.raises(CheckpointError):
        checkpoint_save("", state)
    with pytest.raises(MissingCheckpointError):
        checkpoint_load(tmp_path / "nothing.s2tf")


def test_tiny_run_writes_outputs(tiny_dataset, tiny_config, tmp_path):
    result = train(tiny_config, tiny_dataset, tmp_path)
    for name in ("spatial.s2tf", "spatial.json", "spectral.s2tf", "spectral.json", "summary.json", "checkpoint.s2tf", "train_log.jsonl"):
        assert (tmp_path / name).exists(), name

    assert [r["iter"] for r in result.log] == [0, 1, 2, 3]
    assert {"iter", "lr", "lambda", "loss_total", "loss_scrib", "loss_mt", "loss_el"} <= set(result.log[0])
    assert [("val_dsc" in r) for r in result.log] == [False, True, False, True]
    assert result.log[0]["lr"] == pytest.approx(tiny_config.lr0)
    assert result.log[0]["lambda"] == pytest.approx(5.0 * math.exp(-5.0))
    assert all(np.isfinite(r["loss_total"]) for r in result.log)
    assert 0.0 <= result.best_val_dsc <= 1.0

    with open(tmp_path / "train_log.jsonl") as f:
        assert [json.loads(line)["iter"] for line in f] == [0, 1, 2, 3]
    with open(tmp_path / "summary.json") as f:
        summary = json.load(f)
    assert summary["iterations"] == 4
    assert summary["config_hash"] == tiny_config.config_hash()


def test_runs_are_deterministic(tiny_dataset, tiny_config, tmp_path):
    train(tiny_config, tiny_dataset, tmp_path / "a")
    train(tiny_config, tiny_dataset, tmp_path / "b")
    for name in ("spatial.s2tf", "spectral.s2tf"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_and_log_bytes_are_deterministic(tiny_dataset, tiny_config, tmp_path):
    train(tiny_config, tiny_dataset, tmp_path / "a")
    train(tiny_config, tiny_dataset, tmp_path / "b")
    for name in ("checkpoint.s2tf", "checkpoint.json", "spatial.json", "spectral.json", "train_log.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_scribble_only_run_logs_zero_lambda(tiny_dataset, tiny_config, tmp_path):
    config = TrainConfig(**{**tiny_config.to_dict(), "loss_terms": ("scrib",)})
    result = train(config, tiny_dataset, tmp_path)
    assert [r["lambda"] for r in result.log] == [0.0] * len(result.log)
    assert all(r["loss_total"] == pytest.approx(r["loss_scrib"]) for r in result.log)


def test_scribble_loss_decreases(tiny_dataset, tiny_config, tmp_path):
    config = TrainConfig(**{**tiny_config.to_dict(), "iterations": 40, "batch_size": 4, "eval_every": 40, "ramp_iters": 40, "loss_terms": tiny_config.loss_terms})
    train(config, tiny_dataset, tmp_path)
    with open(tmp_path / "train_log.jsonl") as f:
        scrib = [json.loads(line)["loss_scrib"] for line in f]
    assert len(scrib) == 40
    assert np.mean(scrib[-4:]) < np.mean(scrib[:4])
    with open(tmp_path / "summary.json") as f:
        summary = json.load(f)
    assert summary["loss_scrib_first"] == pytest.approx(np.mean(scrib[:4]))
    assert summary["loss_scrib_last"] == pytest.approx(np.mean(scrib[-4:]))


def test_evaluation_reproduces_the_best_validation_dsc(tiny_dataset, tiny_config, tmp_path):
    result = train(tiny_config, tiny_dataset, tmp_path / "seed-0")
    table = evaluate_dataset(tmp_path, tiny_dataset, split="val", seeds=[0], batch_size=tiny_config.batch_size)
    assert table.per_seed["dsc"].iloc[0] == pytest.approx(result.best_val_dsc, abs=1e-6)


def test_resume_matches_an_unbroken_run(tiny_dataset, tiny_config, tmp_path, monkeypatch):
    unbroken = train(tiny_config, tiny_dataset, tmp_path / "unbroken")

    original = Trainer.train_step

    def interrupted(self):
        if self.iteration == 3:
            raise KeyboardInterrupt
        return original(self)

    monkeypatch.setattr(Trainer, "train_step", interrupted)
    with pytest.raises(KeyboardInterrupt):
        train(tiny_config, tiny_dataset, tmp_path / "resumed")
    monkeypatch.setattr(Trainer, "train_step", original)

    resumed = train(tiny_config, tiny_dataset, tmp_path / "resumed", resume=True)
    assert resumed.log == unbroken.log
    for name in ("spatial.s2tf", "spectral.s2tf"):
        assert (tmp_path / "resumed" / name).read_bytes() == (tmp_path / "unbroken" / name).read_bytes()


def test_resume_with_a_different_config(tiny_dataset, tiny_config, tmp_path):
    train(tiny_config, tiny_dataset, tmp_path)
    changed = TrainConfig(**{**tiny_config.to_dict(), "lr0": 0.01, "loss_terms": tiny_config.loss_terms})
    with pytest.raises(CheckpointError, match="lr0"):
        Trainer(changed, tiny_dataset, tmp_path).resume()
    assert Trainer(changed, tiny_dataset, tmp_path).resume(force=True)


def test_longer_schedule_may_resume(tiny_dataset, tiny_config, tmp_path):
    train(tiny_config, tiny_dataset, tmp_path)
    longer = TrainConfig(**{**tiny_config.to_dict(), "iterations": 6, "loss_terms": tiny_config.loss_terms})
    trainer = Trainer(longer, tiny_dataset, tmp_path)
    assert trainer.resume()
    assert trainer.iteration == 4


def test_indivisible_image_size(tiny_dataset, tmp_path):
    with pytest.raises(ConfigError, match="divisible"):
        Trainer(TrainConfig(depth=6, base_width=2), tiny_dataset, tmp_path)


def test_train_seeds_records_failures(tiny_dataset, tiny_config, tmp_path, monkeypatch):
    def boom(self):
        raise RuntimeError("disk full")

    monkeypatch.setattr(Trainer, "train_step", boom)
    results = train_seeds(tiny_config, tiny_dataset, tmp_path, seeds=[0, 1])
    assert results == {0: {"error": "disk full"}, 1: {"error": "disk full"}}
    assert (tmp_path / "seed-0").is_dir() and (tmp_path / "seed-1").is_dir()
