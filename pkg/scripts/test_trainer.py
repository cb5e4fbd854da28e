"""
Tests for training, evaluation, run directories and single-task baselines
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mtscan import trainer
from mtscan.data import make_dataset
from mtscan.errors import CheckpointError, ConfigError, DivergenceError
from mtscan.models import ModelConfig, TaskSpec, default_tasks
from mtscan.tensor import Tensor
from mtscan.trainer import (
    evaluate,
    load_model,
    read_metric_log,
    train,
    train_single_task_baselines,
)


def tiny_config(**overrides):
    tasks = [t for t in default_tasks(2) if t.name in ("semseg", "depth")]
    values = dict(C=4, N=2, K=2, tasks=tasks, dtype="f64", seed=5)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture(scope="module")
def scenes():
    return make_dataset(seed=5, count=4, height=32, width=32, num_classes=2)


class TestTrain:
    def test_writes_run_directory(self, scenes, tmp_path):
        result = train(tiny_config(), scenes, steps=2, batch_size=2, eval_interval=1, out_dir=tmp_path)
        assert len(result.losses) == 2
        assert all(np.isfinite(result.losses))
        assert result.checkpoint_path == tmp_path / trainer.CHECKPOINT_NAME
        assert (tmp_path / trainer.CONFIG_NAME).exists()
        records = read_metric_log(tmp_path / trainer.METRICS_NAME)
        assert [(r.step, r.task) for r in records] == [(1, "semseg"), (1, "depth"), (2, "semseg"), (2, "depth")]
        assert result.evaluation.report.task_names == ["semseg", "depth"]
        assert result.evaluation.report.step == 2

    def test_nothing_written_without_out_dir(self, scenes):
        result = train(tiny_config(), scenes, steps=1, batch_size=2)
        assert result.checkpoint_path is None and result.metrics_path is None

    def test_same_seed_same_losses(self, scenes):
        a = train(tiny_config(), scenes, steps=2, batch_size=2)
        b = train(tiny_config(), scenes, steps=2, batch_size=2)
        assert a.losses == b.losses

    def test_rejects_zero_steps(self, scenes):
        with pytest.raises(ValueError):
            train(tiny_config(), scenes, steps=0)

    def test_rejects_tasks_without_labels(self, scenes):
        saliency = TaskSpec(name="saliency", out_dim=1, loss="l1", metric="rmse", higher_better=False)
        with pytest.raises(ConfigError):
            train(tiny_config(tasks=[saliency]), scenes, steps=1)

    def test_divergence(self, scenes, monkeypatch):
        monkeypatch.setattr(trainer, "task_loss", lambda task, pred, target: Tensor(np.array(np.nan)))
        with pytest.raises(DivergenceError) as info:
            train(tiny_config(), scenes, steps=3, batch_size=2)
        assert "step 0" in str(info.value)


class TestEvaluate:
    def test_deterministic_and_restores_mode(self, scenes):
        model = train(tiny_config(), scenes, steps=1, batch_size=2).model
        model.train()
        first = evaluate(model, scenes, batch_size=3)
        second = evaluate(model, scenes, batch_size=3)
        assert first.report == second.report
        assert first.loss == second.loss
        assert model.training

    def test_empty_scene_list(self, scenes):
        model = train(tiny_config(), scenes, steps=1, batch_size=2).model
        with pytest.raises(ValueError):
            evaluate(model, [])


class TestRunDirectory:
    def test_load_model_reproduces_predictions(self, scenes, tmp_path):
        result = train(tiny_config(), scenes, steps=1, batch_size=2, out_dir=tmp_path)
        restored = load_model(tmp_path)
        assert restored.config == result.model.config
        assert evaluate(restored, scenes).report == evaluate(result.model, scenes).report

    def test_missing_config(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_model(tmp_path)


def test_single_task_baselines(scenes):
    report = train_single_task_baselines(tiny_config(), scenes, steps=1, batch_size=2)
    assert report.task_names == ["semseg", "depth"]
    assert all(np.isfinite(e.value) for e in report.entries)
