"""
Tests for task losses, evaluation metrics and Δ_m
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mtscan.errors import ConfigError, ShapeError
from mtscan.losses import boundary_weights, cross_entropy, l1_loss, task_loss
from mtscan.metrics import (
    MetricAccumulator,
    boundary_f1,
    delta_m,
    mean_angular_error,
    miou,
    report_as_dict,
    rmse,
)
from mtscan.models import MetricEntry, MetricReport, default_tasks
from mtscan.tensor import Tape, Tensor

TASKS = {t.name: t for t in default_tasks(4)}

# Published four-task rows (mIoU, RMSE, mErr, odsF), percent scale
STL_ROW = (54.32, 0.5166, 19.21, 77.30)
SCTM_ROW = (57.01, 0.4818, 18.27, 79.40)
ATTENTION_ROW = (55.15, 0.4945, 18.72, 79.00)


def report(values, scale="percent"):
    entries = [MetricEntry(name=t.name, metric=t.metric, value=v, higher_better=t.higher_better)
               for t, v in zip(default_tasks(4), values)]
    return MetricReport(entries=entries, scale=scale)


# =============================================================================
# Losses
# =============================================================================

class TestLosses:
    def test_uniform_logits_give_log_k(self):
        logits = Tensor(np.zeros((2, 5, 3, 3)))
        target = np.random.default_rng(0).integers(0, 5, (2, 3, 3))
        np.testing.assert_allclose(cross_entropy(logits, target).item(), np.log(5))

    def test_weighted_cross_entropy_normalizes_by_weights(self):
        logits = np.zeros((1, 2, 1, 2))
        logits[0, 1, 0, 0] = 2.0
        target = np.array([[[1, 0]]])
        # pixel 0: positive target, logits (0, 2); pixel 1: negative target, logits (0, 0)
        expected = (0.95 * np.log1p(np.exp(-2.0)) + 0.05 * np.log(2.0)) / (0.95 + 0.05)
        weighted = cross_entropy(Tensor(logits), target, boundary_weights()).item()
        np.testing.assert_allclose(weighted, expected)

    def test_cross_entropy_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.standard_normal((1, 3, 2, 2)))
        target = rng.integers(0, 3, (1, 2, 2))
        with Tape() as tape:
            tape.watch(logits)
            tape.backward(cross_entropy(logits, target))
        probs = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
        onehot = np.eye(3)[target].transpose(0, 3, 1, 2)
        np.testing.assert_allclose(logits.grad, (probs - onehot) / 4, atol=1e-12)

    def test_cross_entropy_rejects_bad_targets(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))
        with pytest.raises(ShapeError):
            cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 3, 2), dtype=int))

    def test_l1(self):
        pred = Tensor(np.array([[1.0, -1.0]]))
        np.testing.assert_allclose(l1_loss(pred, np.array([[0.0, 1.0]])).item(), 1.5)

    def test_task_loss_dispatch(self):
        depth = task_loss(TASKS["depth"], Tensor(np.ones((1, 1, 2, 2))), np.zeros((1, 1, 2, 2)))
        assert depth.item() == 1.0


# =============================================================================
# Metrics
# =============================================================================

class TestMetrics:
    def test_perfect_predictions(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 5, (2, 8, 8))
        depth = rng.uniform(0, 1, (2, 1, 8, 8))
        normals = rng.standard_normal((2, 3, 8, 8))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        edges = rng.integers(0, 2, (2, 8, 8))
        assert miou(labels, labels, 5) == 1.0
        assert rmse(depth, depth) == 0.0
        assert mean_angular_error(normals * 3.0, normals) == pytest.approx(0.0, abs=1e-5)
        assert boundary_f1(edges.astype(float), edges) == 1.0

    def test_miou_ignores_absent_classes(self):
        pred = np.array([0, 0, 1, 1])
        target = np.array([0, 1, 1, 1])
        # class 0: 1/2, class 1: 2/3; classes 2-4 absent
        assert miou(pred, target, 5) == pytest.approx((0.5 + 2 / 3) / 2)

    def test_opposite_normals(self):
        up = np.zeros((1, 3, 1, 1))
        up[0, 2] = 1.0
        assert mean_angular_error(-up, up) == pytest.approx(180.0)

    def test_boundary_threshold_is_strict(self):
        assert boundary_f1(np.array([0.5]), np.array([1])) == 0.0
        assert boundary_f1(np.array([0.0]), np.array([0])) == 1.0

    def test_accumulator_matches_single_batch(self):
        rng = np.random.default_rng(3)
        pred = rng.standard_normal((4, 1, 6, 6))
        target = rng.standard_normal((4, 1, 6, 6))
        acc = MetricAccumulator(TASKS["depth"])
        acc.update(pred[:3], target[:3])
        acc.update(pred[3:], target[3:])
        assert acc.value() == pytest.approx(rmse(pred, target))

    def test_accumulator_argmax_for_semseg(self):
        target = np.array([[[0, 1], [2, 3]]])
        logits = np.eye(5)[target].transpose(0, 3, 1, 2)
        acc = MetricAccumulator(TASKS["semseg"])
        acc.update(logits, target)
        entry = acc.entry()
        assert entry.value == 1.0 and entry.higher_better

    def test_empty_accumulator(self):
        with pytest.raises(ValueError):
            MetricAccumulator(TASKS["normal"]).value()


# =============================================================================
# Δ_m
# =============================================================================

class TestDeltaM:
    def test_published_cross_task_row(self):
        assert delta_m(report(SCTM_ROW), report(STL_ROW)) == pytest.approx(4.82, abs=0.01)

    def test_published_attention_row(self):
        assert delta_m(report(ATTENTION_ROW), report(STL_ROW)) == pytest.approx(2.63, abs=0.01)

    def test_identical_reports(self):
        assert delta_m(report(STL_ROW), report(STL_ROW)) == 0.0

    def test_lower_is_better_sign(self):
        better_depth = report((54.32, 0.4, 19.21, 77.30))
        assert delta_m(better_depth, report(STL_ROW)) > 0

    def test_task_mismatch(self):
        short = MetricReport(entries=report(STL_ROW).entries[:3], scale="percent")
        with pytest.raises(ConfigError):
            delta_m(short, report(STL_ROW))

    def test_zero_baseline(self):
        with pytest.raises(ConfigError):
            delta_m(report(STL_ROW), report((0.0, 0.5, 19.0, 77.0)))

    def test_scale_mismatch(self):
        fraction = report((0.5701, 0.4818, 18.27, 0.7940), scale="fraction")
        with pytest.raises(ConfigError, match="scales differ"):
            delta_m(fraction, report(STL_ROW))

    def test_fraction_scale_range_check(self):
        with pytest.raises(ValueError):
            report(STL_ROW, scale="fraction")

    def test_report_as_dict(self):
        assert report_as_dict(report(STL_ROW))["depth"] == 0.5166
