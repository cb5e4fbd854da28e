"""
Evaluation Metrics
mIoU, RMSE, mean angular error, fixed-threshold boundary F1, and the
multi-task relative improvement Δ_m

Each metric is computed from additive statistics so evaluation can
accumulate over batches in a fixed order and finish once.
"""

from typing import Dict

import numpy as np

from mtscan.errors import ConfigError
from mtscan.models import MetricEntry, MetricReport, TaskSpec

BOUNDARY_THRESHOLD = 0.5


# ============================================================================
# Sufficient statistics
# ============================================================================

def iou_stats(pred: np.ndarray, target: np.ndarray, classes: int) -> np.ndarray:
    """[classes, 2] intersection and union pixel counts"""
    stats = np.zeros((classes, 2), dtype=np.int64)
    for c in range(classes):
        p, t = pred == c, target == c
        stats[c] = (np.count_nonzero(p & t), np.count_nonzero(p | t))
    return stats


def squared_error_stats(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    diff = pred.astype(np.float64) - target
    return np.array([np.sum(diff * diff), diff.size], dtype=np.float64)


def angular_error_stats(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Sum of per-pixel angles in degrees and pixel count; vectors on axis 1"""
    pred = pred.astype(np.float64)
    pred = pred / np.maximum(np.linalg.norm(pred, axis=1, keepdims=True), 1e-12)
    cosine = np.clip(np.sum(pred * target, axis=1), -1.0, 1.0)
    angles = np.degrees(np.arccos(cosine))
    return np.array([angles.sum(), angles.size], dtype=np.float64)


def f1_stats(positive_prob: np.ndarray, target: np.ndarray) -> np.ndarray:
    """True positive, predicted positive and actual positive counts"""
    pred = positive_prob > BOUNDARY_THRESHOLD
    actual = target.astype(bool)
    return np.array([np.count_nonzero(pred & actual), np.count_nonzero(pred), np.count_nonzero(actual)],
                    dtype=np.int64)


def miou_from_stats(stats: np.ndarray) -> float:
    present = stats[:, 1] > 0
    if not present.any():
        return 1.0
    return float(np.mean(stats[present, 0] / stats[present, 1]))


def f1_from_stats(stats: np.ndarray) -> float:
    tp, predicted, actual = (int(v) for v in stats)
    if predicted == 0 and actual == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = tp / predicted, tp / actual
    return 2 * precision * recall / (precision + recall)


# ============================================================================
# Single-batch metrics
# ============================================================================

def miou(pred: np.ndarray, target: np.ndarray, classes: int) -> float:
    """Mean IoU over the classes present in prediction or target"""
    return miou_from_stats(iou_stats(pred, target, classes))


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    total, count = squared_error_stats(pred, target)
    return float(np.sqrt(total / count))


def mean_angular_error(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean angle in degrees between (normalized) predicted and target normals"""
    total, count = angular_error_stats(pred, target)
    return float(total / count)


def boundary_f1(positive_prob: np.ndarray, target: np.ndarray) -> float:
    """F1 of (prob > 0.5) against the boundary map, exact pixel match"""
    return f1_from_stats(f1_stats(positive_prob, target))


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


class MetricAccumulator:
    """Accumulates one task's statistics over evaluation batches"""

    def __init__(self, task: TaskSpec):
        self.task = task
        self.stats = None

    def update(self, pred: np.ndarray, target: np.ndarray) -> None:
        """
        Args:
            pred: Raw head output [B, out_dim, H, W]
            target: Task target as produced by data.task_target
        """
        metric = self.task.metric
        if metric == "miou":
            batch_stats = iou_stats(pred.argmax(axis=1), target, self.task.out_dim)
        elif metric == "rmse":
            batch_stats = squared_error_stats(pred, target)
        elif metric == "mean-angular-error":
            batch_stats = angular_error_stats(pred, target)
        else:
            batch_stats = f1_stats(_softmax(pred, axis=1)[:, 1], target)
        self.stats = batch_stats if self.stats is None else self.stats + batch_stats

    def value(self) -> float:
        metric = self.task.metric
        if self.stats is None:
            raise ValueError(f"no batches accumulated for task {self.task.name}")
        if metric == "miou":
            return miou_from_stats(self.stats)
        if metric == "rmse":
            return float(np.sqrt(self.stats[0] / self.stats[1]))
        if metric == "mean-angular-error":
            return float(self.stats[0] / self.stats[1])
        return f1_from_stats(self.stats)

    def entry(self) -> MetricEntry:
        return MetricEntry(name=self.task.name, metric=self.task.metric,
                           value=self.value(), higher_better=self.task.higher_better)


# ============================================================================
# Multi-task relative improvement
# ============================================================================

def delta_m(mtl: MetricReport, stl: MetricReport) -> float:
    """
    (100 / T) * sum_t (-1)^s_t (M_t - S_t) / S_t, s_t = 0 when higher is better

    Raises:
        ConfigError: task lists, scales or direction flags differ, or an STL value is zero
    """
    if mtl.task_names != stl.task_names:
        raise ConfigError(f"task lists differ: {mtl.task_names} vs {stl.task_names}")
    if mtl.scale != stl.scale:
        raise ConfigError(f"report scales differ: {mtl.scale} vs {stl.scale}")
    total = 0.0
    for m, s in zip(mtl.entries, stl.entries):
        if m.higher_better != s.higher_better:
            raise ConfigError(f"task {m.name}: higher_better flags differ")
        if s.value == 0:
            raise ConfigError(f"task {m.name}: single-task metric is zero")
        sign = 1.0 if m.higher_better else -1.0
        total += sign * (m.value - s.value) / s.value
    return 100.0 * total / len(mtl.entries)


def report_as_dict(report: MetricReport) -> Dict[str, float]:
    return {entry.name: entry.value for entry in report.entries}
