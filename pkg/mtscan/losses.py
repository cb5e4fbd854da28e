"""
Task Losses
Cross-entropy for label maps, L1 for depth and normals
"""

from typing import Optional, Sequence

import numpy as np

from mtscan import tensor as T
from mtscan.config import Config
from mtscan.errors import ShapeError
from mtscan.models import TaskSpec
from mtscan.tensor import Tensor


def cross_entropy(logits: Tensor, target: np.ndarray, class_weights: Optional[Sequence[float]] = None) -> Tensor:
    """
    Mean over pixels of -log softmax(logits)[target]

    With class_weights the mean is weighted by w[target] and normalized by
    the summed weights.

    Args:
        logits: Tensor[B, K, H, W]
        target: int [B, H, W] with values in [0, K)
        class_weights: Optional per-class weights (length K)

    Raises:
        ShapeError: logits/target extents disagree
        ValueError: class index out of range
    """
    batch, classes, height, width = logits.shape
    if target.shape != (batch, height, width):
        raise ShapeError(f"logits {logits.shape} do not match target {target.shape}")
    if target.min() < 0 or target.max() >= classes:
        raise ValueError(f"target class out of range [0, {classes}): min {target.min()}, max {target.max()}")
    log_probs = T.log_softmax(T.transpose(logits, (0, 2, 3, 1)), axis=-1)
    onehot = np.eye(classes, dtype=logits.dtype)[target]
    nll = -T.tsum(log_probs * Tensor(onehot), axis=-1)
    if class_weights is None:
        return T.mean(nll)
    weights = np.asarray(class_weights, dtype=logits.dtype)[target]
    return T.tsum(nll * Tensor(weights)) * (1.0 / float(weights.sum()))


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """mean |pred - target|"""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} does not match target {target.shape}")
    return T.mean(T.tabs(pred - Tensor(target.astype(pred.dtype))))


def boundary_weights() -> Sequence[float]:
    positive = Config.BOUNDARY_POSITIVE_WEIGHT
    return (1.0 - positive, positive)


def task_loss(task: TaskSpec, pred: Tensor, target: np.ndarray) -> Tensor:
    """Loss declared by the task (boundary CE is class-weighted)"""
    if task.loss == "l1":
        return l1_loss(pred, target)
    weights = boundary_weights() if task.metric == "boundary-f1" else None
    return cross_entropy(pred, target, weights)
