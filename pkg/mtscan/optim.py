"""
Optimizer
AdamW with decoupled weight decay and the polynomial learning-rate schedule
"""

from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from mtscan.config import Config
from mtscan.nn import Parameter


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = Config.POLY_POWER) -> float:
    """base_lr * (1 - iteration / max_iter) ** power, reaching 0 at max_iter"""
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    progress = min(max(iteration, 0), max_iter) / max_iter
    return base_lr * (1.0 - progress) ** power


class AdamW:
    """
    Adam with decoupled weight decay

    Per step t and parameter p with gradient g:
        p <- p * (1 - lr * wd)
        m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
        p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """

    def __init__(self, params: Sequence[Parameter], lr: float = Config.LEARNING_RATE,
                 betas: Tuple[float, float] = Config.ADAM_BETAS, eps: float = Config.ADAM_EPS,
                 weight_decay: float = Config.WEIGHT_DECAY):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: Dict[int, np.ndarray] = {}
        self._v: Dict[int, np.ndarray] = {}

    def step(self, lr: Optional[float] = None) -> None:
        """Apply one update using each parameter's .grad (parameters without a gradient are skipped)"""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for index, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m = self._m.setdefault(index, np.zeros_like(p.data))
            v = self._v.setdefault(index, np.zeros_like(p.data))
            p.data *= (1.0 - lr * self.weight_decay)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
