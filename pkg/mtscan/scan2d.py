"""
Four-Direction 2D Selective Scan

A (B, H, W, C) map is unfolded into four sequences, scanned with
direction-specific kernels, folded back and summed in the order
D1 + D2 + D3 + D4:

    D1  row-major, left->right then top->bottom   k = r*W + c
    D2  column-major, top->bottom then left->right k = c*H + r
    D3  reverse of D1
    D4  reverse of D2
"""

import logging
from enum import Enum
from typing import Iterable, List, Optional

import numpy as np

from mtscan import tensor as T
from mtscan.config import Config
from mtscan.errors import ShapeError
from mtscan.nn import Module, ModuleList
from mtscan.ssm import SsmParams, multi_cross_scan
from mtscan.tensor import Tensor

logger = logging.getLogger(Config.LOGGER_NAME)


class ScanDirection(Enum):
    D1 = 0
    D2 = 1
    D3 = 2
    D4 = 3

    def permutation(self, height: int, width: int) -> np.ndarray:
        """perm[k] = row-major position visited at sequence index k"""
        grid = np.arange(height * width).reshape(height, width)
        order = grid.reshape(-1) if self in (ScanDirection.D1, ScanDirection.D3) else grid.T.reshape(-1)
        if self in (ScanDirection.D3, ScanDirection.D4):
            order = order[::-1]
        return np.ascontiguousarray(order)

    @classmethod
    def parse(cls, names: Iterable[str]) -> List["ScanDirection"]:
        return sorted((cls[name] for name in names), key=lambda d: d.value)


ALL_DIRECTIONS = list(ScanDirection)


def unfold(x: Tensor, direction: ScanDirection) -> Tensor:
    """(B, H, W, C) -> (B, H*W, C) in the direction's visiting order"""
    batch, height, width, channels = x.shape
    flat = T.reshape(x, (batch, height * width, channels))
    return T.take(flat, direction.permutation(height, width), axis=1)


def fold(seq: Tensor, direction: ScanDirection, height: int, width: int) -> Tensor:
    """Inverse of unfold: (B, H*W, C) -> (B, H, W, C)"""
    batch, length, channels = seq.shape
    if length != height * width:
        raise ShapeError(f"sequence length {length} does not match {height}x{width}")
    inverse = np.argsort(direction.permutation(height, width))
    return T.reshape(T.take(seq, inverse, axis=1), (batch, height, width, channels))


class Ss2dParams(Module):
    """
    Kernels for the four directions

    With tie_directions=True one kernel is shared by every direction.
    """

    def __init__(self, d_inner: int, d_state: int, rng: np.random.Generator,
                 dtype=np.float64, tie_directions: bool = False):
        super().__init__()
        self.d_inner, self.d_state = d_inner, d_state
        self.tied = tie_directions
        count = 1 if tie_directions else len(ALL_DIRECTIONS)
        self.kernels = ModuleList([SsmParams(d_inner, d_state, rng, dtype) for _ in range(count)])

    def kernel(self, direction: ScanDirection) -> SsmParams:
        return self.kernels[0 if self.tied else direction.value]


def _resolve_active(active: Optional[Iterable[ScanDirection]]) -> List[ScanDirection]:
    directions = ALL_DIRECTIONS if active is None else sorted(set(active), key=lambda d: d.value)
    if not directions:
        raise ValueError("at least one scan direction must be active")
    return directions


def css2d(params: Ss2dParams, query: Tensor, shared: Tensor,
          active: Optional[Iterable[ScanDirection]] = None) -> Tensor:
    """
    Cross 2D scan: per direction, cross_scan(unfold(query), unfold(shared)), folded and summed

    Args:
        params: Direction kernels
        query: (B, H, W, C) task-specific map
        shared: (B, H, W, C) map generating the scan parameters
        active: Directions to include (all four if None)

    Returns:
        (B, H, W, C)

    Raises:
        ShapeError: query/shared mismatch or wrong channel count
        ValueError: empty active set
    """
    if query.shape != shared.shape:
        raise ShapeError(f"query {query.shape} and shared {shared.shape} differ")
    if query.ndim != 4 or query.shape[-1] != params.d_inner:
        raise ShapeError(f"expected (B,H,W,{params.d_inner}), got {query.shape}")
    directions = _resolve_active(active)
    _, height, width, _ = query.shape

    queries = [unfold(query, d) for d in directions]
    sources = queries if shared is query else [unfold(shared, d) for d in directions]
    outputs = multi_cross_scan([params.kernel(d) for d in directions], queries, sources)

    total = None
    for direction, out in zip(directions, outputs):
        folded = fold(out, direction, height, width)
        total = folded if total is None else total + folded
    return total


def ss2d(params: Ss2dParams, x: Tensor, active: Optional[Iterable[ScanDirection]] = None) -> Tensor:
    """2D selective scan: css2d with the map as its own parameter source"""
    return css2d(params, x, x, active)
