"""
Attention Baseline
Windowed multi-head self/cross attention used as the drop-in replacement
for the 2D scans in the swap experiment, plus full sequence attention for
the length-scaling benchmark.

Maps whose extents are not multiples of the window are zero-padded; padded
keys are masked out of the softmax and padded queries are cropped.
"""

from typing import Optional, Tuple

import numpy as np

from mtscan import tensor as T
from mtscan.errors import ShapeError
from mtscan.nn import Linear, Module
from mtscan.tensor import Tensor

_MASKED = -1e9


def _pad_to_window(x: Tensor, window: int) -> Tensor:
    batch, height, width, channels = x.shape
    pad_h, pad_w = (-height) % window, (-width) % window
    if pad_h:
        x = T.concat([x, Tensor(np.zeros((batch, pad_h, width, channels), dtype=x.dtype))], axis=1)
    if pad_w:
        x = T.concat([x, Tensor(np.zeros((batch, height + pad_h, pad_w, channels), dtype=x.dtype))], axis=2)
    return x


def window_partition(x: Tensor, window: int) -> Tensor:
    """(B, H, W, C) with H, W multiples of window -> (B*nW, window*window, C)"""
    batch, height, width, channels = x.shape
    if height % window or width % window:
        raise ShapeError(f"{(height, width)} is not a multiple of window {window}")
    blocks = T.reshape(x, (batch, height // window, window, width // window, window, channels))
    blocks = T.transpose(blocks, (0, 1, 3, 2, 4, 5))
    return T.reshape(blocks, (-1, window * window, channels))


def window_reverse(windows: Tensor, window: int, batch: int, height: int, width: int) -> Tensor:
    """Inverse of window_partition"""
    channels = windows.shape[-1]
    blocks = T.reshape(windows, (batch, height // window, width // window, window, window, channels))
    return T.reshape(T.transpose(blocks, (0, 1, 3, 2, 4, 5)), (batch, height, width, channels))


def _padding_mask(batch: int, height: int, width: int, window: int, dtype) -> Optional[np.ndarray]:
    """Additive key mask [B*nW, 1, 1, window*window]; None when nothing is padded"""
    pad_h, pad_w = (-height) % window, (-width) % window
    if not (pad_h or pad_w):
        return None
    valid = np.zeros((1, height + pad_h, width + pad_w, 1), dtype=dtype)
    valid[:, :height, :width] = 1.0
    flat = window_partition(Tensor(np.repeat(valid, batch, axis=0)), window).data[..., 0]
    return np.where(flat > 0, 0.0, _MASKED).astype(dtype)[:, None, None, :]


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """
    softmax(Q K^T / sqrt(d)) V over `heads` heads

    Args:
        q: [M, Lq, D]
        k, v: [M, Lk, D]
        heads: Head count; D must be divisible by it
        mask: Optional additive score bias broadcastable to [M, heads, Lq, Lk]

    Returns:
        (output [M, Lq, D], attention weights [M, heads, Lq, Lk])
    """
    groups, q_len, dim = q.shape
    k_len = k.shape[1]
    if dim % heads:
        raise ShapeError(f"width {dim} is not divisible by {heads} heads")
    head_dim = dim // heads

    def split(t: Tensor, length: int) -> Tensor:
        return T.transpose(T.reshape(t, (groups, length, heads, head_dim)), (0, 2, 1, 3))

    qh, kh, vh = split(q, q_len), split(k, k_len), split(v, k_len)
    scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))) * (head_dim ** -0.5)
    if mask is not None:
        scores = scores + Tensor(mask)
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, vh)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (groups, q_len, dim))
    return out, weights


class WindowAttention(Module):
    """
    Windowed multi-head attention over a (B, H, W, C) map

    forward(x) is self-attention; forward(query, shared) attends from the
    query map to keys/values taken from the shared map.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64,
                 window: int = 4, heads: int = 2):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"width {dim} is not divisible by {heads} heads")
        self.dim, self.window, self.heads = dim, window, heads
        self.w_q = Linear(dim, dim, rng, dtype)
        self.w_k = Linear(dim, dim, rng, dtype)
        self.w_v = Linear(dim, dim, rng, dtype)
        self.w_o = Linear(dim, dim, rng, dtype)

    def attend(self, query: Tensor, shared: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """Returns (output map, per-window attention weights)"""
        shared = query if shared is None else shared
        if query.shape != shared.shape:
            raise ShapeError(f"query {query.shape} and shared {shared.shape} differ")
        if query.ndim != 4 or query.shape[-1] != self.dim:
            raise ShapeError(f"expected (B,H,W,{self.dim}), got {query.shape}")
        batch, height, width, _ = query.shape
        mask = _padding_mask(batch, height, width, self.window, query.dtype)

        q_win = window_partition(_pad_to_window(query, self.window), self.window)
        kv_win = q_win if shared is query else window_partition(_pad_to_window(shared, self.window), self.window)
        out, weights = multi_head_attention(self.w_q(q_win), self.w_k(kv_win), self.w_v(kv_win),
                                            self.heads, mask)
        padded_h = height + (-height) % self.window
        padded_w = width + (-width) % self.window
        out = window_reverse(self.w_o(out), self.window, batch, padded_h, padded_w)
        if (padded_h, padded_w) != (height, width):
            out = out[:, :height, :width, :]
        return out, weights

    def forward(self, query: Tensor, shared: Optional[Tensor] = None) -> Tensor:
        return self.attend(query, shared)[0]


def sequence_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head full attention over [L, D] sequences (quadratic in L)"""
    out, _ = multi_head_attention(T.reshape(q, (1,) + q.shape), T.reshape(k, (1,) + k.shape),
                                  T.reshape(v, (1,) + v.shape), heads=1)
    return T.reshape(out, q.shape)
