"""
Tests for the windowed attention baseline
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mtscan.attention import (
    WindowAttention,
    multi_head_attention,
    sequence_attention,
    window_partition,
    window_reverse,
)
from mtscan.errors import ShapeError
from mtscan.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(5)


def test_window_partition_round_trip(rng):
    x = rng.standard_normal((2, 4, 6, 3))
    windows = window_partition(Tensor(x), 2)
    assert windows.shape == (12, 4, 3)
    np.testing.assert_array_equal(window_reverse(windows, 2, 2, 4, 6).data, x)


def test_window_partition_requires_multiples():
    with pytest.raises(ShapeError):
        window_partition(Tensor(np.ones((1, 3, 4, 2))), 2)


def test_attention_weights_rows_sum_to_one(rng):
    attention = WindowAttention(4, rng, window=2, heads=2)
    out, weights = attention.attend(Tensor(rng.standard_normal((1, 4, 4, 4))))
    assert out.shape == (1, 4, 4, 4)
    assert weights.shape == (4, 2, 4, 4)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0)


def test_padded_keys_get_no_weight(rng):
    attention = WindowAttention(4, rng, window=2, heads=2)
    out, weights = attention.attend(Tensor(rng.standard_normal((1, 3, 3, 4))))
    assert out.shape == (1, 3, 3, 4)
    # Bottom-right window holds one real pixel; every query puts all weight on it
    np.testing.assert_allclose(weights.data[-1, :, :, 0], 1.0)
    np.testing.assert_allclose(weights.data[-1, :, :, 1:], 0.0, atol=1e-12)


def test_cross_attention_uses_shared_map(rng):
    attention = WindowAttention(4, rng, window=2, heads=1)
    query = Tensor(rng.standard_normal((1, 2, 2, 4)))
    a = attention(query, Tensor(rng.standard_normal((1, 2, 2, 4)))).data
    b = attention(query, Tensor(rng.standard_normal((1, 2, 2, 4)))).data
    assert not np.allclose(a, b)


def test_heads_must_divide_width(rng):
    with pytest.raises(ShapeError):
        WindowAttention(6, rng, heads=4)


def test_single_key_returns_its_value(rng):
    q = Tensor(rng.standard_normal((1, 3, 4)))
    v = Tensor(rng.standard_normal((1, 1, 4)))
    out, _ = multi_head_attention(q, Tensor(rng.standard_normal((1, 1, 4))), v, heads=2)
    np.testing.assert_allclose(out.data, np.broadcast_to(v.data, (1, 3, 4)))


def test_sequence_attention_shape(rng):
    x = Tensor(rng.standard_normal((16, 8)))
    assert sequence_attention(x, x, x).shape == (16, 8)
