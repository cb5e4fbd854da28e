"""
Tests for four-direction unfold/fold and the 2D (cross) scans
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mtscan.errors import ShapeError
from mtscan.oracles import composed_css2d
from mtscan.scan2d import ALL_DIRECTIONS, ScanDirection, Ss2dParams, css2d, fold, ss2d, unfold
from mtscan.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(11)


class TestUnfoldFold:
    def test_visiting_orders_on_2x3(self):
        grid = np.arange(6.0).reshape(1, 2, 3, 1)
        orders = {d: unfold(Tensor(grid), d).data[0, :, 0].tolist() for d in ALL_DIRECTIONS}
        assert orders[ScanDirection.D1] == [0, 1, 2, 3, 4, 5]
        assert orders[ScanDirection.D2] == [0, 3, 1, 4, 2, 5]
        assert orders[ScanDirection.D3] == [5, 4, 3, 2, 1, 0]
        assert orders[ScanDirection.D4] == [5, 2, 4, 1, 3, 0]

    @pytest.mark.parametrize("direction", ALL_DIRECTIONS)
    def test_round_trip(self, rng, direction):
        x = rng.standard_normal((2, 3, 5, 4))
        seq = unfold(Tensor(x), direction)
        assert seq.shape == (2, 15, 4)
        np.testing.assert_array_equal(fold(seq, direction, 3, 5).data, x)

    def test_fold_length_mismatch(self):
        with pytest.raises(ShapeError):
            fold(Tensor(np.ones((1, 5, 2))), ScanDirection.D1, 2, 3)

    def test_parse_sorts_directions(self):
        assert ScanDirection.parse(["D4", "D1"]) == [ScanDirection.D1, ScanDirection.D4]


class TestScan2d:
    def test_css2d_matches_hand_composition(self, rng):
        params = Ss2dParams(3, 2, rng, np.float64)
        q, s = rng.standard_normal((2, 3, 4, 3)), rng.standard_normal((2, 3, 4, 3))
        np.testing.assert_allclose(css2d(params, Tensor(q), Tensor(s)).data,
                                   composed_css2d(params, q, s), atol=1e-12)

    def test_css2d_with_identical_maps_is_ss2d_bitwise(self, rng):
        params = Ss2dParams(4, 3, rng, np.float64)
        q = rng.standard_normal((1, 3, 3, 4))
        np.testing.assert_array_equal(css2d(params, Tensor(q), Tensor(q.copy())).data,
                                      ss2d(params, Tensor(q)).data)

    def test_single_direction_subset(self, rng):
        params = Ss2dParams(2, 2, rng, np.float64)
        q = rng.standard_normal((1, 2, 3, 2))
        active = [ScanDirection.D2]
        np.testing.assert_allclose(ss2d(params, Tensor(q), active).data,
                                   composed_css2d(params, q, q, active), atol=1e-12)

    def test_empty_active_set(self, rng):
        params = Ss2dParams(2, 2, rng, np.float64)
        with pytest.raises(ValueError):
            ss2d(params, Tensor(np.ones((1, 2, 2, 2))), active=[])

    def test_query_shared_mismatch(self, rng):
        params = Ss2dParams(2, 2, rng, np.float64)
        with pytest.raises(ShapeError):
            css2d(params, Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 2, 3, 2))))

    def test_single_pixel_map(self, rng):
        params = Ss2dParams(3, 2, rng, np.float64)
        x = rng.standard_normal((1, 1, 1, 3))
        assert ss2d(params, Tensor(x)).shape == (1, 1, 1, 3)

    def test_tied_directions_share_one_kernel(self, rng):
        tied = Ss2dParams(4, 2, rng, np.float64, tie_directions=True)
        untied = Ss2dParams(4, 2, rng, np.float64)
        assert tied.num_parameters() * 4 == untied.num_parameters()
        assert all(tied.kernel(d) is tied.kernel(ScanDirection.D1) for d in ALL_DIRECTIONS)

    def test_tied_single_pixel_is_four_times_one_direction(self, rng):
        tied = Ss2dParams(3, 2, rng, np.float64, tie_directions=True)
        x = Tensor(rng.standard_normal((2, 1, 1, 3)))
        one = ss2d(tied, x, active=[ScanDirection.D1]).data
        np.testing.assert_allclose(ss2d(tied, x).data, 4.0 * one, rtol=1e-14, atol=1e-15)

    def test_zero_map_gives_zero(self, rng):
        params = Ss2dParams(3, 2, rng, np.float64)
        np.testing.assert_array_equal(ss2d(params, Tensor(np.zeros((1, 3, 4, 3)))).data, 0.0)

    def test_zero_query_gives_zero_for_any_shared_map(self, rng):
        params = Ss2dParams(3, 2, rng, np.float64)
        shared = Tensor(rng.standard_normal((2, 3, 3, 3)))
        np.testing.assert_array_equal(css2d(params, Tensor(np.zeros((2, 3, 3, 3))), shared).data, 0.0)
