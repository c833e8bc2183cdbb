import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strokeforge.geometry import (heatmap_for_mask, heatmap_from_sdf,
                                  signed_distance)


def brute_force_sdf(mask):
    """O((HW)^2) nearest-opposite-pixel search."""
    h, w = mask.shape
    fg = np.argwhere(mask == 1)
    bg = np.argwhere(mask == 0)
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            targets = bg if mask[i, j] else fg
            d = np.sqrt(((targets - (i, j)) ** 2).sum(axis=1)).min()
            out[i, j] = -d if mask[i, j] else d
    return out


class TestSignedDistance:
    def test_one_by_three(self):
        assert np.array_equal(signed_distance(np.array([[0, 1, 0]])),
                              [[1.0, -1.0, 1.0]])

    def test_diagonal_sqrt2(self):
        mask = np.zeros((3, 3), dtype=int)
        mask[1, 1] = 1
        sdf = signed_distance(mask)
        assert sdf[0, 0] == pytest.approx(np.sqrt(2.0))
        assert sdf[1, 1] == -1.0

    def test_magnitude_at_least_one(self, rng):
        for _ in range(20):
            mask = (rng.random((9, 9)) < 0.4).astype(int)
            if mask.min() == mask.max():
                continue
            assert np.abs(signed_distance(mask)).min() >= 1.0

    def test_sign_convention(self, rng):
        mask = (rng.random((12, 12)) < 0.3).astype(int)
        mask[0, 0], mask[5, 5] = 0, 1
        sdf = signed_distance(mask)
        assert np.all(sdf[mask == 1] < 0)
        assert np.all(sdf[mask == 0] > 0)

    def test_exhaustive_equality_with_brute_force(self, rng):
        for _ in range(120):
            h, w = rng.integers(1, 17, size=2)
            mask = (rng.random((h, w)) < rng.uniform(0.05, 0.95)).astype(int)
            if mask.min() == mask.max():
                continue
            assert np.array_equal(signed_distance(mask), brute_force_sdf(mask))

    def test_translation_equivariance(self, rng):
        mask = np.zeros((16, 16), dtype=int)
        mask[3:6, 4:8] = 1
        sdf = signed_distance(mask)
        shifted = np.roll(np.roll(mask, 5, axis=0), 3, axis=1)
        # interior comparison away from the wrap-around
        assert np.array_equal(signed_distance(shifted)[8:11, 7:11], sdf[3:6, 4:8])

    def test_degenerate_sentinels(self):
        assert np.all(np.isposinf(signed_distance(np.zeros((4, 4), dtype=int))))
        assert np.all(np.isneginf(signed_distance(np.ones((4, 4), dtype=int))))

    def test_nonbinary_rejected(self):
        with pytest.raises(ValueError):
            signed_distance(np.array([[0, 2], [1, 0]]))


class TestHeatmap:
    def test_value_at_unit_distance(self):
        sdf = np.array([[1.0]])
        w = heatmap_from_sdf(sdf, w0=4.0, sigma=10.0)
        assert w[0, 0] == pytest.approx(1.0 + 4.0 * np.exp(-1.0 / 200.0), abs=1e-12)
        assert w[0, 0] == pytest.approx(4.980, abs=1e-3)

    def test_far_field_tends_to_one(self):
        w = heatmap_from_sdf(np.array([[80.0]]), w0=4.0, sigma=3.0)
        assert w[0, 0] == pytest.approx(1.0)

    def test_degenerate_mask_uniform(self):
        assert np.all(heatmap_for_mask(np.zeros((5, 5), dtype=int)) == 1.0)
        assert np.all(heatmap_for_mask(np.ones((5, 5), dtype=int)) == 1.0)

    def test_bounds(self, rng):
        mask = (rng.random((16, 16)) < 0.3).astype(int)
        mask[0, 0], mask[8, 8] = 0, 1
        w = heatmap_for_mask(mask, w0=4.0, sigma=3.0)
        assert w.min() >= 1.0
        assert w.max() <= 5.0

    @given(st.floats(1.0, 30.0), st.floats(0.5, 20.0))
    @settings(max_examples=50, deadline=None)
    def test_monotone_decreasing_in_abs_sdf_and_symmetric(self, d, sigma):
        w_near = heatmap_from_sdf(np.array([[d]]), 4.0, sigma)[0, 0]
        w_far = heatmap_from_sdf(np.array([[d + 1.0]]), 4.0, sigma)[0, 0]
        w_neg = heatmap_from_sdf(np.array([[-d]]), 4.0, sigma)[0, 0]
        assert w_near >= w_far
        assert w_near == pytest.approx(w_neg, rel=1e-12)

    def test_inside_mode_saturates_interior(self):
        mask = np.zeros((9, 9), dtype=int)
        mask[3:6, 3:6] = 1
        w = heatmap_for_mask(mask, w0=4.0, sigma=2.0, mode="inside")
        assert np.all(w[mask == 1] == 5.0)
        assert np.all(w[mask == 0] < 5.0)

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            heatmap_from_sdf(np.zeros((2, 2)), w0=-1.0)
        with pytest.raises(ValueError):
            heatmap_from_sdf(np.zeros((2, 2)), sigma=0.0)
