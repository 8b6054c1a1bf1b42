import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from panrefine.depth_proc import HoleFillConfig, fill_holes, gaussian_kernel_2d


def test_kernel_center_only():
    k = gaussian_kernel_2d(1, 1.0)
    assert k.shape == (1, 1)
    assert k[0, 0] == 1.0


def test_kernel_flat_limit():
    np.testing.assert_allclose(gaussian_kernel_2d(3, math.inf), np.full((3, 3), 1 / 9))
    np.testing.assert_allclose(gaussian_kernel_2d(3, 1e6), np.full((3, 3), 1 / 9), atol=1e-12)


def test_kernel_center_weight_by_hand():
    # 1 / (1 + 4 e^-1/2 + 4 e^-1)
    expected = 1.0 / (1.0 + 4 * math.exp(-0.5) + 4 * math.exp(-1.0))
    assert expected == pytest.approx(0.2042, abs=1e-4)
    assert gaussian_kernel_2d(3, 1.0)[1, 1] == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("g", [3, 5, 9])
def test_kernel_symmetric_and_normalized(g):
    k = gaussian_kernel_2d(g, 1.3)
    assert k.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(k, k.T)
    np.testing.assert_allclose(k, k[::-1, ::-1])
    assert np.unravel_index(k.argmax(), k.shape) == (g // 2, g // 2)


@pytest.mark.parametrize("g", [0, 2, 4, -3])
def test_kernel_rejects_bad_size(g):
    with pytest.raises(ValueError):
        gaussian_kernel_2d(g, 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        HoleFillConfig(1, 1.0)
    with pytest.raises(ValueError):
        HoleFillConfig(4, 1.0)
    with pytest.raises(ValueError):
        HoleFillConfig(3, 0.0)


def test_no_holes_is_identity(rng):
    d = rng.uniform(0.5, 4.0, (20, 30))
    np.testing.assert_array_equal(fill_holes(d), d)


def test_single_hole_in_constant_surface():
    d = np.full((7, 7), 2.5)
    d[3, 3] = 0
    assert fill_holes(d, HoleFillConfig(3, 1.0))[3, 3] == pytest.approx(2.5, abs=1e-15)


def test_all_zero_stays_zero():
    d = np.zeros((10, 12))
    np.testing.assert_array_equal(fill_holes(d), d)


def test_hand_weighted_neighbour_mix():
    d = np.ones((5, 5))
    d[2, 2] = 0
    d[2, 3] = 2.0
    out = fill_holes(d, HoleFillConfig(3, 1.0))[2, 2]
    # weights renormalized over the 8 neighbours: 4 edge (e^-1/2) and 4 corner (e^-1)
    edge, corner = math.exp(-0.5), math.exp(-1.0)
    expected = (3 * edge + 4 * corner + 2.0 * edge) / (4 * edge + 4 * corner)
    assert out == pytest.approx(expected, rel=1e-12)
    assert 1.0 < out < 1.5


def test_unfillable_hole_inside_big_gap():
    d = np.full((15, 15), 1.0)
    d[3:12, 3:12] = 0
    out = fill_holes(d, HoleFillConfig(5, 1.0))
    assert out[7, 7] == 0
    assert out[3, 3] == pytest.approx(1.0)


def test_border_pixels():
    d = np.full((4, 4), 3.0)
    d[0, 0] = 0
    d[3, 3] = 0
    out = fill_holes(d, HoleFillConfig(5, 1.0))
    assert out[0, 0] == pytest.approx(3.0)
    assert out[3, 3] == pytest.approx(3.0)


def test_reads_only_original_values():
    d = np.zeros((1, 5))
    d[0, 0] = 1.0
    out = fill_holes(d, HoleFillConfig(3, 1.0))
    # a single pass: only the direct neighbour gets filled
    np.testing.assert_array_equal(out[0], [1.0, 1.0, 0, 0, 0])


def test_rejects_invalid_depth():
    with pytest.raises(ValueError):
        fill_holes(np.array([[1.0, -1.0]]))
    with pytest.raises(ValueError):
        fill_holes(np.array([[1.0, np.nan]]))
    with pytest.raises(ValueError):
        fill_holes(np.zeros((0, 3)))


depth_maps = arrays(
    np.float64,
    st.tuples(st.integers(1, 12), st.integers(1, 12)),
    elements=st.one_of(st.just(0.0), st.floats(0.1, 10.0)),
)


@settings(max_examples=150, deadline=None)
@given(depth_maps, st.sampled_from([3, 5, 7]), st.floats(0.3, 4.0))
def test_fill_properties(d, g, sigma):
    out = fill_holes(d, HoleFillConfig(g, sigma))
    nz = d > 0
    np.testing.assert_array_equal(out[nz], d[nz])
    assert np.count_nonzero(out == 0) <= np.count_nonzero(d == 0)
    half = g // 2
    for r, c in zip(*np.nonzero((d == 0) & (out > 0))):
        window = d[max(r - half, 0) : r + half + 1, max(c - half, 0) : c + half + 1]
        support = window[window > 0]
        assert support.min() <= out[r, c] <= support.max()
