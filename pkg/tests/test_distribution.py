import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridpose import autodiff as ad
from hybridpose.distribution import (
    build_target_visibility,
    distribution_maps,
    grid_distribution,
    keypoint_to_gaussian,
    merge_max,
)
from hybridpose.errors import ContractViolation
from hybridpose.targets import GroundTruthPerson

E_HALF = 0.606530659712633424  # exp(-1/2), 30-digit reference


def _oracle(xs, ys, ws, sigma, h, w):
    """Point-by-point loop over cells."""
    nb, n, na, k = xs.shape
    out = np.zeros((nb, h, w, na, k))
    for b in range(nb):
        for p in range(n):
            for a in range(na):
                for kk in range(k):
                    for r in range(h):
                        for c in range(w):
                            du, dv = c + 0.5 - xs[b, p, a, kk], r + 0.5 - ys[b, p, a, kk]
                            if abs(du) <= 3 * sigma and abs(dv) <= 3 * sigma:
                                val = ws[b, p, a] * math.exp(-(du * du + dv * dv) / (2 * sigma**2))
                                out[b, r, c, a, kk] = max(out[b, r, c, a, kk], val)
    return out


def test_peak_value():
    m = keypoint_to_gaussian(2.5, 1.5, 1.0, 1.0, (4, 5)).data
    assert m[1, 2] == 1.0
    assert m.max() == 1.0


def test_truncation_example():
    # 3.5 sigma away along x: outside the box
    m = keypoint_to_gaussian(0.5 - 3.5 * 0.5, 0.5, 1.0, 0.5, (1, 3)).data
    assert m[0, 0] == 0.0
    inside = keypoint_to_gaussian(0.5 - 3.0, 0.5, 1.0, 1.0, (1, 1)).data
    assert inside[0, 0] == pytest.approx(math.exp(-4.5))


def test_distance_sigma_example():
    m = keypoint_to_gaussian(0.5, 0.5 + 2.0, 0.8, 2.0, (1, 1)).data
    assert m[0, 0] == pytest.approx(0.8 * E_HALF, abs=1e-12)
    assert m[0, 0] == pytest.approx(0.485225, abs=1e-6)


def test_gaussian_validation():
    with pytest.raises(ContractViolation):
        keypoint_to_gaussian(0, 0, 1.0, 0.0, (2, 2))
    with pytest.raises(ContractViolation):
        keypoint_to_gaussian(0, 0, 1.5, 1.0, (2, 2))


def test_merge_midpoint_example():
    a = keypoint_to_gaussian(0.5, 0.5, 1.0, 1.0, (1, 3))
    b = keypoint_to_gaussian(2.5, 0.5, 1.0, 1.0, (1, 3))
    m = merge_max([a, b]).data
    assert m[0, 1] == pytest.approx(E_HALF, abs=1e-12)
    assert m[0, 0] == 1.0 and m[0, 2] == 1.0


def test_merge_empty_and_single():
    assert np.array_equal(merge_max([], shape=(2, 3)).data, np.zeros((2, 3)))
    with pytest.raises(ContractViolation):
        merge_max([])
    a = keypoint_to_gaussian(1.0, 1.0, 0.7, 1.0, (3, 3))
    assert np.array_equal(merge_max([a]).data, a.data)
    with pytest.raises(ContractViolation):
        merge_max([a, ad.Tensor(np.zeros((2, 2)))])


maps_st = st.lists(st.floats(0, 1), min_size=6, max_size=6).map(lambda v: ad.Tensor(np.reshape(v, (2, 3))))


@settings(max_examples=100, deadline=None)
@given(maps_st, maps_st, maps_st)
def test_merge_algebra(a, b, c):
    ab = merge_max([a, b]).data
    assert np.array_equal(ab, merge_max([b, a]).data)
    assert np.array_equal(merge_max([a, a]).data, a.data)
    assert np.array_equal(merge_max([merge_max([a, b]), c]).data, merge_max([a, merge_max([b, c])]).data)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 2.5))
def test_batched_maps_match_oracle(seed, sigma):
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-2, 7, (2, 3, 2, 2))
    ys = rng.uniform(-2, 6, (2, 3, 2, 2))
    ws = rng.uniform(0, 1, (2, 3, 2))
    maps, _ = distribution_maps(xs, ys, ws, sigma, (4, 5))
    np.testing.assert_allclose(maps.data, _oracle(xs, ys, ws, sigma, 4, 5), atol=1e-12)
    assert maps.data.min() >= 0 and maps.data.max() <= ws.max() + 1e-15


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 8), st.floats(-3, 8), st.floats(0.2, 2))
def test_support_is_zero_outside_box(cx, cy, sigma):
    m = keypoint_to_gaussian(cx, cy, 1.0, sigma, (6, 6)).data
    u = np.arange(6) + 0.5
    outside = (np.abs(u[None, :] - cx) > 3 * sigma) | (np.abs(u[:, None] - cy) > 3 * sigma)
    assert np.all(m[outside] == 0)
    assert np.all(m[~outside] > 0)


def test_empty_point_set():
    maps, support = distribution_maps(np.zeros((1, 0, 1, 3)), np.zeros((1, 0, 1, 3)),
                                      np.zeros((1, 0, 1)), 1.0, (2, 2))
    assert maps.shape == (1, 2, 2, 1, 3) and not maps.data.any()
    assert support is None


def test_shape_errors():
    with pytest.raises(ContractViolation):
        distribution_maps(np.zeros((1, 2, 3)), np.zeros((1, 2, 3)), np.zeros((1, 2)), 1.0, (2, 2))


def _away_from_boundary(xs, ys, sigma, h, w, margin=1e-3):
    u = np.arange(w) + 0.5
    v = np.arange(h) + 0.5
    dx = np.abs(np.abs(u[None, :] - xs.reshape(-1, 1)) - 3 * sigma)
    dy = np.abs(np.abs(v[None, :] - ys.reshape(-1, 1)) - 3 * sigma)
    return dx.min() > margin and dy.min() > margin


@pytest.mark.parametrize("seed", range(20))
def test_gaussian_gradients(seed):
    rng = np.random.default_rng(seed)
    sigma = 1.0
    xs = rng.uniform(0, 4, (1, 3, 1, 2))
    ys = rng.uniform(0, 4, (1, 3, 1, 2))
    ws = rng.uniform(0.2, 0.9, (1, 3, 1))
    _, support = distribution_maps(xs, ys, ws, sigma, (4, 4))
    r = rng.normal(size=(1, 4, 4, 1, 2))

    def loss(x, y, wt):
        return ad.sum_(distribution_maps(x, y, wt, sigma, (4, 4), support)[0] * r)

    assert ad.gradcheck(lambda t: loss(t, ys, ws), xs).passed
    assert ad.gradcheck(lambda t: loss(xs, t, ws), ys).passed
    assert ad.gradcheck(lambda t: loss(xs, ys, t), ws).passed


def test_frozen_support_matches_fresh():
    rng = np.random.default_rng(5)
    xs, ys = rng.uniform(0, 4, (1, 2, 1, 1)), rng.uniform(0, 4, (1, 2, 1, 1))
    ws = np.ones((1, 2, 1))
    a, s = distribution_maps(xs, ys, ws, 1.0, (4, 4))
    b, _ = distribution_maps(xs, ys, ws, 1.0, (4, 4), s)
    assert np.array_equal(a.data, b.data)


def test_grid_distribution_layout():
    kp_x = np.full((1, 2, 2, 1, 1), 0.5)
    kp_y = np.full((1, 2, 2, 1, 1), 0.5)
    obj = np.zeros((1, 2, 2, 1))
    obj[0, 1, 1, 0] = 0.6
    d, _ = grid_distribution(kp_x, kp_y, obj, 1.0)
    assert d.data[0, 0, 0, 0, 0] == pytest.approx(0.6)
    assert d.data[0, 1, 1, 0, 0] == pytest.approx(0.6 * math.exp(-1.0))


def _person(points, delta):
    pts = np.asarray(points, dtype=float)
    return GroundTruthPerson((0.0, 0.0, 16.0, 32.0), pts, np.asarray(delta))


def test_target_single_visible():
    p = _person([[12.0, 4.0]], [1])
    t = build_target_visibility([p], 1.0, {8: (4, 4, 1)})[8]
    assert t.shape == (4, 4, 1, 1)
    assert t[0, 1, 0, 0] == 1.0
    assert t.max() == 1.0


def test_target_all_occluded():
    p = _person([[12.0, 4.0], [3.0, 3.0]], [0, 0])
    t = build_target_visibility([p], 2.0, {8: (4, 4, 1), 16: (2, 2, 1)})
    assert not t[8].any() and not t[16].any()


def test_target_ridge_midpoint():
    a = _person([[4.0, 4.0]], [1])
    b = _person([[20.0, 4.0]], [1])
    t = build_target_visibility([a, b], 1.0, {8: (1, 3, 1)})[8]
    assert t[0, 1, 0, 0] == pytest.approx(E_HALF, abs=1e-12)
    assert t[0, 1, 0, 0] == pytest.approx(0.606531, abs=1e-6)


def test_target_assignment_restricts_anchor():
    p = _person([[4.0, 4.0]], [1])
    t = build_target_visibility([p], 1.0, {8: (2, 2, 2)}, assignment={8: [(0, 1)]})[8]
    assert not t[..., 0, :].any() and t[0, 0, 1, 0] == 1.0


def test_target_outside_image_truncates():
    p = _person([[-4.0, 4.0]], [1])
    t = build_target_visibility([p], 1.0, {8: (2, 2, 1)})[8]
    assert t[0, 0, 0, 0] == pytest.approx(math.exp(-0.5))
    with pytest.raises(ContractViolation):
        build_target_visibility([], 1.0, {8: (2, 2, 1)})
    assert build_target_visibility([], 1.0, {8: (2, 2, 1)}, num_keypoints=3)[8].shape == (2, 2, 1, 3)
