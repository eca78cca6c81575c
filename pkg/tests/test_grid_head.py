import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridpose import autodiff as ad
from hybridpose.errors import ContractViolation, NotInvertibleError
from hybridpose.grid_head import (
    Anchor,
    DecodedBox,
    DecodedKeypoint,
    check_scales,
    decode_box,
    decode_grid,
    decode_grid_np,
    decode_keypoints,
    default_anchors,
    encode_box,
    encode_keypoint,
    keypoint_bounds,
    num_outputs,
    visibility_cell,
    visibility_score,
)

A32 = Anchor(32.0, 32.0)
# reference values from a 30-digit evaluation of the logistic function
SIG_1 = 0.731058578630004879
SIG_HALF = 0.622459331201854593

raws = st.floats(-30, 30, allow_nan=False)


def test_zero_raw_box():
    b = decode_box([0, 0, 0, 0], A32, 8)
    assert (b.tx, b.ty, b.tw, b.th) == (0.5, 0.5, 4.0, 4.0)


def test_box_example_value():
    b = decode_box([1, 0, 0, 0], A32, 8)
    assert b.tx == pytest.approx(2 * SIG_1 - 0.5, abs=1e-12)
    assert b.tx == pytest.approx(0.962117, abs=1e-6)


def test_box_lower_limit():
    assert decode_box([-40, 0, 0, 0], A32, 8).tx == pytest.approx(-0.5, abs=1e-12)


def test_box_pixels():
    b = decode_box([0, 0, 0, 0], Anchor(16, 32), 8, cell=(2, 3))
    assert b.center_px == (8 * 3.5, 8 * 2.5)
    assert b.size_px == (16.0, 32.0)
    assert b.xywh == (20.0, 4.0, 16.0, 32.0)


def test_keypoint_zero_and_limit():
    kp = decode_keypoints([0, 0, 40, -40], A32, 8)
    assert kp[0].dx == 0.0 and kp[0].dy == 0.0
    assert kp[1].dx == pytest.approx(8.0) and kp[1].dy == pytest.approx(-8.0)


def test_keypoint_example_value():
    kp = decode_keypoints([0.5, 0.0], A32, 8)[0]
    # (32/8)(4 sigma(0.5) - 2); the reference evaluation gives 1.9593493
    assert kp.dx == pytest.approx(4 * (4 * SIG_HALF - 2), abs=1e-12)
    assert kp.dx == pytest.approx(1.959349299, abs=1e-6)


def test_keypoint_pixels():
    kp = decode_keypoints([0.0, 0.0], A32, 8, cell=(1, 2))[0]
    assert kp.px == (16.0, 8.0)


def test_non_finite_raw():
    with pytest.raises(ContractViolation):
        decode_box([np.nan, 0, 0, 0], A32, 8)
    with pytest.raises(ContractViolation):
        decode_keypoints([np.inf, 0], A32, 8)


def test_anchor_validation():
    with pytest.raises(ContractViolation):
        Anchor(0.0, 1.0)
    assert default_anchors(8) == [Anchor(32.0, 64.0)]


def test_scale_validation():
    assert check_scales([16, 8], 64, 64) == (8, 16)
    with pytest.raises(ContractViolation):
        check_scales([24], 64, 64)
    with pytest.raises(ContractViolation):
        check_scales([], 64, 64)
    assert num_outputs(17) == 39


def test_encode_examples():
    assert encode_box(DecodedBox(0.5, 0.5, 4.0, 4.0), A32, 8) == (0.0, 0.0, 0.0, 0.0)
    raw = encode_box(DecodedBox(0.962117, 0.5, 4.0, 4.0), A32, 8)
    assert raw[0] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("box", [DecodedBox(1.5, 0.5, 1, 1), DecodedBox(-0.5, 0.5, 1, 1),
                                 DecodedBox(0.5, 0.5, 16.0, 1), DecodedBox(0.5, 0.5, 1, 0.0)])
def test_encode_rejects_bounds(box):
    with pytest.raises(NotInvertibleError):
        encode_box(box, A32, 8)


def test_encode_keypoint_bounds():
    assert keypoint_bounds(Anchor(32, 64), 8) == (8.0, 16.0)
    with pytest.raises(NotInvertibleError):
        encode_keypoint(8.0, 0.0, Anchor(32, 64), 8)


@settings(max_examples=200, deadline=None)
@given(raws, raws, raws, raws)
def test_decoded_box_in_open_ranges(tx, ty, tw, th):
    b = decode_box([tx, ty, tw, th], Anchor(24, 40), 8)
    assert -0.5 <= b.tx <= 1.5 and -0.5 <= b.ty <= 1.5
    assert 0 <= b.tw <= 4 * 3 and 0 <= b.th <= 4 * 5
    # away from float saturation the bounds are strict
    if abs(tx) < 20:
        assert -0.5 < b.tx < 1.5


@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_decoded_keypoint_in_open_ranges(cx, cy):
    kp = decode_keypoints([cx, cy], Anchor(24, 40), 8)[0]
    assert -6 < kp.dx < 6 and -10 < kp.dy < 10


@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 20), st.floats(0.01, 5))
def test_decode_monotone(x, step):
    a = decode_box([x, x, x, x], A32, 8)
    b = decode_box([x + step] * 4, A32, 8)
    assert b.tx > a.tx and b.tw > a.tw
    ka = decode_keypoints([x, x], A32, 8)[0]
    kb = decode_keypoints([x + step, x + step], A32, 8)[0]
    assert kb.dx > ka.dx


@settings(max_examples=300, deadline=None)
@given(st.floats(-12, 12), st.floats(-12, 12), st.floats(-12, 12), st.floats(-12, 12))
def test_encode_decode_round_trip(tx, ty, tw, th):
    b = decode_box([tx, ty, tw, th], Anchor(24, 40), 8)
    raw = encode_box(b, Anchor(24, 40), 8)
    np.testing.assert_allclose(raw, [tx, ty, tw, th], atol=1e-9)
    b2 = decode_box(raw, Anchor(24, 40), 8)
    assert b2.tx == pytest.approx(b.tx, abs=1e-9)
    assert b2.th == pytest.approx(b.th, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(st.floats(-0.49, 1.49), st.floats(-0.49, 1.49), st.floats(0.01, 11.9), st.floats(0.01, 19.9))
def test_decode_encode_round_trip(tx, ty, tw, th):
    b = DecodedBox(tx, ty, tw, th)
    out = decode_box(encode_box(b, Anchor(24, 40), 8), Anchor(24, 40), 8)
    np.testing.assert_allclose([out.tx, out.ty, out.tw, out.th], [tx, ty, tw, th], atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5.9, 5.9), st.floats(-9.9, 9.9))
def test_keypoint_round_trip(dx, dy):
    raw = encode_keypoint(dx, dy, Anchor(24, 40), 8)
    kp = decode_keypoints(raw, Anchor(24, 40), 8)[0]
    assert kp.dx == pytest.approx(dx, abs=1e-9) and kp.dy == pytest.approx(dy, abs=1e-9)


def test_visibility_center_and_clamp():
    v = np.zeros((4, 4, 1, 2))
    v[2, 1, 0, 1] = 0.9
    assert visibility_score(v, (12.0, 20.0), 0, 1, stride=8).score == 0.9
    out = visibility_score(v, DecodedKeypoint(-3.0, 10.0, (0, 0), 8), 0, 1)
    assert out.clamped and (out.row, out.col) == (3, 0)
    assert not visibility_score(v, (12.0, 20.0), 0, 1, stride=8).clamped


def test_visibility_uniform_map():
    v = np.full((3, 5, 2, 4), 0.3)
    for p in [(0.0, 0.0), (39.9, 23.9), (100.0, -50.0)]:
        assert visibility_score(v, p, 1, 3, stride=8).score == 0.3


def test_visibility_index_errors():
    v = np.zeros((2, 2, 1, 3))
    with pytest.raises(ContractViolation):
        visibility_score(v, (1.0, 1.0), 1, 0, stride=8)
    with pytest.raises(ContractViolation):
        visibility_score(v, (1.0, 1.0), 0, 3, stride=8)
    with pytest.raises(ContractViolation):
        visibility_score(v, (1.0, 1.0), 0, 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 63.999), st.floats(0, 63.999))
def test_visibility_cell_contains_point(px, py):
    r, c, clamped = visibility_cell(px, py, 8, 8, 8)
    assert not clamped
    assert c * 8 <= px < (c + 1) * 8 and r * 8 <= py < (r + 1) * 8
    # nearest cell center along each axis
    assert abs(px - 8 * (c + 0.5)) <= 4 and abs(py - 8 * (r + 0.5)) <= 4


def test_tensor_decode_matches_scalar():
    rng = np.random.default_rng(0)
    anchors = [Anchor(24, 40), Anchor(16, 16)]
    raw = rng.normal(0, 2, (1, 3, 4, 2, 9))
    d = decode_grid(ad.Tensor(raw), anchors, 8)
    for i, j, a in [(0, 0, 0), (2, 3, 1), (1, 2, 0)]:
        b = decode_box(raw[0, i, j, a, 1:5], anchors[a], 8, (i, j))
        np.testing.assert_allclose(d.box.data[0, i, j, a], [b.tx, b.ty, b.tw, b.th], atol=1e-12)
        kps = decode_keypoints(raw[0, i, j, a, 5:], anchors[a], 8, (i, j))
        np.testing.assert_allclose(d.kp_dx.data[0, i, j, a], [k.dx for k in kps], atol=1e-12)
        np.testing.assert_allclose(d.kp_x.data[0, i, j, a], [j + k.dx for k in kps], atol=1e-12)
        np.testing.assert_allclose(d.kp_y.data[0, i, j, a], [i + k.dy for k in kps], atol=1e-12)
    np_out = decode_grid_np(raw[0], anchors, 8)
    np.testing.assert_array_equal(np_out["objectness"], d.objectness.data[0])


def test_tensor_decode_shape_check():
    with pytest.raises(ContractViolation):
        decode_grid(ad.Tensor(np.zeros((1, 2, 2, 1, 8))), [A32], 8)
    with pytest.raises(ContractViolation):
        decode_grid(ad.Tensor(np.zeros((1, 2, 2, 2, 9))), [A32], 8)


def test_tensor_decode_gradient():
    raw = np.random.default_rng(2).normal(0, 1, (1, 2, 2, 1, 7))
    w = np.random.default_rng(3).normal(0, 1, (1, 2, 2, 1, 4))

    def f(t):
        d = decode_grid(t, [A32], 8)
        return ad.sum_(d.box * w) + ad.sum_(d.kp_x * d.kp_y) + ad.sum_(d.objectness)

    assert ad.gradcheck(f, raw).passed


def test_visibility_cell_half_rounds_up():
    # exactly between two cell centers the higher index wins
    assert visibility_cell(8.0, 8.0, 8, 4, 4)[:2] == (1, 1)
