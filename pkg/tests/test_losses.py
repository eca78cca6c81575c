import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridpose import autodiff as ad
from hybridpose.errors import ContractViolation
from hybridpose.losses import (
    TERMS,
    LossWeights,
    bce,
    box_loss,
    hybrid_loss,
    iou_corners,
    iou_np,
    objectness_loss,
    pearson_loss,
    pose_loss,
    self_correlation_loss,
    total_loss,
    visibility_loss,
)

from hybridpose.checks import ANCHORS, SIGMA, loss_fn, make_problem


def corr(d, v, **kw):
    return self_correlation_loss([np.asarray(d, float)[None]], [np.asarray(v, float)[None]], **kw).item()


def _slot_targets(box=None, kps=None, delta=None, k=1):
    owner = np.array([[[[0]]]])
    return {
        "weight": 1.0,
        "owner": owner,
        "objectness": np.ones((1, 1, 1, 1)),
        "box": np.asarray(box if box is not None else np.reshape([0.5, 0.5, 1.0, 1.0], (1, 1, 1, 1, 4)), float),
        "keypoints": np.asarray(kps if kps is not None else np.zeros((1, 1, 1, 1, k, 2)), float),
        "delta": np.asarray(delta if delta is not None else np.ones((1, 1, 1, 1, k)), float),
    }


# ---------------------------------------------------------------- correlation


def test_corr_example():
    d = [[1.0, 2.0], [3.0, 4.0]]
    v = [[1.0, 1.0], [2.0, 2.0]]
    r = np.corrcoef(np.ravel(d), np.ravel(v))[0, 1]
    assert r == pytest.approx(0.894427191, abs=1e-9)
    assert corr(d, v) == pytest.approx(0.2, abs=1e-5)
    assert corr(d, v) == pytest.approx(1 - r**2, abs=1e-8)


def test_corr_identities():
    rng = np.random.default_rng(0)
    d = rng.uniform(0, 1, (4, 4, 1, 3))
    assert corr(d, d) < 1e-6
    assert corr(d, np.full_like(d, 0.4)) == pytest.approx(1.0, abs=1e-12)
    assert corr(np.full_like(d, 0.4), d) == pytest.approx(1.0, abs=1e-12)
    for a in (2.0, -1.0):
        for b in (0.0, 0.3):
            assert corr(d, a * d + b) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 1000), st.floats(-5, 5).filter(lambda a: abs(a) > 0.05), st.floats(-3, 3))
def test_corr_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0, 1, (3, 3, 1, 2))
    v = rng.uniform(0, 1, (3, 3, 1, 2))
    base = corr(d, v)
    assert corr(d, a * v + b) == pytest.approx(base, abs=1e-6)
    assert corr(a * d + b, v) == pytest.approx(base, abs=1e-6)
    assert -1e-12 <= base <= 1 + 1e-6


def test_corr_unsquared_variant():
    d = np.arange(4.0).reshape(2, 2)
    assert corr(d, -d, squared=False) == pytest.approx(2.0, abs=1e-6)
    assert corr(d, -d) < 1e-6


def test_corr_averages_over_scales_and_batch():
    a = np.arange(8.0).reshape(2, 2, 2)
    b = np.stack([a[0], np.ones((2, 2))])
    out = self_correlation_loss([a, a], [a, b]).item()
    assert out == pytest.approx(0.5 * (0.0 + 0.5 * (0.0 + 1.0)), abs=1e-6)
    with pytest.raises(ContractViolation):
        self_correlation_loss([a], [a[:, :1]])
    with pytest.raises(ContractViolation):
        pearson_loss(np.zeros(3), np.zeros(4))


# ----------------------------------------------------------------- objectness


def test_bce_example():
    out = bce(ad.Tensor([0.5]), np.array([0.75])).item()
    assert out == pytest.approx(math.log(2), abs=1e-12)
    assert out == pytest.approx(0.693147, abs=1e-6)


def test_bce_limits_and_domain():
    assert bce(ad.Tensor([1e-15]), np.zeros(1)).item() < 1e-11
    assert bce(ad.Tensor([1 - 1e-15]), np.ones(1)).item() < 1e-11
    with pytest.raises(ContractViolation):
        bce(ad.Tensor([1.2]), np.zeros(1))
    with pytest.raises(ContractViolation):
        bce(ad.Tensor([np.nan]), np.zeros(1))


def test_objectness_target_uses_iou():
    t = _slot_targets()
    p = ad.Tensor(np.full((1, 1, 1, 1), 0.5))
    half_box = ad.Tensor(np.array([[[[[0.5, 0.5, 0.5, 1.0]]]]]).reshape(1, 1, 1, 1, 4))
    out = objectness_loss([p], [half_box], [t]).item()
    q = 0.5  # IoU of a half-width box sharing the center
    assert out == pytest.approx(-(q * math.log(0.5) + (1 - q) * math.log(0.5)))


def test_objectness_empty_grid_small():
    t = _slot_targets()
    t["owner"] = np.full((1, 1, 1, 1), -1)
    p = ad.Tensor(np.full((1, 1, 1, 1), 1e-9))
    box = ad.Tensor(np.ones((1, 1, 1, 1, 4)))
    assert objectness_loss([p], [box], [t]).item() < 1e-8


def test_objectness_iou_detached():
    t = _slot_targets()
    p = ad.Tensor(np.full((1, 1, 1, 1), 0.3))
    box = ad.Tensor(np.array([0.6, 0.5, 0.8, 1.0]).reshape(1, 1, 1, 1, 4), requires_grad=True)
    ad.backward(objectness_loss([p], [box], [t]))
    assert box.grad is None or not np.any(box.grad)


# ------------------------------------------------------------------------ box


def test_box_examples():
    one = ad.Tensor(np.array([1.0]))
    zero = ad.Tensor(np.array([0.0]))
    two = ad.Tensor(np.array([2.0]))
    three = ad.Tensor(np.array([3.0]))
    iou = iou_corners((zero, zero, two, two), (one, zero, three, two)).item()
    assert iou == pytest.approx(1 / 3, abs=1e-12)
    assert 1 - iou == pytest.approx(0.666667, abs=1e-6)
    assert iou_np([0, 0, 2, 2], [1, 0, 3, 2]) == pytest.approx(1 / 3)


def test_box_loss_identical_and_disjoint():
    t = _slot_targets()
    same = ad.Tensor(t["box"].reshape(1, 1, 1, 1, 4))
    assert box_loss([same], [t]).item() == 0.0
    far = ad.Tensor(np.array([5.0, 5.0, 1.0, 1.0]).reshape(1, 1, 1, 1, 4))
    assert box_loss([far], [t]).item() == 1.0


def test_box_loss_empty_and_degenerate():
    t = _slot_targets()
    t["owner"] = np.full((1, 1, 1, 1), -1)
    assert box_loss([ad.Tensor(np.zeros((1, 1, 1, 1, 4)))], [t]).item() == 0.0
    bad = _slot_targets(box=np.reshape([0.5, 0.5, 0.0, 1.0], (1, 1, 1, 1, 4)))
    with pytest.raises(ContractViolation):
        box_loss([ad.Tensor(np.ones((1, 1, 1, 1, 4)))], [bad])


# ----------------------------------------------------------------------- pose


def test_pose_examples():
    t = _slot_targets(k=2, delta=np.array([1.0, 0.0]).reshape(1, 1, 1, 1, 2))
    dx = ad.Tensor(np.array([3.0, 100.0]).reshape(1, 1, 1, 1, 2))
    dy = ad.Tensor(np.array([4.0, -7.0]).reshape(1, 1, 1, 1, 2))
    assert pose_loss([dx], [dy], [t]).item() == 5.0
    same = ad.Tensor(np.zeros((1, 1, 1, 1, 2)))
    assert pose_loss([same], [same], [t]).item() == 0.0


def test_pose_all_unlabeled_is_zero_with_zero_gradient():
    t = _slot_targets(k=3, delta=np.zeros((1, 1, 1, 1, 3)))
    dx = ad.Tensor(np.ones((1, 1, 1, 1, 3)), requires_grad=True)
    dy = ad.Tensor(np.zeros((1, 1, 1, 1, 3)), requires_grad=True)
    out = pose_loss([dx], [dy], [t])
    assert out.item() == 0.0
    ad.backward(out)
    assert np.all(dx.grad == 0) and np.all(np.isfinite(dy.grad))


# ----------------------------------------------------------------- visibility


def test_visibility_examples():
    v = np.array([1.0, 0.0, 0.0, 0.0]).reshape(1, 2, 2)
    assert visibility_loss([v], [np.zeros((1, 2, 2))]).item() == 0.25
    n = 12
    u = np.full((1, n), 0.1)
    assert visibility_loss([u], [np.zeros((1, n))]).item() == pytest.approx(math.sqrt(n * 0.01) / n)
    assert visibility_loss([u], [u]).item() == 0.0
    with pytest.raises(ContractViolation):
        visibility_loss([u], [np.zeros((1, n + 1))])


# ---------------------------------------------------------------------- total


def test_total_examples():
    vals = dict(zip(TERMS, (0.2, 0.3, 0.1, 0.05, 0.15)))
    terms = {k: ad.Tensor(v) for k, v in vals.items()}
    assert total_loss(terms, LossWeights(1, 1, 1, 1, 1)).total == pytest.approx(0.8, abs=1e-15)
    assert total_loss(terms, LossWeights(0, 0, 0, 0, 0)).total == 0.0
    assert total_loss(terms, LossWeights(1, 0, 0, 0, 0)).total == 0.2
    with pytest.raises(ContractViolation):
        LossWeights(alpha=-1)
    with pytest.raises(ContractViolation):
        LossWeights(eps=0)


@pytest.mark.parametrize("seed", range(5))
def test_report_identity_and_non_negativity(seed):
    raw, vis, targets, _ = make_problem(seed)
    w = LossWeights()
    rep = hybrid_loss([raw], [vis], targets, ANCHORS, w, SIGMA)
    combo = w.alpha * rep.obj + w.beta * rep.box + w.gamma * rep.pose + w.zeta * rep.vis + w.lam * rep.corr
    assert rep.total == pytest.approx(combo, abs=1e-12)
    assert all(v >= 0 for v in rep.terms().values())
    assert rep.corr <= 1 + 1e-6
    assert set(rep.per_scale) == set(targets)


TERMS_AND_TOTAL = (*TERMS, "total")


@pytest.mark.parametrize("term", TERMS_AND_TOTAL)
@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients(term, seed):
    raw, vis, targets, frozen = make_problem(seed)
    f = loss_fn(term, targets, frozen)
    r_raw = ad.gradcheck(lambda t: f(t, vis), raw)
    r_vis = ad.gradcheck(lambda t: f(raw, t), vis)
    assert r_raw.passed, (term, r_raw.max_rel_error)
    assert r_vis.passed, (term, r_vis.max_rel_error)


@pytest.mark.parametrize("seed", range(3))
def test_frozen_pieces_match_live_values(seed):
    raw, vis, targets, frozen = make_problem(seed)
    live = loss_fn("total", targets)(ad.Tensor(raw), ad.Tensor(vis)).item()
    assert loss_fn("total", targets, frozen)(ad.Tensor(raw), ad.Tensor(vis)).item() == live
    # no gradient reaches the boxes through the objectness target
    x = ad.Tensor(raw, requires_grad=True)
    ad.backward(loss_fn("obj", targets)(x, ad.Tensor(vis)))
    assert not np.any(x.grad[..., 1:5])
