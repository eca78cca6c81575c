"""Finite-difference checks of every loss term on small random problems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .distribution import TRUNCATION
from .grid_head import Anchor, decode_grid
from .losses import TERMS, LossWeights, distribution_supports, frozen_objectness_targets, hybrid_loss
from .synthetic import gen_scene
from .targets import build_targets, stack_targets

IMAGE = (48, 48)
STRIDE = 16
ANCHORS = {STRIDE: [Anchor(24.0, 40.0)]}
K = 3
SIGMA = 1.0
# finite-difference step and the margin kept from max ties and truncation edges
STEP = 1e-5
MARGIN = 1e-3


def _margins(raw: np.ndarray) -> tuple[float, float]:
    """Smallest max-merge gap and smallest distance to a truncation edge."""
    d = decode_grid(ad.Tensor(raw), ANCHORS[STRIDE], STRIDE)
    xs = d.kp_x.data.reshape(raw.shape[0], -1, 1, K)
    ys = d.kp_y.data.reshape(raw.shape[0], -1, 1, K)
    ws = d.objectness.data.reshape(raw.shape[0], -1, 1, 1)
    h, w = raw.shape[1:3]
    u = np.arange(w) + 0.5
    v = np.arange(h) + 0.5
    edge_x = np.abs(np.abs(u[None, None, :, None, None] - xs[:, :, None]) - TRUNCATION * SIGMA)
    edge_y = np.abs(np.abs(v[None, None, :, None, None] - ys[:, :, None]) - TRUNCATION * SIGMA)
    gx = np.exp(-(u[None, None, :, None, None] - xs[:, :, None]) ** 2 / (2 * SIGMA**2))
    gx = gx * (np.abs(u[None, None, :, None, None] - xs[:, :, None]) <= TRUNCATION * SIGMA)
    gy = np.exp(-(v[None, None, :, None, None] - ys[:, :, None]) ** 2 / (2 * SIGMA**2))
    gy = gy * (np.abs(v[None, None, :, None, None] - ys[:, :, None]) <= TRUNCATION * SIGMA)
    contrib = ws[:, :, None, None] * gy[:, :, :, None] * gx[:, :, None, :]
    top = np.sort(contrib, axis=1)
    live = top[:, -1] > 0
    gap = (top[:, -1] - top[:, -2])[live]
    return float(gap.min()) if gap.size else np.inf, float(min(edge_x.min(), edge_y.min()))


def make_problem(seed: int, batch: int = 1):
    """Raw grid, visibility maps, targets and frozen pieces, away from max ties and truncation edges.

    Draws are repeated with derived seeds until the point is safe, which is
    how the excluded neighbourhoods are skipped.
    """
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        scenes = [gen_scene(int(rng.integers(1 << 30)), 2, IMAGE, 0.3, K) for _ in range(batch)]
        h, w = IMAGE[0] // STRIDE, IMAGE[1] // STRIDE
        raw = rng.normal(0.0, 1.0, (batch, h, w, 1, 5 + 2 * K))
        gap, edge = _margins(raw)
        if gap > MARGIN and edge > MARGIN:
            break
    else:
        raise RuntimeError("no safe point found")
    vis = rng.uniform(0.05, 0.95, (batch, h, w, 1, K))
    ts = [build_targets(sc.persons, IMAGE, ANCHORS, K, SIGMA) for sc in scenes]
    targets = stack_targets(ts)
    frozen = (distribution_supports([ad.Tensor(raw)], ANCHORS, [STRIDE], SIGMA),
              frozen_objectness_targets([ad.Tensor(raw)], targets, ANCHORS))
    return raw, vis, targets, frozen


TERM_WEIGHT = {"obj": "alpha", "box": "beta", "pose": "gamma", "vis": "zeta", "corr": "lam"}


def term_weights(term: str) -> LossWeights:
    """Weights selecting a single term, or the defaults for ``"total"``."""
    if term == "total":
        return LossWeights()
    only = dict.fromkeys(TERM_WEIGHT.values(), 0.0)
    only[TERM_WEIGHT[term]] = 1.0
    return LossWeights(**only)


def loss_fn(term, targets, frozen=None):
    """``term`` is a term name, ``"total"`` or an explicit :class:`LossWeights`.

    ``frozen`` holds the truncation supports and objectness targets; the
    latter depend on the boxes only through a detached IoU, so finite
    differences need them fixed.
    """
    weights = term if isinstance(term, LossWeights) else term_weights(term)
    supports, obj = (None, None) if frozen is None else frozen

    def f(raw, vis):
        return hybrid_loss([raw], [vis], targets, ANCHORS, weights, SIGMA, supports, obj).tensor

    return f


@dataclass
class CheckRow:
    term: str
    max_rel_error: float
    passed: bool


def run_loss_gradchecks(seeds=range(20), tol: float = 1e-4, step: float = STEP) -> list[CheckRow]:
    """Worst relative error per term (and the total) over ``seeds``, w.r.t. raw grids and visibility maps."""
    worst = {t: 0.0 for t in (*TERMS, "total")}
    ok = dict.fromkeys(worst, True)
    for seed in seeds:
        raw, vis, targets, frozen = make_problem(int(seed))
        for term in worst:
            f = loss_fn(term, targets, frozen)
            for r in (ad.gradcheck(lambda t: f(t, vis), raw, step, tol),
                      ad.gradcheck(lambda t: f(raw, t), vis, step, tol)):
                worst[term] = max(worst[term], r.max_rel_error)
                ok[term] = ok[term] and r.passed
    return [CheckRow(t, worst[t], ok[t]) for t in worst]
