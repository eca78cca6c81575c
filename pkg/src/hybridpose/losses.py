"""Training objective: self-correlation, objectness, box, pose and visibility terms.

Every per-scale tensor carries a leading batch axis. Conventions:

* objectness, box and pose terms pool slots over the whole batch;
* visibility and self-correlation terms are computed per image and averaged
  over the batch;
* objectness, box, pose and visibility terms are summed over scales, the
  self-correlation term is averaged over scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .distribution import DEFAULT_SIGMA, grid_distribution
from .errors import ContractViolation
from .grid_head import Anchor, DecodedGrid, decode_grid

TERMS = ("obj", "box", "pose", "vis", "corr")
PROB_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # objectness
    beta: float = 0.05  # box
    gamma: float = 0.025  # pose
    zeta: float = 0.5  # visibility
    lam: float = 0.1  # self-correlation
    eps: float = 1e-8
    squared_corr: bool = True

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "zeta", "lam"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"loss weight {name} must be non-negative")
        if not self.eps > 0:
            raise ContractViolation("eps must be positive")

    def as_tuple(self) -> tuple[float, ...]:
        return self.alpha, self.beta, self.gamma, self.zeta, self.lam


@dataclass
class LossReport:
    obj: float
    box: float
    pose: float
    vis: float
    corr: float
    total: float
    per_scale: dict[int, dict[str, float]] = field(default_factory=dict)
    tensor: ad.Tensor | None = field(default=None, repr=False, compare=False)

    def terms(self) -> dict[str, float]:
        return {t: getattr(self, t) for t in TERMS}


# ------------------------------------------------------------------------- IoU


def xywh_center_to_corners(box):
    """(..., 4) center boxes ``(cx, cy, w, h)`` to corner tuples."""
    cx, cy, w, h = box[..., 0], box[..., 1], box[..., 2], box[..., 3]
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def iou_corners(a, b) -> ad.Tensor:
    """Differentiable IoU of corner boxes ``(x1, y1, x2, y2)`` given as 4-tuples of tensors."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = ad.clamp(ad.minimum(ax2, bx2) - ad.maximum(ax1, bx1), 0.0, None)
    ih = ad.clamp(ad.minimum(ay2, by2) - ad.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    return inter / (area_a + area_b - inter)


def iou_center(a, b) -> ad.Tensor:
    return iou_corners(xywh_center_to_corners(a), xywh_center_to_corners(b))


def iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of (..., 4) corner boxes, numpy only."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = ((a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
             + (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1]) - inter)
    return inter / union


# ---------------------------------------------------------------------- terms


def pearson_loss(d, v, eps: float = 1e-8, squared: bool = True, axes=None) -> ad.Tensor:
    """``1 - r^2`` with ``r`` the eps-guarded Pearson correlation over ``axes``."""
    d, v = ad.as_tensor(d), ad.as_tensor(v)
    if d.shape != v.shape:
        raise ContractViolation(f"correlation shapes differ: {d.shape} vs {v.shape}")
    dc = d - ad.mean(d, axis=axes, keepdims=True)
    vc = v - ad.mean(v, axis=axes, keepdims=True)
    cov = ad.sum_(dc * vc, axis=axes)
    denom = ad.sqrt(ad.sum_(ad.square(dc), axis=axes)) * ad.sqrt(ad.sum_(ad.square(vc), axis=axes)) + eps
    r = cov / denom
    return 1.0 - (ad.square(r) if squared else r)


def self_correlation_loss(dist: Sequence, vis: Sequence, eps: float = 1e-8,
                          squared: bool = True, breakdown: list | None = None) -> ad.Tensor:
    """Mean over scales of the per-image correlation loss (axis 0 is the batch)."""
    if len(dist) != len(vis) or not dist:
        raise ContractViolation("need matching, non-empty lists of distribution and visibility maps")
    per_scale = []
    for d, v in zip(dist, vis):
        d, v = ad.as_tensor(d), ad.as_tensor(v)
        if d.shape != v.shape:
            raise ContractViolation(f"correlation shapes differ: {d.shape} vs {v.shape}")
        axes = tuple(range(1, d.ndim))
        per_scale.append(ad.mean(pearson_loss(d, v, eps, squared, axes)))
    _record(breakdown, per_scale)
    return _mean_list(per_scale)


def _record(breakdown: list | None, per_scale: Sequence) -> None:
    if breakdown is not None:
        breakdown.extend(0.0 if t is None else ad.as_tensor(t).item() for t in per_scale)


def _mean_list(ts: Sequence[ad.Tensor]) -> ad.Tensor:
    total = ts[0]
    for t in ts[1:]:
        total = total + t
    return total * (1.0 / len(ts))


def _sum_list(ts: Sequence[ad.Tensor]) -> ad.Tensor:
    if not ts:
        return ad.Tensor(0.0)
    total = ts[0]
    for t in ts[1:]:
        total = total + t
    return total


def bce(p: ad.Tensor, q: np.ndarray) -> ad.Tensor:
    """Element-wise binary cross-entropy of prediction ``p`` against soft target ``q``."""
    if not np.all(np.isfinite(p.data)) or np.any(p.data < 0) or np.any(p.data > 1):
        raise ContractViolation("objectness must lie in (0, 1)")
    pc = ad.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(ad.log(pc) * q + ad.log(1.0 - pc) * (1.0 - q))


def _assigned_index(owner: np.ndarray):
    return np.nonzero(owner >= 0)


def objectness_targets(boxes: Sequence[ad.Tensor], targets: Sequence[Mapping]) -> list[np.ndarray]:
    """BCE targets ``objectness_target * IoU`` per stride, IoU clamped to [0, 1] and detached."""
    out = []
    for box, t in zip(boxes, targets):
        q = np.zeros(t["owner"].shape)
        idx = _assigned_index(t["owner"])
        if len(idx[0]):
            with ad.no_grad():
                iou = iou_center(ad.Tensor(box.data[idx]), ad.Tensor(t["box"][idx])).data
            q[idx] = t["objectness"][idx] * np.clip(iou, 0.0, 1.0)
        out.append(q)
    return out


def objectness_loss(objectness: Sequence[ad.Tensor], boxes: Sequence[ad.Tensor],
                    targets: Sequence[Mapping], breakdown: list | None = None,
                    frozen: Sequence[np.ndarray] | None = None) -> ad.Tensor:
    """Grid-weighted BCE against ``objectness_target * IoU``.

    ``frozen`` replaces the IoU-weighted targets, e.g. with values from
    :func:`objectness_targets` at another point.
    """
    qs = objectness_targets(boxes, targets) if frozen is None else frozen
    terms = [ad.mean(bce(p, q)) * float(t["weight"]) for p, q, t in zip(objectness, qs, targets)]
    _record(breakdown, terms)
    return _sum_list(terms)


def box_loss(boxes: Sequence[ad.Tensor], targets: Sequence[Mapping],
             breakdown: list | None = None) -> ad.Tensor:
    """Per-scale mean of ``1 - IoU`` over assigned slots, summed over scales."""
    terms = []
    for box, t in zip(boxes, targets):
        idx = _assigned_index(t["owner"])
        if not len(idx[0]):
            terms.append(None)
            continue
        tb = t["box"][idx]
        if np.any(tb[:, 2] <= 0) or np.any(tb[:, 3] <= 0):
            raise ContractViolation("degenerate target box")
        iou = iou_center(box[idx], ad.Tensor(tb))
        terms.append(ad.mean(1.0 - iou))
    _record(breakdown, terms)
    return _sum_list([t for t in terms if t is not None])


def pose_loss(kp_dx: Sequence[ad.Tensor], kp_dy: Sequence[ad.Tensor],
              targets: Sequence[Mapping], breakdown: list | None = None) -> ad.Tensor:
    """Per-scale mean over assigned slots of sum_k delta_k * ||c_k - c_hat_k||."""
    terms = []
    for dx, dy, t in zip(kp_dx, kp_dy, targets):
        idx = _assigned_index(t["owner"])
        if not len(idx[0]):
            terms.append(None)
            continue
        delta = t["delta"][idx]
        tk = t["keypoints"][idx]
        ex = dx[idx] - tk[..., 0]
        ey = dy[idx] - tk[..., 1]
        # unlabeled entries get a constant 1 under the root so their gradient stays 0
        sq = (ad.square(ex) + ad.square(ey)) * delta + (1.0 - delta)
        dist = ad.sqrt(sq) * delta
        terms.append(ad.mean(ad.sum_(dist, axis=-1)))
    _record(breakdown, terms)
    return _sum_list([t for t in terms if t is not None])


def visibility_loss(vis: Sequence, targets_vis: Sequence[np.ndarray],
                    breakdown: list | None = None) -> ad.Tensor:
    """Per-image ``||V - V_hat||_2 / n(V)`` averaged over the batch, summed over scales."""
    terms = []
    for v, tv in zip(vis, targets_vis):
        v = ad.as_tensor(v)
        tv = np.asarray(tv, dtype=np.float64)
        if v.shape != tv.shape:
            raise ContractViolation(f"visibility shapes differ: {v.shape} vs {tv.shape}")
        axes = tuple(range(1, v.ndim))
        n = int(np.prod(v.shape[1:]))
        norm = ad.sqrt(ad.sum_(ad.square(v - tv), axis=axes))
        terms.append(ad.mean(norm) * (1.0 / n))
    _record(breakdown, terms)
    return _sum_list(terms)


def total_loss(terms: Mapping[str, ad.Tensor], weights: LossWeights,
               per_scale: dict | None = None) -> LossReport:
    """Weighted sum of the five terms; the report keeps the total tensor for backward."""
    w = dict(zip(TERMS, weights.as_tuple()))
    parts = [ad.as_tensor(terms[t]) * w[t] for t in TERMS]
    total = _sum_list(parts)
    vals = {t: ad.as_tensor(terms[t]).item() for t in TERMS}
    return LossReport(total=total.item(), per_scale=per_scale or {}, tensor=total, **vals)


# ------------------------------------------------------------------ composite


def hybrid_loss(grids: Sequence[ad.Tensor], vis: Sequence[ad.Tensor], targets: Mapping[int, Mapping],
                anchors: Mapping[int, Sequence[Anchor]], weights: LossWeights = LossWeights(),
                sigma: float = DEFAULT_SIGMA, supports: list | None = None,
                obj_targets: list | None = None) -> LossReport:
    """Decode raw grids and evaluate every term.

    ``grids``/``vis`` are ordered like ``sorted(targets)``; each grid is
    (B, H, W, N_a, 5 + 2K) raw and each visibility tensor (B, H, W, N_a, K)
    activated. ``supports`` freezes the distribution truncation boxes and
    ``obj_targets`` the IoU-weighted objectness targets.
    """
    strides = sorted(targets)
    if len(grids) != len(strides) or len(vis) != len(strides):
        raise ContractViolation("one grid and one visibility tensor per stride required")
    decoded: list[DecodedGrid] = [decode_grid(g, anchors[s], s) for g, s in zip(grids, strides)]
    tl = [targets[s] for s in strides]
    dists = []
    for i, d in enumerate(decoded):
        D, sup = grid_distribution(d.kp_x, d.kp_y, d.objectness, sigma,
                                   None if supports is None else supports[i])
        dists.append(D)
    bd: dict[str, list] = {t: [] for t in TERMS}
    terms = {
        "obj": objectness_loss([d.objectness for d in decoded], [d.box for d in decoded], tl, bd["obj"],
                               obj_targets),
        "box": box_loss([d.box for d in decoded], tl, bd["box"]),
        "pose": pose_loss([d.kp_dx for d in decoded], [d.kp_dy for d in decoded], tl, bd["pose"]),
        "vis": visibility_loss(vis, [t["visibility"] for t in tl], bd["vis"]),
        "corr": self_correlation_loss(dists, vis, weights.eps, weights.squared_corr, bd["corr"]),
    }
    per_scale = {s: {t: bd[t][i] for t in TERMS} for i, s in enumerate(strides)}
    return total_loss(terms, weights, per_scale)


def distribution_supports(grids: Sequence[ad.Tensor], anchors, strides, sigma: float) -> list:
    """Truncation supports at the current predictions, for frozen-support checks."""
    out = []
    with ad.no_grad():
        for g, s in zip(grids, strides):
            d = decode_grid(ad.as_tensor(g), anchors[s], s)
            out.append(grid_distribution(d.kp_x, d.kp_y, d.objectness, sigma)[1])
    return out


def frozen_objectness_targets(grids: Sequence[ad.Tensor], targets: Mapping[int, Mapping], anchors) -> list:
    """Objectness targets at the current predictions, for frozen-target checks."""
    strides = sorted(targets)
    with ad.no_grad():
        boxes = [decode_grid(ad.as_tensor(g), anchors[s], s).box for g, s in zip(grids, strides)]
    return objectness_targets(boxes, [targets[s] for s in strides])
