"""Keypoint-similarity metrics: OKS, greedy matching and the AP/AR family."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractViolation, UndefinedOKSError
from .synthetic import SyntheticScene, gen_scene  # noqa: F401  scene generation is part of the toolkit
from .targets import GroundTruthPerson

# COCO per-keypoint sigmas; the OKS constant kappa used here is 2 * sigma
COCO_SIGMAS = np.array([0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72,
                        0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89]) / 10.0
UNIFORM_KAPPA = 0.1
OKS_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, np.inf), "medium": (32.0**2, 96.0**2), "large": (96.0**2, np.inf)}
MAX_DETS = 20


@dataclass(frozen=True)
class OksConfig:
    kappas: tuple[float, ...]

    def __post_init__(self):
        if not all(k > 0 for k in self.kappas):
            raise ContractViolation("OKS constants must be positive")

    @classmethod
    def for_keypoints(cls, k: int) -> "OksConfig":
        if k == 17:
            return cls(tuple(2.0 * COCO_SIGMAS))
        return cls((UNIFORM_KAPPA,) * k)


def oks(pred_keypoints, gt: GroundTruthPerson, cfg: OksConfig) -> float:
    """Object keypoint similarity over the labeled keypoints of ``gt``, area = box area."""
    delta = np.asarray(gt.delta, dtype=np.float64)
    if delta.sum() == 0:
        raise UndefinedOKSError("ground truth has no labeled keypoints")
    pred = np.asarray(pred_keypoints, dtype=np.float64).reshape(-1, 2)
    kappa = np.asarray(cfg.kappas, dtype=np.float64)
    if len(pred) != len(delta) or len(kappa) != len(delta):
        raise ContractViolation("keypoint count mismatch in OKS")
    d2 = ((pred - gt.keypoints) ** 2).sum(axis=1)
    e = np.exp(-d2 / (2.0 * gt.area * kappa**2))
    return float((e * delta).sum() / delta.sum())


def oks_matrix(dets: Sequence, gts: Sequence[GroundTruthPerson], cfg: OksConfig) -> np.ndarray:
    out = np.zeros((len(dets), len(gts)))
    for g, gt in enumerate(gts):
        if gt.delta.sum() == 0:
            continue
        for d, det in enumerate(dets):
            out[d, g] = oks(det.keypoints, gt, cfg)
    return out


@dataclass
class MetricReport:
    ap: float
    ap50: float
    ap75: float
    ap_medium: float
    ap_large: float
    ar: float
    ap_per_threshold: np.ndarray = field(repr=False)
    recall_per_threshold: np.ndarray = field(repr=False)
    pr_curves: np.ndarray = field(repr=False)  # (T, 101) interpolated precision

    def summary(self) -> dict[str, float]:
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75,
                "APM": self.ap_medium, "APL": self.ap_large, "AR": self.ar}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.summary().items():
            w.writerow([k, f"{v:.6f}"])
        for t, ap, rc in zip(OKS_THRESHOLDS, self.ap_per_threshold, self.recall_per_threshold):
            w.writerow([f"AP@{t:.2f}", f"{ap:.6f}"])
            w.writerow([f"R@{t:.2f}", f"{rc:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        return "\n".join(f"{k:>5s} = {v:.3f}" if np.isfinite(v) else f"{k:>5s} =   n/a"
                         for k, v in self.summary().items())


def _match_image(dets, gts, ious: np.ndarray, thr: float, gt_ignore: np.ndarray):
    """COCO greedy matching for one image; dets are already in score order."""
    order = np.argsort(gt_ignore, kind="mergesort")
    dt_match = np.full(len(dets), -1)
    gt_taken = np.zeros(len(gts), dtype=bool)
    dt_ignore = np.zeros(len(dets), dtype=bool)
    for d in range(len(dets)):
        best, level = -1, min(thr, 1 - 1e-10)
        for g in order:
            if gt_taken[g]:
                continue
            if best > -1 and not gt_ignore[best] and gt_ignore[g]:
                break
            if ious[d, g] < level:
                continue
            level, best = ious[d, g], g
        if best == -1:
            continue
        dt_match[d] = best
        gt_taken[best] = True
        dt_ignore[d] = gt_ignore[best]
    return dt_match, dt_ignore


def _det_area(det) -> float:
    return float(det.box[2] * det.box[3])


def accumulate(scores: np.ndarray, tp: np.ndarray, ignore: np.ndarray, n_gt: int):
    """Interpolated precision at the recall points and the final recall for one threshold."""
    if n_gt == 0:
        return np.full(len(RECALL_POINTS), -1.0), -1.0
    order = np.argsort(-scores, kind="mergesort")
    tp, ignore = tp[order], ignore[order]
    keep = ~ignore
    tps = np.cumsum(tp & keep)
    fps = np.cumsum(~tp & keep)
    tps, fps = tps[keep], fps[keep]
    q = np.zeros(len(RECALL_POINTS))
    if len(tps) == 0:
        return q, 0.0
    rc = tps / n_gt
    pr = tps / (tps + fps)
    # precision envelope
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    inds = np.searchsorted(rc, RECALL_POINTS, side="left")
    valid = inds < len(pr)
    q[valid] = pr[inds[valid]]
    return q, float(rc[-1])


def _evaluate_range(preds, gts, cfg, area_range):
    lo, hi = area_range
    curves = np.zeros((len(OKS_THRESHOLDS), len(RECALL_POINTS)))
    recalls = np.zeros(len(OKS_THRESHOLDS))
    per_thr = [([], [], []) for _ in OKS_THRESHOLDS]
    n_gt = 0
    for img_id, img_gts in gts.items():
        dets = sorted(preds.get(img_id, []), key=lambda p: -p.score)[:MAX_DETS]
        gt_ignore = np.array([g.delta.sum() == 0 or not (lo <= g.area <= hi) for g in img_gts], dtype=bool)
        n_gt += int((~gt_ignore).sum())
        ious = oks_matrix(dets, img_gts, cfg)
        out_of_range = np.array([not (lo <= _det_area(d) <= hi) for d in dets], dtype=bool)
        scores = np.array([d.score for d in dets], dtype=np.float64)
        for t, thr in enumerate(OKS_THRESHOLDS):
            match, ign = _match_image(dets, img_gts, ious, thr, gt_ignore)
            matched = match >= 0
            ign = ign | (~matched & out_of_range)
            per_thr[t][0].append(scores)
            per_thr[t][1].append(matched)
            per_thr[t][2].append(ign)
    for t in range(len(OKS_THRESHOLDS)):
        s, m, ig = (np.concatenate(x) if x else np.zeros(0) for x in per_thr[t])
        curves[t], recalls[t] = accumulate(s.astype(np.float64), m.astype(bool), ig.astype(bool), n_gt)
    return curves, recalls


def _mean_defined(x: np.ndarray) -> float:
    x = np.asarray(x)
    if np.any(x < 0):
        return float("nan")
    return float(np.mean(x))


def evaluate(preds: Mapping, gts: Mapping[object, Sequence[GroundTruthPerson]], cfg: OksConfig) -> MetricReport:
    """COCO-style keypoint AP/AR. ``preds`` maps image id to scored instances.

    Metrics with no ground truth in their area range are NaN.
    """
    unknown = set(preds) - set(gts)
    if unknown:
        raise ContractViolation(f"predictions for unknown image ids: {sorted(map(str, unknown))}")
    curves, recalls = _evaluate_range(preds, gts, cfg, AREA_RANGES["all"])
    med, _ = _evaluate_range(preds, gts, cfg, AREA_RANGES["medium"])
    large, _ = _evaluate_range(preds, gts, cfg, AREA_RANGES["large"])
    ap_t = np.array([_mean_defined(c) for c in curves])
    return MetricReport(
        ap=_mean_defined(ap_t) if np.all(np.isfinite(ap_t)) else float("nan"),
        ap50=float(ap_t[0]),
        ap75=float(ap_t[5]),
        ap_medium=_mean_defined(med),
        ap_large=_mean_defined(large),
        ar=_mean_defined(recalls),
        ap_per_threshold=ap_t,
        recall_per_threshold=recalls,
        pr_curves=curves,
    )


def roc_auc(labels, scores) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def match_by_box(dets: Sequence, gts: Sequence[GroundTruthPerson], iou_threshold: float = 0.5) -> dict[int, int]:
    """Greedy score-ordered box matching; returns {gt index: det index}."""
    from .losses import iou_np

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken: dict[int, int] = {}
    for d in order:
        x, y, w, h = dets[d].box
        best, best_iou = -1, iou_threshold
        for g, gt in enumerate(gts):
            if g in taken:
                continue
            gx, gy, gw, gh = gt.box
            iou = float(iou_np([x, y, x + w, y + h], [gx, gy, gx + gw, gy + gh]))
            if iou >= best_iou:
                best, best_iou = g, iou
        if best >= 0:
            taken[best] = d
    return taken


@dataclass
class VisibilityStats:
    labels: np.ndarray  # delta of matched ground-truth keypoints
    scores: np.ndarray  # visibility scores of the matched detections

    @property
    def auc(self) -> float:
        return roc_auc(self.labels, self.scores)

    def removal_rates(self, threshold: float = 0.5) -> tuple[float, float]:
        """Fractions of (occluded, visible) keypoints whose score falls below ``threshold``."""
        dropped = self.scores < threshold
        occ, vis = ~self.labels.astype(bool), self.labels.astype(bool)
        occ_rate = float(dropped[occ].mean()) if occ.any() else float("nan")
        vis_rate = float(dropped[vis].mean()) if vis.any() else float("nan")
        return occ_rate, vis_rate


def visibility_stats(preds: Mapping, gts: Mapping[object, Sequence[GroundTruthPerson]],
                     iou_threshold: float = 0.5) -> VisibilityStats:
    labels, scores = [], []
    for img_id, img_gts in gts.items():
        dets = preds.get(img_id, [])
        for g, d in match_by_box(dets, img_gts, iou_threshold).items():
            labels.append(img_gts[g].delta)
            scores.append(dets[d].vis_scores)
    if not labels:
        return VisibilityStats(np.zeros(0, dtype=np.int64), np.zeros(0))
    return VisibilityStats(np.concatenate(labels), np.concatenate(scores))
