"""From raw multi-scale predictions to filtered person instances."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractViolation
from .grid_head import Anchor, decode_grid_np, visibility_cell
from .losses import iou_np

DEFAULT_CONF = 0.25
DEFAULT_NMS_IOU = 0.65
DEFAULT_VIS = 0.5


@dataclass
class PersonInstance:
    box: tuple[float, float, float, float]  # x, y, w, h pixels
    score: float
    keypoints: np.ndarray  # (K, 2) pixels
    vis_scores: np.ndarray  # (K,)
    kept: np.ndarray  # (K,) bool
    stride: int = 0
    anchor: int = 0
    cell: tuple[int, int] = (0, 0)
    vis_clamped: np.ndarray | None = None

    @property
    def corners(self) -> np.ndarray:
        x, y, w, h = self.box
        return np.array([x, y, x + w, y + h])

    def to_dict(self) -> dict:
        return {
            "box": [float(v) for v in self.box],
            "score": float(self.score),
            "keypoints": [[float(x), float(y)] for x, y in self.keypoints],
            "vis_scores": [float(v) for v in self.vis_scores],
            "kept": [bool(v) for v in self.kept],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PersonInstance":
        kps = np.asarray(d["keypoints"], dtype=np.float64).reshape(-1, 2)
        vis = np.asarray(d.get("vis_scores", np.ones(len(kps))), dtype=np.float64)
        kept = np.asarray(d.get("kept", np.ones(len(kps), dtype=bool)), dtype=bool)
        return cls(tuple(float(v) for v in d["box"]), float(d["score"]), kps, vis, kept)


@dataclass
class ScaleOutput:
    """One stride's raw grid (H, W, N_a, 5 + 2K) and activated visibility maps (H, W, N_a, K)."""

    stride: int
    grid: np.ndarray
    vis: np.ndarray


def extract_candidates(outputs: Sequence[ScaleOutput], anchors: Mapping[int, Sequence[Anchor]],
                       conf_threshold: float = DEFAULT_CONF,
                       vis_threshold: float = DEFAULT_VIS) -> list[PersonInstance]:
    """Decode every slot whose objectness reaches ``conf_threshold``.

    Candidates are ordered by stride, then row, column and anchor.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ContractViolation("conf_threshold must lie in [0, 1]")
    out: list[PersonInstance] = []
    for so in outputs:
        s = so.stride
        dec = decode_grid_np(so.grid, anchors[s], s)
        h, w, na, k = so.vis.shape
        for i, j, a in zip(*np.nonzero(dec["objectness"] >= conf_threshold)):
            tx, ty, tw, th = dec["box"][i, j, a]
            cx, cy = s * (j + tx), s * (i + ty)
            bw, bh = s * tw, s * th
            kps = np.stack([s * dec["kp_x"][i, j, a], s * dec["kp_y"][i, j, a]], axis=1)
            vis = np.empty(k)
            clamped = np.zeros(k, dtype=bool)
            for kk in range(k):
                r, c, cl = visibility_cell(kps[kk, 0], kps[kk, 1], s, h, w)
                vis[kk] = so.vis[r, c, a, kk]
                clamped[kk] = cl
            out.append(PersonInstance(
                box=(cx - bw / 2, cy - bh / 2, bw, bh),
                score=float(dec["objectness"][i, j, a]),
                keypoints=kps,
                vis_scores=vis,
                kept=vis >= vis_threshold,
                stride=s,
                anchor=int(a),
                cell=(int(i), int(j)),
                vis_clamped=clamped,
            ))
    return out


def nms(instances: Sequence[PersonInstance], iou_threshold: float = DEFAULT_NMS_IOU) -> list[PersonInstance]:
    """Greedy suppression by descending score; equal scores keep the earlier instance."""
    if not 0.0 < iou_threshold < 1.0:
        raise ContractViolation("iou_threshold must lie in (0, 1)")
    order = sorted(range(len(instances)), key=lambda i: (-instances[i].score, i))
    keep: list[int] = []
    for i in order:
        ci = instances[i].corners
        if all(iou_np(ci, instances[j].corners) < iou_threshold for j in keep):
            keep.append(i)
    return [instances[i] for i in keep]


def filter_keypoints(instance: PersonInstance, vis_threshold: float = DEFAULT_VIS) -> PersonInstance:
    """Mark keypoints whose visibility score reaches the threshold; coordinates are kept."""
    if not 0.0 <= vis_threshold <= 1.0:
        raise ContractViolation("vis_threshold must lie in [0, 1]")
    return dataclasses.replace(instance, kept=np.asarray(instance.vis_scores) >= vis_threshold)


def decode_predictions(outputs: Sequence[ScaleOutput], anchors: Mapping[int, Sequence[Anchor]],
                       conf_threshold: float = DEFAULT_CONF, iou_threshold: float = DEFAULT_NMS_IOU,
                       vis_threshold: float = DEFAULT_VIS) -> list[PersonInstance]:
    """Candidates from all scales, one NMS pass, then visibility filtering."""
    cands = extract_candidates(outputs, anchors, conf_threshold, vis_threshold)
    return [filter_keypoints(p, vis_threshold) for p in nms(cands, iou_threshold)]
