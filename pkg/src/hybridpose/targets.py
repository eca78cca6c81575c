"""Ground-truth assignment to (scale, cell, anchor) slots."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import grid_head
from .distribution import DEFAULT_SIGMA, build_target_visibility
from .errors import ContractViolation
from .grid_head import Anchor, DecodedBox

DEFAULT_RATIO_THRESHOLD = 4.0
DEFAULT_GRID_WEIGHTS = {8: 4.0, 16: 1.0, 32: 0.25, 64: 0.0625}
KEYPOINT_CLAMP = 0.99


@dataclass
class GroundTruthPerson:
    """A labeled person. ``box`` is ``(x, y, w, h)`` in pixels, top-left origin."""

    box: tuple[float, float, float, float]
    keypoints: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        self.delta = np.asarray(self.delta, dtype=np.int64).reshape(-1)
        if len(self.keypoints) != len(self.delta):
            raise ContractViolation("keypoints and delta flags differ in length")
        if not np.isin(self.delta, (0, 1)).all():
            raise ContractViolation("delta flags must be 0 or 1")

    @property
    def num_keypoints(self) -> int:
        return len(self.delta)

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.box
        return x + w / 2, y + h / 2

    @property
    def area(self) -> float:
        return self.box[2] * self.box[3]

    @property
    def degenerate(self) -> bool:
        return not (self.box[2] > 0 and self.box[3] > 0)


@dataclass
class ScaleTargets:
    """Supervision for one stride. Arrays are indexed (row, col, anchor, ...)."""

    stride: int
    weight: float
    objectness: np.ndarray  # (H, W, Na) in {0, 1}
    owner: np.ndarray  # (H, W, Na) person index or -1
    box: np.ndarray  # (H, W, Na, 4) decoded-space targets relative to cell origin
    box_raw: np.ndarray  # (H, W, Na, 4) raw preimages
    keypoints: np.ndarray  # (H, W, Na, K, 2) offsets in grid units relative to cell origin
    keypoints_raw: np.ndarray  # (H, W, Na, K, 2)
    delta: np.ndarray  # (H, W, Na, K)
    kp_clamped: np.ndarray  # (H, W, Na, K) bool
    visibility: np.ndarray  # (H, W, Na, K) target maps

    @property
    def assigned(self) -> np.ndarray:
        return self.owner >= 0

    @property
    def num_assigned(self) -> int:
        return int(self.assigned.sum())


@dataclass
class TargetSet:
    scales: dict[int, ScaleTargets]
    skipped: list[tuple[int, str]] = field(default_factory=list)


def ratio(box_w: float, box_h: float, anchor: Anchor) -> float:
    return max(box_w / anchor.w, anchor.w / box_w, box_h / anchor.h, anchor.h / box_h)


def match_anchors(person: GroundTruthPerson, anchors: Mapping[int, Sequence[Anchor]],
                  ratio_threshold: float = DEFAULT_RATIO_THRESHOLD) -> list[tuple[int, int]]:
    """``(stride, anchor index)`` pairs whose side ratios to the box stay under the threshold."""
    if not ratio_threshold > 1:
        raise ContractViolation("ratio_threshold must exceed 1")
    _, _, bw, bh = person.box
    if person.degenerate:
        return []
    return [(s, a) for s in sorted(anchors) for a, anc in enumerate(anchors[s])
            if ratio(bw, bh, anc) < ratio_threshold]


def assign_cells(person: GroundTruthPerson, stride: int, grid_shape: tuple[int, int]) -> list[tuple[int, int]]:
    """Containing cell plus the nearest horizontal/vertical neighbours that can represent the center.

    A neighbour is used only when the center offset it would need lies inside
    the open decode range (-0.5, 1.5). At a sub-cell position of exactly 0.5
    both candidate neighbours would need an offset on the bound, so none is used.
    """
    h, w = grid_shape
    cx, cy = person.center
    gx, gy = cx / stride, cy / stride
    j, i = math.floor(gx), math.floor(gy)
    if not (0 <= i < h and 0 <= j < w):
        raise ContractViolation(f"person center ({cx}, {cy}) outside the image")
    fx, fy = gx - j, gy - i
    cells = [(i, j)]
    if fx < 0.5 and j - 1 >= 0:
        cells.append((i, j - 1))
    elif fx > 0.5 and j + 1 < w:
        cells.append((i, j + 1))
    if fy < 0.5 and i - 1 >= 0:
        cells.append((i - 1, j))
    elif fy > 0.5 and i + 1 < h:
        cells.append((i + 1, j))
    return cells


def shape_iou(bw: float, bh: float, anchor: Anchor) -> float:
    """IoU of a box and an anchor sharing a center."""
    inter = min(bw, anchor.w) * min(bh, anchor.h)
    return inter / (bw * bh + anchor.w * anchor.h - inter)


def _empty_scale(stride, weight, h, w, na, k) -> ScaleTargets:
    return ScaleTargets(
        stride=stride,
        weight=weight,
        objectness=np.zeros((h, w, na)),
        owner=np.full((h, w, na), -1, dtype=np.int64),
        box=np.zeros((h, w, na, 4)),
        box_raw=np.zeros((h, w, na, 4)),
        keypoints=np.zeros((h, w, na, k, 2)),
        keypoints_raw=np.zeros((h, w, na, k, 2)),
        delta=np.zeros((h, w, na, k)),
        kp_clamped=np.zeros((h, w, na, k), dtype=bool),
        visibility=np.zeros((h, w, na, k)),
    )


def build_targets(persons: Sequence[GroundTruthPerson], image_size: tuple[int, int],
                  anchors: Mapping[int, Sequence[Anchor]], num_keypoints: int,
                  sigma: float = DEFAULT_SIGMA, ratio_threshold: float = DEFAULT_RATIO_THRESHOLD,
                  grid_weights: Mapping[int, float] | None = None) -> TargetSet:
    """Fill every supervision tensor for one scene.

    Slot conflicts go to the person whose box has the larger center-aligned IoU
    with the slot's anchor (first person on exact ties).
    """
    height, width = image_size
    strides = grid_head.check_scales(list(anchors), height, width)
    weights = dict(DEFAULT_GRID_WEIGHTS)
    if grid_weights:
        weights.update({int(s): float(v) for s, v in grid_weights.items()})
    for p in persons:
        if p.num_keypoints != num_keypoints:
            raise ContractViolation("inconsistent keypoint count across persons")

    scales = {s: _empty_scale(s, weights.get(s, 1.0), height // s, width // s, len(anchors[s]), num_keypoints)
              for s in strides}
    skipped: list[tuple[int, str]] = []
    best_iou = {s: np.full((height // s, width // s, len(anchors[s])), -1.0) for s in strides}
    assignment: dict[int, list[tuple[int, int]]] = {s: [] for s in strides}

    for pi, person in enumerate(persons):
        if person.degenerate:
            reason = "degenerate box and no visible keypoints" if person.delta.sum() == 0 else "degenerate box"
            skipped.append((pi, reason))
            continue
        matches = match_anchors(person, anchors, ratio_threshold)
        if not matches:
            skipped.append((pi, "no anchor within ratio threshold"))
            continue
        _, _, bw, bh = person.box
        for s, a in matches:
            assignment[s].append((pi, a))
            st = scales[s]
            anchor = anchors[s][a]
            iou = shape_iou(bw, bh, anchor)
            for i, j in assign_cells(person, s, st.owner.shape[:2]):
                if iou <= best_iou[s][i, j, a]:
                    continue
                best_iou[s][i, j, a] = iou
                _fill_slot(st, person, pi, anchor, s, i, j, a)

    vis_shapes = {s: scales[s].owner.shape for s in strides}
    vis = build_target_visibility(list(persons), sigma, vis_shapes, assignment, num_keypoints)
    for s in strides:
        scales[s].visibility = vis[s]
    return TargetSet(scales, skipped)


def _fill_slot(st: ScaleTargets, person: GroundTruthPerson, pi: int, anchor: Anchor,
               s: int, i: int, j: int, a: int) -> None:
    cx, cy = person.center
    _, _, bw, bh = person.box
    box = DecodedBox(cx / s - j, cy / s - i, bw / s, bh / s, (i, j), s)
    st.owner[i, j, a] = pi
    st.objectness[i, j, a] = 1.0
    st.box[i, j, a] = (box.tx, box.ty, box.tw, box.th)
    st.box_raw[i, j, a] = grid_head.encode_box(box, anchor, s)
    bx, by = grid_head.keypoint_bounds(anchor, s)
    for k, (kx, ky) in enumerate(person.keypoints):
        dx, dy = kx / s - j, ky / s - i
        cdx = float(np.clip(dx, -KEYPOINT_CLAMP * bx, KEYPOINT_CLAMP * bx))
        cdy = float(np.clip(dy, -KEYPOINT_CLAMP * by, KEYPOINT_CLAMP * by))
        st.kp_clamped[i, j, a, k] = (cdx != dx) or (cdy != dy)
        st.keypoints[i, j, a, k] = (cdx, cdy)
        st.keypoints_raw[i, j, a, k] = grid_head.encode_keypoint(cdx, cdy, anchor, s)
    st.delta[i, j, a] = person.delta


def stack_targets(target_sets: Sequence[TargetSet]) -> dict[int, dict[str, np.ndarray]]:
    """Batch per-scene targets into arrays with a leading batch axis."""
    out: dict[int, dict[str, np.ndarray]] = {}
    for s in target_sets[0].scales:
        per = [ts.scales[s] for ts in target_sets]
        out[s] = {
            "weight": per[0].weight,
            "objectness": np.stack([p.objectness for p in per]),
            "owner": np.stack([p.owner for p in per]),
            "box": np.stack([p.box for p in per]),
            "keypoints": np.stack([p.keypoints for p in per]),
            "delta": np.stack([p.delta for p in per]),
            "visibility": np.stack([p.visibility for p in per]),
        }
    return out
