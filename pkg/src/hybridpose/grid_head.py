"""Anchor-grid decoding of boxes, keypoints and visibility scores.

All decoded quantities are in grid units relative to the origin of the cell
``(i, j)`` (row ``i``, column ``j``) that produced them; pixel positions are
``s * (j + x, i + y)`` for stride ``s``.

Raw channel layout of one slot (``N_o = 5 + 2K`` values)::

    [objectness, t_x, t_y, t_w, t_h, c_x1, c_y1, ..., c_xK, c_yK]
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, NotInvertibleError

DEFAULT_SCALES = (8, 16, 32, 64)


@dataclass(frozen=True)
class Anchor:
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractViolation(f"anchor sides must be positive, got {self.w}x{self.h}")


def default_anchors(stride: int) -> list[Anchor]:
    """One person-shaped anchor per scale."""
    return [Anchor(4.0 * stride, 8.0 * stride)]


def check_scales(scales: Sequence[int], height: int, width: int) -> tuple[int, ...]:
    scales = tuple(int(s) for s in scales)
    if not scales or len(set(scales)) != len(scales):
        raise ContractViolation(f"scales must be a non-empty set, got {scales}")
    for s in scales:
        if s <= 0 or height % s or width % s:
            raise ContractViolation(f"stride {s} does not divide image size {height}x{width}")
    return tuple(sorted(scales))


def num_outputs(num_keypoints: int) -> int:
    return 5 + 2 * num_keypoints


@dataclass(frozen=True)
class DecodedBox:
    """Box in grid units relative to its cell origin."""

    tx: float
    ty: float
    tw: float
    th: float
    cell: tuple[int, int] = (0, 0)
    stride: int = 1

    @property
    def center_px(self) -> tuple[float, float]:
        i, j = self.cell
        return self.stride * (j + self.tx), self.stride * (i + self.ty)

    @property
    def size_px(self) -> tuple[float, float]:
        return self.stride * self.tw, self.stride * self.th

    @property
    def xywh(self) -> tuple[float, float, float, float]:
        (cx, cy), (w, h) = self.center_px, self.size_px
        return cx - w / 2, cy - h / 2, w, h


@dataclass(frozen=True)
class DecodedKeypoint:
    dx: float
    dy: float
    cell: tuple[int, int] = (0, 0)
    stride: int = 1

    @property
    def px(self) -> tuple[float, float]:
        i, j = self.cell
        return self.stride * (j + self.dx), self.stride * (i + self.dy)


def _sig(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def _check_finite(raw, what: str) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ContractViolation(f"{what}: raw values must be finite")
    return raw


def decode_box(raw, anchor: Anchor, stride: int, cell: tuple[int, int] = (0, 0)) -> DecodedBox:
    tx, ty, tw, th = _check_finite(raw, "decode_box")
    return DecodedBox(
        2.0 * _sig(tx) - 0.5,
        2.0 * _sig(ty) - 0.5,
        anchor.w / stride * (2.0 * _sig(tw)) ** 2,
        anchor.h / stride * (2.0 * _sig(th)) ** 2,
        tuple(cell),
        stride,
    )


def decode_keypoints(raw, anchor: Anchor, stride: int,
                     cell: tuple[int, int] = (0, 0)) -> list[DecodedKeypoint]:
    raw = _check_finite(raw, "decode_keypoints").reshape(-1, 2)
    sx, sy = anchor.w / stride, anchor.h / stride
    return [DecodedKeypoint(sx * (4.0 * _sig(cx) - 2.0), sy * (4.0 * _sig(cy) - 2.0), tuple(cell), stride)
            for cx, cy in raw]


def encode_box(box: DecodedBox, anchor: Anchor, stride: int) -> tuple[float, float, float, float]:
    """Inverse of :func:`decode_box`; raises on values at or outside the open ranges."""
    out = []
    for name, v in (("tx", box.tx), ("ty", box.ty)):
        if not -0.5 < v < 1.5:
            raise NotInvertibleError(f"{name}={v} outside (-0.5, 1.5)")
        out.append(_logit((v + 0.5) / 2.0))
    for name, v, a in (("tw", box.tw, anchor.w), ("th", box.th, anchor.h)):
        hi = 4.0 * a / stride
        if not 0.0 < v < hi:
            raise NotInvertibleError(f"{name}={v} outside (0, {hi})")
        out.append(_logit(math.sqrt(v * stride / a) / 2.0))
    return tuple(out)


def keypoint_bounds(anchor: Anchor, stride: int) -> tuple[float, float]:
    """Open half-ranges of decoded keypoint offsets along x and y."""
    return 2.0 * anchor.w / stride, 2.0 * anchor.h / stride


def encode_keypoint(dx: float, dy: float, anchor: Anchor, stride: int) -> tuple[float, float]:
    bx, by = keypoint_bounds(anchor, stride)
    if not (-bx < dx < bx and -by < dy < by):
        raise NotInvertibleError(f"keypoint offset ({dx}, {dy}) outside (+-{bx}, +-{by})")
    return _logit((dx / bx + 1.0) / 2.0), _logit((dy / by + 1.0) / 2.0)


class VisibilityLookup(NamedTuple):
    score: float
    row: int
    col: int
    clamped: bool


def visibility_cell(px: float, py: float, stride: int, height: int, width: int) -> tuple[int, int, bool]:
    """Cell (row, col) whose center is nearest to a pixel position, clamped to the map.

    ``floor(p / s)`` is ``round(p / s - 0.5)`` with halves rounded up.
    """
    col = math.floor(px / stride)
    row = math.floor(py / stride)
    r = min(max(row, 0), height - 1)
    c = min(max(col, 0), width - 1)
    return r, c, (r != row or c != col)


def visibility_score(vis: np.ndarray, kp: DecodedKeypoint | tuple[float, float], anchor_index: int,
                     keypoint_index: int, stride: int | None = None) -> VisibilityLookup:
    """Read the visibility map ``vis`` (H, W, N_a, K) at a keypoint's cell."""
    vis = np.asarray(vis)
    h, w, na, k = vis.shape
    if not 0 <= anchor_index < na:
        raise ContractViolation(f"anchor index {anchor_index} out of range [0, {na})")
    if not 0 <= keypoint_index < k:
        raise ContractViolation(f"keypoint index {keypoint_index} out of range [0, {k})")
    if isinstance(kp, DecodedKeypoint):
        px, py = kp.px
        stride = kp.stride if stride is None else stride
    else:
        px, py = kp
        if stride is None:
            raise ContractViolation("stride required for pixel-coordinate lookups")
    r, c, clamped = visibility_cell(px, py, stride, h, w)
    return VisibilityLookup(float(vis[r, c, anchor_index, keypoint_index]), r, c, clamped)


# ------------------------------------------------------------- tensor decoding


@dataclass
class DecodedGrid:
    """Differentiable decode of one scale. Shapes are (B, H, W, N_a[, K])."""

    objectness: ad.Tensor  # sigmoid-activated
    box: ad.Tensor  # (..., 4): tx', ty', tw', th' relative to cell origin
    kp_dx: ad.Tensor  # (..., K) grid units relative to cell origin
    kp_dy: ad.Tensor
    kp_x: ad.Tensor  # absolute grid units (column + dx)
    kp_y: ad.Tensor


def anchor_scale_arrays(anchors: Sequence[Anchor], stride: int) -> tuple[np.ndarray, np.ndarray]:
    aw = np.array([a.w / stride for a in anchors])
    ah = np.array([a.h / stride for a in anchors])
    return aw, ah


def decode_grid(raw: ad.Tensor, anchors: Sequence[Anchor], stride: int) -> DecodedGrid:
    """Decode a raw grid tensor (B, H, W, N_a, 5 + 2K)."""
    raw = ad.as_tensor(raw)
    nb, h, w, na, no = raw.shape
    if na != len(anchors) or (no - 5) % 2 or no < 5:
        raise ContractViolation(f"grid shape {raw.shape} inconsistent with {len(anchors)} anchors")
    k = (no - 5) // 2
    aw, ah = anchor_scale_arrays(anchors, stride)
    sig = ad.sigmoid(raw)
    obj = sig[..., 0]
    txy = sig[..., 1:3] * 2.0 - 0.5
    twh = ad.square(sig[..., 3:5] * 2.0) * np.stack([aw, ah], axis=-1)[None, None, None]
    box = ad.reshape(ad.stack([txy[..., 0], txy[..., 1], twh[..., 0], twh[..., 1]], axis=-1),
                     (nb, h, w, na, 4))
    kp = sig[..., 5:].reshape(nb, h, w, na, k, 2)
    dx = (kp[..., 0] * 4.0 - 2.0) * aw[None, None, None, :, None]
    dy = (kp[..., 1] * 4.0 - 2.0) * ah[None, None, None, :, None]
    cols = np.arange(w, dtype=np.float64)[None, None, :, None, None]
    rows = np.arange(h, dtype=np.float64)[None, :, None, None, None]
    return DecodedGrid(obj, box, dx, dy, dx + cols, dy + rows)


def decode_grid_np(raw: np.ndarray, anchors: Sequence[Anchor], stride: int) -> dict[str, np.ndarray]:
    """Numpy-only batched decode of one image's grid (H, W, N_a, N_o)."""
    with ad.no_grad():
        d = decode_grid(ad.Tensor(np.asarray(raw)[None]), anchors, stride)
    return {
        "objectness": d.objectness.data[0],
        "box": d.box.data[0],
        "kp_x": d.kp_x.data[0],
        "kp_y": d.kp_y.data[0],
    }
