"""Gaussian keypoint-distribution maps and their max-merge.

Maps are sampled at cell centers ``(u, v) = (col + 0.5, row + 0.5)`` in grid
units. A point contributes ``w * exp(-r^2 / (2 sigma^2))`` inside the closed
box ``|u - x| <= 3 sigma, |v - y| <= 3 sigma`` and nothing outside it. The box
(the *support*) is a constant mask as far as gradients are concerned.
"""

from __future__ import annotations

import functools
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation

DEFAULT_SIGMA = 2.0
TRUNCATION = 3.0


def _check_sigma(sigma: float) -> None:
    if not sigma > 0:
        raise ContractViolation(f"sigma must be positive, got {sigma}")


def cell_centers(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.float64) + 0.5


def keypoint_to_gaussian(cx, cy, weight, sigma: float, map_shape: tuple[int, int]) -> ad.Tensor:
    """Single-keypoint map (H, W) for a keypoint at ``(cx, cy)`` grid units."""
    _check_sigma(sigma)
    cx, cy, weight = ad.as_tensor(cx), ad.as_tensor(cy), ad.as_tensor(weight)
    if np.any(weight.data < 0) or np.any(weight.data > 1):
        raise ContractViolation("objectness weight must lie in [0, 1]")
    h, w = map_shape
    u = cell_centers(w)[None, :]
    v = cell_centers(h)[:, None]
    du = ad.sub(u, cx)
    dv = ad.sub(v, cy)
    mask = (np.abs(du.data) <= TRUNCATION * sigma) & (np.abs(dv.data) <= TRUNCATION * sigma)
    r2 = ad.add(ad.square(du), ad.square(dv))
    return ad.exp(r2 * (-0.5 / sigma**2)) * weight * mask


def merge_max(maps: Sequence[ad.Tensor], shape: tuple[int, ...] | None = None) -> ad.Tensor:
    """Element-wise maximum over ``maps``; an empty list yields zeros of ``shape``."""
    if not maps:
        if shape is None:
            raise ContractViolation("merge_max of no maps needs an explicit shape")
        return ad.Tensor(np.zeros(shape))
    first = maps[0].shape
    if any(m.shape != first for m in maps):
        raise ContractViolation("merge_max: all maps must share a shape")
    return functools.reduce(ad.max_elementwise, maps)


def support_masks(xs: np.ndarray, ys: np.ndarray, sigma: float, height: int, width: int):
    """Separable truncation masks for points (B, N, N_a, K).

    Returns boolean arrays shaped (B, N, 1, W, N_a, K) and (B, N, H, 1, N_a, K).
    """
    u = cell_centers(width)[None, None, None, :, None, None]
    v = cell_centers(height)[None, None, :, None, None, None]
    mx = np.abs(u - xs[:, :, None, None]) <= TRUNCATION * sigma
    my = np.abs(v - ys[:, :, None, None]) <= TRUNCATION * sigma
    return mx, my


def distribution_maps(xs, ys, weights, sigma: float, map_shape: tuple[int, int], support=None):
    """Max-merged Gaussian maps for a batch of point sets.

    ``xs``/``ys`` are (B, N, N_a, K) positions in grid units, ``weights`` is
    (B, N, N_a) or (B, N, N_a, K). Returns ``(maps, support)`` with maps shaped
    (B, H, W, N_a, K). Pass a previous ``support`` to freeze the truncation
    boxes (used by finite-difference checks).
    """
    _check_sigma(sigma)
    xs, ys, weights = ad.as_tensor(xs), ad.as_tensor(ys), ad.as_tensor(weights)
    if xs.ndim != 4 or xs.shape != ys.shape:
        raise ContractViolation(f"point arrays must be (B, N, N_a, K), got {xs.shape}, {ys.shape}")
    h, w = map_shape
    nb, n, na, k = xs.shape
    if n == 0:
        return ad.Tensor(np.zeros((nb, h, w, na, k))), None
    if weights.ndim == 3:
        weights = ad.reshape(weights, (nb, n, na, 1))
    if support is None:
        support = support_masks(xs.data, ys.data, sigma, h, w)
    mx, my = support
    u = cell_centers(w)[None, None, :, None, None]
    v = cell_centers(h)[None, None, :, None, None]
    scale = -0.5 / sigma**2
    # (B, N, 1, W, Na, K) and (B, N, H, 1, Na, K): the Gaussian factorises over axes
    gx = ad.exp(ad.square(ad.sub(u, ad.reshape(xs, (nb, n, 1, na, k)))) * scale)
    gy = ad.exp(ad.square(ad.sub(v, ad.reshape(ys, (nb, n, 1, na, k)))) * scale)
    gx = ad.reshape(gx * ad.reshape(weights, (nb, n, 1, na, weights.shape[-1])), (nb, n, 1, w, na, k))
    gy = ad.reshape(gy, (nb, n, h, 1, na, k))
    contrib = (gx * mx) * (gy * my)
    maps = ad.max_reduce(contrib, axis=1)
    return maps, support


def grid_distribution(kp_x, kp_y, objectness, sigma: float, support=None):
    """Distribution maps D^s from decoded grid keypoints.

    ``kp_x``/``kp_y`` are absolute keypoint positions (B, H, W, N_a, K) and
    ``objectness`` the activated scores (B, H, W, N_a).
    """
    kp_x, kp_y, objectness = ad.as_tensor(kp_x), ad.as_tensor(kp_y), ad.as_tensor(objectness)
    nb, h, w, na, k = kp_x.shape
    xs = ad.reshape(kp_x, (nb, h * w, na, k))
    ys = ad.reshape(kp_y, (nb, h * w, na, k))
    ws = ad.reshape(objectness, (nb, h * w, na))
    return distribution_maps(xs, ys, ws, sigma, (h, w), support)


def build_target_visibility(persons, sigma: float, shapes: Mapping[int, tuple[int, int, int]],
                            assignment: Mapping[int, Sequence[tuple[int, int]]] | None = None,
                            num_keypoints: int | None = None) -> dict[int, np.ndarray]:
    """Target visibility maps per stride, shaped (H, W, N_a, K).

    ``persons`` carry pixel ``keypoints`` (K, 2) and ``delta`` (K,) flags.
    ``assignment[stride]`` lists the ``(person, anchor)`` pairs matched at that
    stride; when omitted every person feeds every anchor.
    """
    _check_sigma(sigma)
    if num_keypoints is None:
        if not persons:
            raise ContractViolation("num_keypoints required for an empty scene")
        num_keypoints = len(persons[0].delta)
    out = {}
    for stride, (h, w, na) in shapes.items():
        p = len(persons)
        if p == 0:
            out[stride] = np.zeros((h, w, na, num_keypoints))
            continue
        kps = np.stack([np.asarray(q.keypoints, dtype=np.float64) for q in persons]) / stride
        delta = np.stack([np.asarray(q.delta, dtype=np.float64) for q in persons])
        if assignment is None:
            use = np.ones((p, na))
        else:
            use = np.zeros((p, na))
            for pi, ai in assignment.get(stride, ()):
                use[pi, ai] = 1.0
        xs = np.broadcast_to(kps[None, :, None, :, 0], (1, p, na, num_keypoints))
        ys = np.broadcast_to(kps[None, :, None, :, 1], (1, p, na, num_keypoints))
        weights = (use[:, :, None] * delta[:, None, :])[None]
        with ad.no_grad():
            maps, _ = distribution_maps(xs, ys, weights, sigma, (h, w))
        out[stride] = maps.data[0]
    return out
