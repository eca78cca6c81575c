"""Deterministic synthetic multi-person scenes.

A scene image has ``K + 1`` channels: channel ``k`` holds a Gaussian blob at
every visible keypoint of class ``k`` and the last channel holds the filled
person silhouettes (boxes) at half intensity. Occluded keypoints leave no
trace in the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InfeasibleSceneError
from .targets import GroundTruthPerson

# head, left hand, right hand, left foot, right foot (fractions of the box)
TEMPLATE_5 = np.array([[0.50, 0.10], [0.12, 0.45], [0.88, 0.45], [0.28, 0.92], [0.72, 0.92]])
BOX_W = (16.0, 26.0)
BOX_H = (32.0, 48.0)
JITTER = 0.04
BLOB_SIGMA = 1.5
BODY_LEVEL = 0.5
NOISE = 0.02
MAX_PAIR_IOU = 0.3
RETRIES = 200


def keypoint_template(k: int) -> np.ndarray:
    if k == 5:
        return TEMPLATE_5
    idx = np.arange(k)
    x = np.where(idx % 2 == 0, 0.25, 0.75)
    y = 0.05 + 0.9 * idx / max(k - 1, 1)
    return np.stack([x, y], axis=1)


@dataclass
class SyntheticScene:
    image_size: tuple[int, int]
    persons: list[GroundTruthPerson]
    seed: int
    image: np.ndarray  # (K + 1, H, W)

    @property
    def num_keypoints(self) -> int:
        return self.image.shape[0] - 1


def _box_iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def render_image(persons, image_size: tuple[int, int], num_keypoints: int,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Stimulus image for ``persons``; noise is added only when ``rng`` is given."""
    h, w = image_size
    img = np.zeros((num_keypoints + 1, h, w))
    yy = np.arange(h)[:, None] + 0.5
    xx = np.arange(w)[None, :] + 0.5
    for p in persons:
        x0, y0, bw, bh = p.box
        body = ((xx >= x0) & (xx < x0 + bw) & (yy >= y0) & (yy < y0 + bh)) * BODY_LEVEL
        img[-1] = np.maximum(img[-1], body)
        for k, ((kx, ky), vis) in enumerate(zip(p.keypoints, p.delta)):
            if not vis:
                continue
            blob = np.exp(-((xx - kx) ** 2 + (yy - ky) ** 2) / (2 * BLOB_SIGMA**2))
            img[k] = np.maximum(img[k], blob)
    if rng is not None:
        img = img + rng.normal(0.0, NOISE, img.shape)
    return img


def gen_scene(seed: int, n_persons: int = 2, image_size: tuple[int, int] = (64, 64),
              occlusion_rate: float = 0.3, num_keypoints: int = 5) -> SyntheticScene:
    """Place ``n_persons`` with pairwise box IoU <= 0.3 and render them."""
    if n_persons < 1:
        raise ContractViolation("n_persons must be at least 1")
    if not 0.0 <= occlusion_rate <= 1.0:
        raise ContractViolation("occlusion_rate must lie in [0, 1]")
    h, w = image_size
    if w < BOX_W[1] or h < BOX_H[1]:
        raise ContractViolation(f"image {h}x{w} too small for synthetic persons")
    rng = np.random.default_rng(seed)
    template = keypoint_template(num_keypoints)
    boxes: list[tuple[float, float, float, float]] = []
    for _ in range(n_persons):
        for _attempt in range(RETRIES):
            bw = rng.uniform(*BOX_W)
            bh = rng.uniform(*BOX_H)
            box = (rng.uniform(0, w - bw), rng.uniform(0, h - bh), bw, bh)
            if all(_box_iou(box, b) <= MAX_PAIR_IOU for b in boxes):
                boxes.append(box)
                break
        else:
            raise InfeasibleSceneError(f"could not place {n_persons} persons (seed {seed})")
    persons = []
    for x0, y0, bw, bh in boxes:
        rel = template + rng.normal(0.0, JITTER, template.shape)
        kps = np.stack([x0 + rel[:, 0] * bw, y0 + rel[:, 1] * bh], axis=1)
        kps[:, 0] = np.clip(kps[:, 0], 0.0, w - 1e-6)
        kps[:, 1] = np.clip(kps[:, 1], 0.0, h - 1e-6)
        delta = (rng.random(num_keypoints) >= occlusion_rate).astype(np.int64)
        if delta.sum() == 0:
            delta[rng.integers(num_keypoints)] = 1
        persons.append(GroundTruthPerson((x0, y0, bw, bh), kps, delta))
    image = render_image(persons, image_size, num_keypoints, rng)
    return SyntheticScene(tuple(image_size), persons, seed, image)
