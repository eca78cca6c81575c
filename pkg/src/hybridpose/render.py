"""SVG overlays of predictions: boxes, kept and filtered keypoints, visibility isocontours."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .postprocess import PersonInstance, ScaleOutput

PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#9a6324")
MARK_RADIUS = 1.2


def _f(v: float) -> str:
    out = f"{float(v):.3f}".rstrip("0").rstrip(".")
    return "0" if out in ("", "-0") else out


def _contour_paths(so: ScaleOutput, level: float) -> list[tuple[int, str]]:
    from skimage.measure import find_contours

    s = so.stride
    h, w, na, k = so.vis.shape
    paths = []
    for a in range(na):
        for kk in range(k):
            # pad with zeros so every contour closes inside the frame
            vmap = np.pad(so.vis[:, :, a, kk], 1)
            for c in find_contours(vmap, level):
                pts = [(s * (col - 1 + 0.5), s * (row - 1 + 0.5)) for row, col in c]
                d = "M" + " L".join(f"{_f(x)},{_f(y)}" for x, y in pts) + " Z"
                paths.append((kk, d))
    return paths


def render_svg(image_size: tuple[int, int], instances: Sequence[PersonInstance],
               vis_outputs: Sequence[ScaleOutput] = (), contour_level: float = 0.5, scale: float = 8.0) -> str:
    """One ``<g class="person">`` per instance holding a box and one mark per keypoint.

    Kept keypoints are filled circles, filtered ones hollow. ``vis_outputs``
    adds isocontours of the visibility maps at ``contour_level``.
    """
    h, w = image_size
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(w * scale)}" height="{_f(h * scale)}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect class="frame" x="0" y="0" width="{w}" height="{h}" fill="#ffffff" stroke="#000000" stroke-width="0.25"/>',
    ]
    if vis_outputs:
        out.append('<g class="contours" fill="none" stroke-width="0.2" stroke-opacity="0.7">')
        for so in vis_outputs:
            for kk, d in _contour_paths(so, contour_level):
                out.append(f'<path class="iso k{kk}" stroke="{PALETTE[kk % len(PALETTE)]}" d="{d}"/>')
        out.append("</g>")
    for p in instances:
        x, y, bw, bh = p.box
        out.append(f'<g class="person" data-score="{_f(p.score)}">')
        out.append(f'<rect class="box" x="{_f(x)}" y="{_f(y)}" width="{_f(bw)}" height="{_f(bh)}" '
                   'fill="none" stroke="#222222" stroke-width="0.3"/>')
        for kk, ((kx, ky), kept, score) in enumerate(zip(p.keypoints, p.kept, p.vis_scores)):
            color = PALETTE[kk % len(PALETTE)]
            fill = color if kept else "none"
            cls = "kp kept" if kept else "kp filtered"
            out.append(f'<circle class="{cls}" cx="{_f(kx)}" cy="{_f(ky)}" r="{_f(MARK_RADIUS)}" '
                       f'fill="{fill}" stroke="{color}" stroke-width="0.3" data-vis="{_f(score)}"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
