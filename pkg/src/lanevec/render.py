"""Static SVG/PNG figures of vector maps."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .mapmodel import CLASSES, VectorMap

COLORS = {
    0: (230, 230, 230),   # lane_solid
    1: (250, 200, 40),    # lane_dashed
    2: (235, 70, 60),     # stop_line
    3: (80, 170, 250),    # crosswalk
    4: (120, 120, 120),   # group outline
}
MERGED = (60, 220, 120)
BG = (25, 28, 34)
PANEL = 480
MARGIN = 24
LEGEND_H = 28


class RenderError(ValueError):
    pass


def _check(m: VectorMap) -> None:
    for e in m.elements():
        if not 0 <= e.cls < len(CLASSES) or e.cls == 4:
            raise RenderError(f"unknown element class id {e.cls} ({e.instance_id})")


def _bounds(maps: Sequence[VectorMap]):
    pts = [p for m in maps for g in m.groups for p in (g.polygon, *[e.points for e in g.elements])]
    if not pts:
        return np.zeros(2), 1.0
    allp = np.concatenate(pts)
    lo, hi = allp.min(0), allp.max(0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-6))
    return lo, span


def _shapes(m: VectorMap, lo, span, x0: float):
    """Drawing primitives in canvas pixels: (kind, color, width, points)."""
    scale = (PANEL - 2 * MARGIN) / span

    def tx(p):
        q = (np.asarray(p) - lo) * scale
        return [(x0 + MARGIN + float(x), LEGEND_H + PANEL - MARGIN - float(y)) for x, y in q]

    out = []
    for g in m.groups:
        out.append(("polygon", COLORS[4], 1, tx(g.polygon)))
    for g in m.groups:
        for e in g.elements:
            merged = len(e.sources) > 1
            color = MERGED if merged else COLORS[e.cls]
            kind = "polygon" if CLASSES[e.cls].closed else "line"
            out.append((kind, color, 3 if merged else 2, tx(e.points)))
    return out


def _legend():
    items = [(CLASSES[k].name, COLORS[k]) for k in range(4)] + [("group", COLORS[4]), ("merged", MERGED)]
    x = 8.0
    out = []
    for name, color in items:
        out.append((x, name, color))
        x += 14 + 7 * len(name) + 10
    return out


def _panels(pred: VectorMap, gt: VectorMap | None):
    maps = [pred] + ([gt] if gt is not None else [])
    for m in maps:
        _check(m)
    lo, span = _bounds(maps)
    shapes = []
    for i, m in enumerate(maps):
        shapes.extend(_shapes(m, lo, span, i * PANEL))
    return len(maps) * PANEL, PANEL + LEGEND_H, shapes


def to_svg(pred: VectorMap, gt: VectorMap | None = None) -> str:
    w, h, shapes = _panels(pred, gt)
    rgb = lambda c: f"rgb({c[0]},{c[1]},{c[2]})"  # noqa: E731
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
             f'<rect width="{w}" height="{h}" fill="{rgb(BG)}"/>']
    for x, name, color in _legend():
        lines.append(f'<rect x="{x:.1f}" y="8" width="10" height="10" fill="{rgb(color)}"/>')
        lines.append(f'<text x="{x + 14:.1f}" y="17" font-size="11" font-family="monospace" '
                     f'fill="{rgb((220, 220, 220))}">{name}</text>')
    if gt is not None:
        lines.append(f'<line x1="{PANEL}" y1="{LEGEND_H}" x2="{PANEL}" y2="{h}" stroke="{rgb((90, 90, 90))}"/>')
    for kind, color, width, pts in shapes:
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        tag = "polygon" if kind == "polygon" else "polyline"
        lines.append(f'<{tag} points="{coords}" fill="none" stroke="{rgb(color)}" stroke-width="{width}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def to_png(pred: VectorMap, gt: VectorMap | None = None) -> Image.Image:
    w, h, shapes = _panels(pred, gt)
    img = Image.new("RGB", (w, h), BG)
    draw = ImageDraw.Draw(img)
    for x, name, color in _legend():
        draw.rectangle([x, 8, x + 10, 18], fill=color)
        draw.text((x + 14, 7), name, fill=(220, 220, 220))
    if gt is not None:
        draw.line([(PANEL, LEGEND_H), (PANEL, h)], fill=(90, 90, 90))
    for kind, color, width, pts in shapes:
        if kind == "polygon":
            draw.line(pts + pts[:1], fill=color, width=width)
        else:
            draw.line(pts, fill=color, width=width)
    return img
