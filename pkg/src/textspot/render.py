"""Static SVG overlays: ground truth on the left, prediction on the right.

Primitives are colored by semantic label. On the prediction panel, any
primitive whose label or symbol assignment disagrees with ground truth is
drawn with a red outline underneath.
"""

from __future__ import annotations

import colorsys
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .model import Arc, Circle, Drawing, Ellipse, Line, Text
from .spotting import ground_truth_symbols

MISMATCH = "#e0202a"


def label_color(label: int) -> str:
    if label == 0:
        return "#9a9a9a"
    # Golden-ratio hue walk keeps neighboring ids apart.
    r, g, b = colorsys.hsv_to_rgb((label * 0.618033988749895) % 1.0, 0.75, 0.8)
    return "#%02x%02x%02x" % (round(r * 255), round(g * 255), round(b * 255))


def _n(x: float) -> str:
    return f"{x:.4f}".rstrip("0").rstrip(".")


def _shape(geom, style: str) -> str:
    if isinstance(geom, Line):
        return f'<line x1="{_n(geom.x1)}" y1="{_n(geom.y1)}" x2="{_n(geom.x2)}" y2="{_n(geom.y2)}" {style}/>'
    if isinstance(geom, Arc):
        a0, a1 = geom.start, geom.start + geom.sweep
        x0, y0 = geom.cx + geom.r * math.cos(a0), geom.cy + geom.r * math.sin(a0)
        x1, y1 = geom.cx + geom.r * math.cos(a1), geom.cy + geom.r * math.sin(a1)
        large = 1 if geom.sweep > math.pi else 0
        if geom.sweep >= 2 * math.pi - 1e-9:
            return f'<circle cx="{_n(geom.cx)}" cy="{_n(geom.cy)}" r="{_n(geom.r)}" {style}/>'
        d = f"M{_n(x0)} {_n(y0)} A{_n(geom.r)} {_n(geom.r)} 0 {large} 1 {_n(x1)} {_n(y1)}"
        return f'<path d="{d}" {style}/>'
    if isinstance(geom, Circle):
        return f'<circle cx="{_n(geom.cx)}" cy="{_n(geom.cy)}" r="{_n(geom.r)}" {style}/>'
    if isinstance(geom, Ellipse):
        rot = _n(math.degrees(geom.rotation))
        return (
            f'<ellipse cx="{_n(geom.cx)}" cy="{_n(geom.cy)}" rx="{_n(geom.a)}" ry="{_n(geom.b)}" '
            f'transform="rotate({rot} {_n(geom.cx)} {_n(geom.cy)})" {style}/>'
        )
    if isinstance(geom, Text):
        w, h = geom.xmax - geom.xmin, geom.ymax - geom.ymin
        return f'<rect x="{_n(geom.xmin)}" y="{_n(geom.ymin)}" width="{_n(w)}" height="{_n(h)}" {style}/>'
    raise TypeError(f"cannot render {type(geom).__name__}")


def mismatched_primitives(pred: Drawing, gt: Drawing) -> set[int]:
    """Ids whose label differs or whose symbol does not coincide with the ground-truth symbol."""
    if len(pred.primitives) != len(gt.primitives):
        raise ValueError("prediction and ground truth must cover the same primitives")

    def owners(d: Drawing) -> dict[int, frozenset]:
        out = {}
        for s in ground_truth_symbols(d):
            for i in s.members:
                out[i] = s.members
        return out

    po, go = owners(pred), owners(gt)
    bad = set()
    for p, g in zip(pred.primitives, gt.primitives):
        if p.label != g.label or po.get(p.id) != go.get(g.id):
            bad.add(p.id)
    return bad


def _panel(d: Drawing, dx: float, stroke: float, mismatched: set[int]) -> list[str]:
    out = [f'<g transform="translate({_n(dx)} 0)">']
    for p in d.primitives:
        if p.id in mismatched:
            out.append("  " + _shape(p.geometry, f'fill="none" stroke="{MISMATCH}" stroke-width="{_n(stroke * 4)}"'))
    for p in d.primitives:
        style = f'fill="none" stroke="{label_color(p.label)}" stroke-width="{_n(stroke)}"'
        out.append("  " + _shape(p.geometry, style))
    out.append("</g>")
    return out


def render_overlay(gt: Drawing, pred: Drawing, title: str = "") -> str:
    """SVG document with the two panels side by side; identical inputs give identical bytes."""
    x0, y0, x1, y1 = gt.extent()
    w, h = max(x1 - x0, 1e-6), max(y1 - y0, 1e-6)
    pad = 0.05 * max(w, h)
    gap = 2 * pad
    stroke = 0.002 * max(w, h)
    vb = f"{_n(x0 - pad)} {_n(y0 - pad)} {_n(2 * w + gap + 2 * pad)} {_n(h + 2 * pad)}"
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{vb}" width="1200" height="{round(600 * (h + 2 * pad) / (w + gap / 2 + 2 * pad))}">',
    ]
    if title:
        lines.append(f"<title>{escape(title)}</title>")
    lines += _panel(gt, 0.0, stroke, set())
    lines += _panel(pred, w + gap, stroke, mismatched_primitives(pred, gt))
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def save_overlay(gt: Drawing, pred: Drawing, path: str | Path, title: str = "") -> None:
    Path(path).write_text(render_overlay(gt, pred, title), encoding="utf-8")
