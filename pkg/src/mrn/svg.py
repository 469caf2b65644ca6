"""Minimal self-contained SVG line/bar charts.

Hand-rolled so emitted files are deterministic bytes, valid XML, and free
of external references (no fonts, no stylesheets, no links).
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

W, H = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 20, 40, 50


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


class _Canvas:
    def __init__(self, title: str):
        self.parts = [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}">',
            f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W // 2}" y="24" font-family="monospace" font-size="16" '
            f'text-anchor="middle">{_esc(title)}</text>',
        ]

    def line(self, x1, y1, x2, y2, color="#444", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" '
            f'stroke="{color}" stroke-width="{width}"{d}/>'
        )

    def text(self, x, y, s, size=12, anchor="middle", color="#000"):
        self.parts.append(
            f'<text x="{x:.1f}" y="{y:.1f}" font-family="monospace" '
            f'font-size="{size}" text-anchor="{anchor}" fill="{color}">{_esc(s)}</text>'
        )

    def circle(self, x, y, r, color):
        self.parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{r}" fill="{color}"/>')

    def rect(self, x, y, w, h, color):
        self.parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{w:.1f}" height="{h:.1f}" '
            f'fill="{color}"/>'
        )

    def finish(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _esc(s: str) -> str:
    return (str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))


def _scale(vmin, vmax):
    if vmax <= vmin:
        vmax = vmin + 1.0
    span = vmax - vmin

    def to_y(v):
        return MARGIN_T + (H - MARGIN_T - MARGIN_B) * (1.0 - (v - vmin) / span)

    return to_y


def _axes(c: _Canvas, vmin: float, vmax: float):
    x0, x1 = MARGIN_L, W - MARGIN_R
    y0, y1 = H - MARGIN_B, MARGIN_T
    c.line(x0, y0, x1, y0)
    c.line(x0, y0, x0, y1)
    to_y = _scale(vmin, vmax)
    for i in range(5):
        v = vmin + (vmax - vmin) * i / 4
        y = to_y(v)
        c.line(x0 - 4, y, x0, y)
        c.line(x0, y, x1, y, color="#ddd", width=0.5)
        c.text(x0 - 8, y + 4, _fmt(v), size=11, anchor="end")
    return to_y


def line_chart(path: str | Path, title: str, x_values: Sequence[float],
               series: dict[str, Sequence[float]], x_label: str = "",
               y_label: str = "") -> None:
    """Multi-series line chart with a legend keyed by series name."""
    c = _Canvas(title)
    all_vals = [v for ys in series.values() for v in ys]
    vmin = min(0.0, min(all_vals)) if all_vals else 0.0
    vmax = max(all_vals) * 1.05 if all_vals else 1.0
    to_y = _axes(c, vmin, vmax)
    x0, x1 = MARGIN_L, W - MARGIN_R
    n = len(x_values)

    def to_x(i):
        if n == 1:
            return (x0 + x1) / 2
        return x0 + (x1 - x0) * i / (n - 1)

    for i, xv in enumerate(x_values):
        c.text(to_x(i), H - MARGIN_B + 16, _fmt(float(xv)), size=11)
    if x_label:
        c.text((x0 + x1) / 2, H - 12, x_label, size=12)
    if y_label:
        c.text(16, MARGIN_T - 12, y_label, size=12, anchor="start")
    for si, (name, ys) in enumerate(series.items()):
        color = PALETTE[si % len(PALETTE)]
        pts = [(to_x(i), to_y(v)) for i, v in enumerate(ys)]
        for (xa, ya), (xb, yb) in zip(pts[:-1], pts[1:]):
            c.line(xa, ya, xb, yb, color=color, width=2.0)
        for xp, yp in pts:
            c.circle(xp, yp, 3, color)
        lx = x0 + 10
        ly = MARGIN_T + 14 + 16 * si
        c.line(lx, ly - 4, lx + 22, ly - 4, color=color, width=2.0)
        c.text(lx + 28, ly, name, size=12, anchor="start")
    Path(path).write_text(c.finish())


def bar_chart(path: str | Path, title: str, labels: Sequence[str],
              values: Sequence[float], y_label: str = "") -> None:
    c = _Canvas(title)
    vmin = 0.0
    vmax = max(values) * 1.1 if values else 1.0
    to_y = _axes(c, vmin, vmax)
    x0, x1 = MARGIN_L, W - MARGIN_R
    n = len(values)
    slot = (x1 - x0) / max(1, n)
    for i, (lab, v) in enumerate(zip(labels, values)):
        bx = x0 + slot * i + slot * 0.15
        bw = slot * 0.7
        by = to_y(v)
        c.rect(bx, by, bw, (H - MARGIN_B) - by, PALETTE[i % len(PALETTE)])
        c.text(bx + bw / 2, H - MARGIN_B + 16, lab, size=11)
        c.text(bx + bw / 2, by - 6, _fmt(v), size=11)
    if y_label:
        c.text(16, MARGIN_T - 12, y_label, size=12, anchor="start")
    Path(path).write_text(c.finish())
