"""Minimal SVG rendering: line plots and coloured matrices."""
from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape, quoteattr

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=20, top=30, bottom=50)


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step) * step
    return [first + i * step for i in range(int((hi - first) / step + 1e-9) + 1)]


def _label(v: float) -> str:
    return f"{v:.3g}" if abs(v) < 1e4 else f"{v:.2e}"


def line_plot(series: Sequence[tuple[str, Sequence[float], Sequence[float]]], *,
              title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """One polyline per ``(label, xs, ys)`` series, one vertex per point."""
    xs_all = np.concatenate([np.asarray(x, float) for _, x, _ in series]) if series else np.zeros(1)
    ys_all = np.concatenate([np.asarray(y, float) for _, _, y in series]) if series else np.zeros(1)
    x0, x1 = (float(xs_all.min()), float(xs_all.max())) if xs_all.size else (0.0, 1.0)
    y0, y1 = (float(ys_all.min()), float(ys_all.max())) if ys_all.size else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    L, R, T, B = MARGIN["left"], WIDTH - MARGIN["right"], MARGIN["top"], HEIGHT - MARGIN["bottom"]
    sx = lambda v: L + (v - x0) / (x1 - x0) * (R - L)
    sy = lambda v: B - (v - y0) / (y1 - y0) * (B - T)
    out = [_header(WIDTH, HEIGHT),
           f'<rect x="{L}" y="{T}" width="{R - L}" height="{B - T}" fill="none" stroke="#444"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{_num(sx(t))}" y1="{B}" x2="{_num(sx(t))}" y2="{B + 5}" stroke="#444"/>'
                   f'<text x="{_num(sx(t))}" y="{B + 18}" font-size="11" text-anchor="middle">{_label(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{L - 5}" y1="{_num(sy(t))}" x2="{L}" y2="{_num(sy(t))}" stroke="#444"/>'
                   f'<text x="{L - 8}" y="{_num(sy(t) + 4)}" font-size="11" text-anchor="end">{_label(t)}</text>')
    for i, (label, xs, ys) in enumerate(series):
        pts = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in zip(xs, ys))
        colour = PALETTE[i % len(PALETTE)]
        out.append(f'<polyline class="series" data-label={quoteattr(label)} fill="none" '
                   f'stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{R - 5}" y="{T + 15 + 14 * i}" font-size="11" text-anchor="end" '
                   f'fill="{colour}">{escape(label)}</text>')
    out += [_text(WIDTH / 2, 18, title, 14), _text(WIDTH / 2, HEIGHT - 10, xlabel, 12),
            f'<text x="16" y="{HEIGHT / 2}" font-size="12" text-anchor="middle" '
            f'transform="rotate(-90 16 {HEIGHT / 2})">{escape(ylabel)}</text>', "</svg>\n"]
    return "\n".join(out)


def matrix_plot(values: np.ndarray, rows: Sequence[str], cols: Sequence[str], *,
                title: str = "", vmax: float = 200.0, cell: int = 48) -> str:
    """Coloured grid, sources down the side and targets along the top; NaN cells are grey."""
    values = np.asarray(values, dtype=float)
    left, top = 90, 70
    w, h = left + cell * len(cols) + 10, top + cell * len(rows) + 10
    out = [_header(w, h), _text(w / 2, 18, title, 14)]
    for j, c in enumerate(cols):
        out.append(_text(left + cell * (j + 0.5), top - 8, c, 11))
    for i, r in enumerate(rows):
        out.append(f'<text x="{left - 6}" y="{top + cell * (i + 0.5) + 4}" font-size="11" '
                   f'text-anchor="end">{escape(r)}</text>')
        for j in range(len(cols)):
            v = values[i, j]
            fill = "#bbbbbb" if math.isnan(v) else _heat(min(max(v, 0.0), vmax) / vmax)
            text = "failed" if math.isnan(v) else f"{v:.0f}"
            x, y = left + cell * j, top + cell * i
            out.append(f'<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                       f'fill="{fill}" stroke="#fff"/>')
            out.append(_text(x + cell / 2, y + cell / 2 + 4, text, 11))
    out.append("</svg>\n")
    return "\n".join(out)


def _heat(t: float) -> str:
    # white at 0, blue at 0.5 (100%), dark red at 1 (clipped maximum)
    if t <= 0.5:
        a = t / 0.5
        rgb = (255 - a * 200, 255 - a * 140, 255)
    else:
        a = (t - 0.5) / 0.5
        rgb = (55 + a * 145, 115 - a * 100, 255 - a * 225)
    return "#" + "".join(f"{int(round(c)):02x}" for c in rgb)


def _header(w, h) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}" font-family="sans-serif">')


def _text(x, y, s, size) -> str:
    return f'<text x="{_num(x)}" y="{_num(y)}" font-size="{size}" text-anchor="middle">{escape(s)}</text>'
