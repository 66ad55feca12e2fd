"""Minimal static SVG charts: histogram, boxplots and horizontal bars."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = 60
FILL = "#4878a8"
ACCENT = "#c0504d"


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def _doc(body: list[str], title: str, width: int = WIDTH, height: int = HEIGHT) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    title_el = f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>'
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', title_el, *body,
                      "</svg>"]) + "\n"


def _axis(x0, y0, x1, y1) -> list[str]:
    return [f'<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>',
            f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>']


def histogram(edges: Sequence[float], counts: Sequence[int], title: str, xlabel: str = "",
              markers: Sequence[float] = ()) -> str:
    """Bars over ``edges``; optional vertical marker lines (e.g. tolerance bounds)."""
    x0, x1, y0, y1 = MARGIN, WIDTH - 20, 40, HEIGHT - MARGIN
    body = _axis(x0, y0, x1, y1)
    if len(counts):
        lo, hi = edges[0], edges[-1]
        span = (hi - lo) or 1.0
        top = max(max(counts), 1)
        sx = lambda v: x0 + (v - lo) / span * (x1 - x0)
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            h = c / top * (y1 - y0)
            body.append(f'<rect x="{_fmt(sx(a))}" y="{_fmt(y1 - h)}" width="{_fmt(max(sx(b) - sx(a) - 1, 0.5))}" '
                        f'height="{_fmt(h)}" fill="{FILL}"/>')
        for v in markers:
            if lo <= v <= hi:
                body.append(f'<line x1="{_fmt(sx(v))}" y1="{y0}" x2="{_fmt(sx(v))}" y2="{y1}" '
                            f'stroke="{ACCENT}" stroke-dasharray="4 3"/>')
        body.append(f'<text x="{x0}" y="{y1 + 15}" text-anchor="middle">{_fmt(lo)}</text>')
        body.append(f'<text x="{x1}" y="{y1 + 15}" text-anchor="middle">{_fmt(hi)}</text>')
        body.append(f'<text x="{x0 - 5}" y="{y0 + 4}" text-anchor="end">{top}</text>')
    body.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 20}" text-anchor="middle">{escape(xlabel)}</text>')
    return _doc(body, title)


def boxplots(stats: Sequence[dict], labels: Sequence[str], title: str, lo: float = 0.0, hi: float = 1.0) -> str:
    """One vertical box per entry of ``stats`` (keys q1, median, q3, whisker_low, whisker_high)."""
    x0, x1, y0, y1 = MARGIN, WIDTH - 20, 40, HEIGHT - MARGIN
    body = _axis(x0, y0, x1, y1)
    span = (hi - lo) or 1.0
    sy = lambda v: y1 - (v - lo) / span * (y1 - y0)
    step = (x1 - x0) / max(len(stats), 1)
    for k, (s, label) in enumerate(zip(stats, labels)):
        cx = x0 + step * (k + 0.5)
        w = step * 0.25
        body.append(f'<line x1="{_fmt(cx)}" y1="{_fmt(sy(s["whisker_low"]))}" x2="{_fmt(cx)}" '
                    f'y2="{_fmt(sy(s["whisker_high"]))}" stroke="black"/>')
        body.append(f'<rect x="{_fmt(cx - w)}" y="{_fmt(sy(s["q3"]))}" width="{_fmt(2 * w)}" '
                    f'height="{_fmt(sy(s["q1"]) - sy(s["q3"]))}" fill="{FILL}" stroke="black"/>')
        body.append(f'<line x1="{_fmt(cx - w)}" y1="{_fmt(sy(s["median"]))}" x2="{_fmt(cx + w)}" '
                    f'y2="{_fmt(sy(s["median"]))}" stroke="white" stroke-width="2"/>')
        body.append(f'<text x="{_fmt(cx)}" y="{y1 + 15}" text-anchor="middle">{escape(label)}</text>')
    for v in (lo, (lo + hi) / 2, hi):
        body.append(f'<text x="{x0 - 5}" y="{_fmt(sy(v) + 4)}" text-anchor="end">{_fmt(v)}</text>')
    return _doc(body, title)


def bars(labels: Sequence[str], values: Sequence[float], title: str, xlabel: str = "") -> str:
    """Horizontal bars, one per label, scaled to the largest value."""
    x0, x1, y0, y1 = 120, WIDTH - 40, 40, HEIGHT - MARGIN
    body = _axis(x0, y0, x1, y1)
    top = max(max(values, default=0), 1e-12)
    step = (y1 - y0) / max(len(values), 1)
    for k, (label, v) in enumerate(zip(labels, values)):
        y = y0 + step * k
        body.append(f'<rect x="{x0}" y="{_fmt(y + step * 0.15)}" width="{_fmt(v / top * (x1 - x0))}" '
                    f'height="{_fmt(step * 0.7)}" fill="{FILL}"/>')
        body.append(f'<text x="{x0 - 5}" y="{_fmt(y + step * 0.6)}" text-anchor="end">{escape(label)}</text>')
        body.append(f'<text x="{_fmt(x0 + v / top * (x1 - x0) + 3)}" y="{_fmt(y + step * 0.6)}">{_fmt(v)}</text>')
    body.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 20}" text-anchor="middle">{escape(xlabel)}</text>')
    return _doc(body, title)
