"""Minimal static SVG line charts for loss, temperature and accuracy curves.

Charts embed their raw series values in a ``<metadata>`` block so plotted
curves can be checked programmatically without rasterizing anything.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")
_W, _H, _MARGIN = 640, 400, 60


def _limits(values, pad_frac: float = 0.05):
    lo, hi = min(values), max(values)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pad = (hi - lo) * pad_frac
    return lo - pad, hi + pad


def line_chart(series: dict, path, title: str = "", xlabel: str = "", ylabel: str = "") -> None:
    """Write an SVG line chart; ``series`` maps name -> [(x, y), ...]."""
    points = [pt for pts in series.values() for pt in pts]
    if not points:
        raise ValueError("nothing to plot: every series is empty")
    x_lo, x_hi = _limits([p[0] for p in points])
    y_lo, y_hi = _limits([p[1] for p in points])

    def sx(x):
        return _MARGIN + (x - x_lo) / (x_hi - x_lo) * (_W - 2 * _MARGIN)

    def sy(y):
        return _H - _MARGIN - (y - y_lo) / (y_hi - y_lo) * (_H - 2 * _MARGIN)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        "<metadata>",
    ]
    for name, pts in series.items():
        data = " ".join(f"{x:.12g}:{y:.12g}" for x, y in pts)
        parts.append(escape(f"series {name}: {data}"))
    parts.append("</metadata>")
    parts.append(f'<rect width="{_W}" height="{_H}" fill="white"/>')
    parts.append(
        f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{_W - 2 * _MARGIN}" '
        f'height="{_H - 2 * _MARGIN}" fill="none" stroke="#888"/>'
    )
    if title:
        parts.append(
            f'<text x="{_W / 2}" y="24" text-anchor="middle" font-size="16">'
            f"{escape(title)}</text>"
        )
    if xlabel:
        parts.append(
            f'<text x="{_W / 2}" y="{_H - 12}" text-anchor="middle" font-size="12">'
            f"{escape(xlabel)}</text>"
        )
    if ylabel:
        parts.append(
            f'<text x="16" y="{_H / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 16 {_H / 2})">{escape(ylabel)}</text>'
        )
    for color, (name, pts) in zip(_COLORS, series.items()):
        if not pts:
            continue
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        if len(pts) > 1:
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
        for x, y in (pts if len(pts) <= 64 else [pts[0], pts[-1]]):
            parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="{color}"/>')
        parts.append(
            f'<text x="{_W - _MARGIN + 4}" y="{sy(pts[-1][1]):.2f}" font-size="11" '
            f'fill="{color}">{escape(str(name))}</text>'
        )
    # axis tick labels at the corners keep the chart readable without a full axis
    parts.append(
        f'<text x="{_MARGIN}" y="{_H - _MARGIN + 16}" font-size="10">{x_lo:.4g}</text>'
    )
    parts.append(
        f'<text x="{_W - _MARGIN}" y="{_H - _MARGIN + 16}" font-size="10" '
        f'text-anchor="end">{x_hi:.4g}</text>'
    )
    parts.append(
        f'<text x="{_MARGIN - 4}" y="{_H - _MARGIN}" font-size="10" '
        f'text-anchor="end">{y_lo:.4g}</text>'
    )
    parts.append(
        f'<text x="{_MARGIN - 4}" y="{_MARGIN + 4}" font-size="10" '
        f'text-anchor="end">{y_hi:.4g}</text>'
    )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")


def read_series(path) -> dict:
    """Parse series values back out of a chart's metadata block."""
    series = {}
    for line in open(path, encoding="utf-8"):
        line = line.strip()
        if not line.startswith("series "):
            continue
        head, _, data = line[len("series "):].partition(": ")
        pts = []
        for token in data.split():
            x, _, y = token.partition(":")
            pts.append((float(x), float(y)))
        series[head] = pts
    return series
