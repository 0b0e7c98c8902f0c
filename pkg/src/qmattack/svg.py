"""Minimal SVG line plots (text only, no graphics dependency)."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT, PAD = 480, 320, 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def line_plot(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
              logx: bool = False, logy: bool = False) -> str:
    """``series`` maps a label to (xs, ys); non-finite or non-loggable points are skipped."""
    def tx(v):
        return math.log10(v) if logx else v

    def ty(v):
        return math.log10(v) if logy else v

    clean = {}
    for name, (xs, ys) in series.items():
        pts = [(tx(x), ty(y)) for x, y in zip(xs, ys)
               if math.isfinite(x) and math.isfinite(y) and (not logx or x > 0) and (not logy or y > 0)]
        if pts:
            clean[name] = pts
    allp = [p for pts in clean.values() for p in pts]
    if not allp:
        allp = [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(p[0] for p in allp), max(p[0] for p in allp)
    y0, y1 = min(p[1] for p in allp), max(p[1] for p in allp)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(x):
        return PAD + (x - x0) / (x1 - x0) * (WIDTH - 2 * PAD)

    def py(y):
        return HEIGHT - PAD - (y - y0) / (y1 - y0) * (HEIGHT - 2 * PAD)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<line x1="{PAD}" y1="{HEIGHT - PAD}" x2="{WIDTH - PAD}" y2="{HEIGHT - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{HEIGHT - PAD}" stroke="black"/>',
           f'<text x="{WIDTH / 2}" y="20" text-anchor="middle">{escape(title)}</text>',
           f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="12" y="{HEIGHT / 2}" transform="rotate(-90 12 {HEIGHT / 2})" '
           f'text-anchor="middle">{escape(ylabel)}</text>']
    for lab, v in ((f"{x0:.3g}", x0), (f"{x1:.3g}", x1)):
        out.append(f'<text x="{px(v):.1f}" y="{HEIGHT - PAD + 16}" font-size="10" '
                   f'text-anchor="middle">{lab}{" (log10)" if logx else ""}</text>')
    for lab, v in ((f"{y0:.3g}", y0), (f"{y1:.3g}", y1)):
        out.append(f'<text x="{PAD - 4}" y="{py(v):.1f}" font-size="10" text-anchor="end">{lab}</text>')
    for i, (name, pts) in enumerate(clean.items()):
        color = COLORS[i % len(COLORS)]
        path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" points="{path}"/>')
        out.append(f'<text x="{WIDTH - PAD}" y="{PAD + 14 * i}" font-size="11" fill="{color}" '
                   f'text-anchor="end">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
