"""Minimal SVG line plots for sweep results."""

from __future__ import annotations

from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 320
MARGIN = dict(left=60, right=20, top=36, bottom=48)
COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd")


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def line_plot(xs, series, band=None, title="", xlabel="", ylabel="") -> str:
    """Render named series over shared ``xs``; ``band`` is drawn as a shaded area from zero."""
    xs = [float(x) for x in xs]
    values = [float(v) for ys in series.values() for v in ys]
    if band is not None:
        values += [float(v) for v in band] + [0.0]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(values), max(values)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return MARGIN["top"] + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    x0, y0 = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{MARGIN["top"]}" x2="{x0}" y2="{y0}" stroke="black"/>')
    for t in _ticks(x_lo, x_hi):
        out.append(f'<text x="{sx(t):.1f}" y="{y0 + 16}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y_lo, y_hi):
        out.append(f'<text x="{x0 - 6}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    if band is not None:
        pts = [f"{sx(x):.2f},{sy(0.0):.2f}" for x in (xs[0],)]
        pts += [f"{sx(x):.2f},{sy(float(v)):.2f}" for x, v in zip(xs, band)]
        pts += [f"{sx(xs[-1]):.2f},{sy(0.0):.2f}"]
        out.append(f'<polygon points="{" ".join(pts)}" fill="#999999" fill-opacity="0.4" '
                   'stroke="none"/>')
    for i, (name, ys) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{sx(x):.2f},{sy(float(y)):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = MARGIN["top"] + 14 * i + 8
        out.append(f'<line x1="{x0 + pw - 110}" y1="{ly}" x2="{x0 + pw - 90}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x0 + pw - 86}" y="{ly + 4}">{escape(name)}</text>')
    out.append(f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="13">'
               f'{escape(title)}</text>')
    out.append(f'<text x="{x0 + pw / 2}" y="{HEIGHT - 10}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{MARGIN["top"] + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {MARGIN["top"] + ph / 2})">{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
