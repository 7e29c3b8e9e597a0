"""Static SVG figures: prediction timelines and the data-size sweep plot."""
from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _svg(width, height, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            + "\n".join(body) + "\n</svg>\n")


def prediction_timeline(data: dict, width: int = 720) -> str:
    """Timeline with the ground-truth band, top-k predicted spans and the saliency curve.

    ``data`` carries ``duration``, ``query``, ``gt`` ([start, end]),
    ``predictions`` (list of {span, confidence}) and ``saliency`` (per clip).
    """
    left, right = 60, 20
    plot_w = width - left - right
    duration = data["duration"]
    x = lambda t: left + plot_w * t / duration
    preds = data["predictions"]
    row_h = 18
    top = 40
    height = top + 30 + row_h * (len(preds) + 1) + 110
    body = [f'<text x="{left}" y="20" font-weight="bold">{escape(data.get("query", ""))}</text>']

    # time axis
    axis_y = top
    body.append(f'<line x1="{left}" y1="{axis_y}" x2="{left + plot_w}" y2="{axis_y}" stroke="#333"/>')
    step = max(2, int(duration // 10) // 2 * 2 or 2)
    t = 0
    while t <= duration + 1e-9:
        body.append(f'<line x1="{x(t):.1f}" y1="{axis_y - 3}" x2="{x(t):.1f}" y2="{axis_y + 3}" stroke="#333"/>')
        body.append(f'<text x="{x(t):.1f}" y="{axis_y - 6}" text-anchor="middle">{t:g}</text>')
        t += step

    y = axis_y + 10
    gs, ge = data["gt"]
    body.append(f'<text x="4" y="{y + 12}">GT</text>')
    body.append(f'<rect class="gt-band" x="{x(gs):.2f}" y="{y}" width="{x(ge) - x(gs):.2f}" '
                f'height="{row_h - 4}" fill="#2ca02c" fill-opacity="0.6"/>')
    for k, p in enumerate(preds):
        y += row_h
        s, e = p["span"]
        body.append(f'<text x="4" y="{y + 12}">#{k + 1}</text>')
        body.append(f'<rect class="pred-band" x="{x(s):.2f}" y="{y}" width="{max(x(e) - x(s), 0.5):.2f}" '
                    f'height="{row_h - 4}" fill="#1f77b4" fill-opacity="{0.25 + 0.75 * p["confidence"]:.3f}"/>')
        body.append(f'<text x="{x(e) + 4:.2f}" y="{y + 12}">{p["confidence"]:.2f}</text>')

    # saliency curve, one point per clip centre
    sal = data["saliency"]
    base = y + row_h + 90
    body.append(f'<text x="4" y="{base - 40}">saliency</text>')
    if sal:
        lo, hi = min(sal), max(sal)
        span = hi - lo or 1.0
        pts = []
        for i, v in enumerate(sal):
            cx = x(min(2 * i + 1, duration))
            pts.append(f"{cx:.2f},{base - 80 * (v - lo) / span:.2f}")
        body.append(f'<polyline class="saliency" points="{" ".join(pts)}" fill="none" stroke="#d62728"/>')
    body.append(f'<line x1="{left}" y1="{base}" x2="{left + plot_w}" y2="{base}" stroke="#999"/>')
    return _svg(width, height, body)


def sweep_plot(rows: list[dict], series=("r1_at_05", "map_at_05"), width: int = 560, height: int = 360) -> str:
    """Line plot of metric means against the percentage of training data.

    ``rows`` hold ``percentage`` plus one key per series; x positions are
    categorical in ascending percentage order.
    """
    rows = sorted(rows, key=lambda r: r["percentage"])
    left, right, top, bottom = 50, 130, 20, 50
    pw, ph = width - left - right, height - top - bottom
    n = len(rows)
    xs = [left + (pw * (i + 0.5) / n) for i in range(n)]
    y = lambda v: top + ph * (1 - v / 100.0)
    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>']
    for v in range(0, 101, 20):
        body.append(f'<text x="{left - 6}" y="{y(v) + 4:.1f}" text-anchor="end">{v}</text>')
        body.append(f'<line x1="{left}" y1="{y(v):.1f}" x2="{left + pw}" y2="{y(v):.1f}" stroke="#eee"/>')
    for xi, r in zip(xs, rows):
        body.append(f'<text x="{xi:.1f}" y="{top + ph + 16}" text-anchor="middle">{r["percentage"]:g}</text>')
    body.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">'
                f'Percentage of training data used</text>')
    for k, key in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{xi:.1f},{y(r[key]):.1f}" for xi, r in zip(xs, rows))
        body.append(f'<polyline class="series" data-metric="{key}" points="{pts}" fill="none" '
                    f'stroke="{color}" stroke-width="2"/>')
        for xi, r in zip(xs, rows):
            body.append(f'<circle cx="{xi:.1f}" cy="{y(r[key]):.1f}" r="3" fill="{color}"/>')
        ly = top + 14 + 18 * k
        body.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" '
                    f'stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{left + pw + 34}" y="{ly}">{escape(key)}</text>')
    return _svg(width, height, body)
