"""Deterministic SVG line charts of actuals vs quantile forecasts with peaks shaded."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 800, 320
MARGIN = 48
COLORS = {"actual": "#222222", "p50": "#1f77b4", "p90": "#d62728"}


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def forecast_svg(series_id: str, actual: np.ndarray, peaks: np.ndarray,
                 forecasts: dict[str, np.ndarray], title: str | None = None) -> str:
    """One chart: ``actual[s]`` per period, each forecast trace aligned to the
    period it targets (NaN where absent), and a shaded band per peak period.
    """
    n = len(actual)
    series = [actual] + list(forecasts.values())
    finite = np.concatenate([s[np.isfinite(s)] for s in series])
    lo = 0.0
    hi = float(finite.max()) if len(finite) else 1.0
    hi = hi if hi > lo else lo + 1.0
    plot_w, plot_h = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN
    step = plot_w / max(n - 1, 1)

    def x(i):
        return MARGIN + i * step

    def y(v):
        return HEIGHT - MARGIN - (v - lo) / (hi - lo) * plot_h

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<title>{escape(title or series_id)}</title>',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    for i in np.flatnonzero(np.asarray(peaks) > 0):
        out.append(f'<rect class="peak" data-period="{int(i)}" x="{_fmt(x(i) - step / 2)}" y="{MARGIN}" '
                   f'width="{_fmt(step)}" height="{plot_h}" fill="#f5c542" fill-opacity="0.35"/>')
    out.append(f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" '
               f'stroke="#888"/>')
    out.append(f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="#888"/>')
    out.append(f'<text x="{MARGIN - 4}" y="{MARGIN}" font-size="10" text-anchor="end">{hi:.4g}</text>')
    out.append(f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" font-size="10" text-anchor="end">0</text>')

    traces = {"actual": actual, **forecasts}
    for name, vals in traces.items():
        segments, cur = [], []
        for i, v in enumerate(vals):
            if np.isfinite(v):
                cur.append(f"{_fmt(x(i))},{_fmt(y(float(v)))}")
            elif cur:
                segments.append(cur)
                cur = []
        if cur:
            segments.append(cur)
        color = COLORS.get(name, "#2ca02c")
        dash = ' stroke-dasharray="4 3"' if name != "actual" else ""
        for seg in segments:
            out.append(f'<polyline class="{escape(name)}" fill="none" stroke="{color}" stroke-width="1.5"'
                       f'{dash} points="{" ".join(seg)}"/>')
    for k, name in enumerate(traces):
        ly = MARGIN / 2
        lx = MARGIN + k * 110
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{COLORS.get(name, "#2ca02c")}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
