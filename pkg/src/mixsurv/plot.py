"""Hand-written SVG for Kaplan-Meier step curves (no plotting dependency)."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .metrics import KmCurve

WIDTH, HEIGHT = 800, 600
LEFT, RIGHT, TOP, BOTTOM = 70, 30, 40, 60
COLORS = ("#c0392b", "#2471a3", "#1e8449", "#7d3c98")


def _step_path(curve: KmCurve, sx, sy, t_end: float) -> str:
    parts = [f"M{sx(0.0):.2f},{sy(1.0):.2f}"]
    for t, s in zip(curve.times, curve.survival):
        parts.append(f"H{sx(t):.2f}")
        parts.append(f"V{sy(s):.2f}")
    parts.append(f"H{sx(t_end):.2f}")
    return " ".join(parts)


def km_svg(curves: dict[str, KmCurve], p_value: float | None = None, title: str = "Kaplan-Meier",
           t_max: float | None = None) -> str:
    """One ``<path>`` per group; x ticks at every event time."""
    all_times = np.unique(np.concatenate([c.times for c in curves.values()] + [np.zeros(1)]))
    t_end = float(t_max if t_max is not None else max(all_times.max(), 1e-9))
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(t):
        return LEFT + pw * float(t) / t_end

    def sy(s):
        return TOP + ph * (1.0 - float(s))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="18">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for t in all_times:
        x = sx(t)
        out.append(f'<line class="tick" x1="{x:.2f}" y1="{TOP + ph}" x2="{x:.2f}" y2="{TOP + ph + 5}" stroke="black"/>')
    for s in np.linspace(0, 1, 6):
        y = sy(s)
        out.append(f'<line x1="{LEFT - 5}" y1="{y:.2f}" x2="{LEFT}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{y + 4:.2f}" text-anchor="end" font-size="12">{s:.1f}</text>')
    out.append(f'<text x="{LEFT + pw / 2}" y="{HEIGHT - 15}" text-anchor="middle" font-size="14">time (months); max {t_end:.1f}</text>')
    out.append(f'<text x="18" y="{TOP + ph / 2}" text-anchor="middle" font-size="14" transform="rotate(-90 18 {TOP + ph / 2})">survival probability</text>')
    for i, (label, curve) in enumerate(curves.items()):
        color = COLORS[i % len(COLORS)]
        out.append(f'<path d="{_step_path(curve, sx, sy, t_end)}" fill="none" stroke="{color}" stroke-width="2" data-group="{escape(label)}"/>')
        out.append(f'<text x="{LEFT + pw - 10}" y="{TOP + 20 + 18 * i}" text-anchor="end" font-size="14" fill="{color}">{escape(label)}</text>')
    if p_value is not None:
        out.append(f'<text x="{LEFT + 10}" y="{TOP + ph - 10}" font-size="14">log-rank p = {p_value:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
