"""Minimal SVG output for trajectory panels and sweep curves."""

from __future__ import annotations

from pathlib import Path

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class Canvas:
    """Maps data coordinates into a fixed-size SVG panel (y axis pointing up)."""

    def __init__(self, xlim, ylim, width=360, height=360, pad=24):
        self.xlim, self.ylim = xlim, ylim
        self.width, self.height, self.pad = width, height, pad
        self.items: list[str] = []

    def _px(self, x, y):
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        u = self.pad + (x - x0) / (x1 - x0) * (self.width - 2 * self.pad)
        v = self.height - self.pad - (y - y0) / (y1 - y0) * (self.height - 2 * self.pad)
        return u, v

    def polyline(self, pts, color="#888", width=0.6, opacity=0.5):
        pts = [p for p in np.asarray(pts) if np.all(np.isfinite(p))]
        if len(pts) < 2:
            return
        coords = " ".join("%.2f,%.2f" % self._px(*p) for p in pts)
        self.items.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                          f'stroke-width="{width}" stroke-opacity="{opacity}"/>')

    def dots(self, pts, color="#000", r=1.5, opacity=0.8):
        for p in np.asarray(pts):
            if np.all(np.isfinite(p)):
                u, v = self._px(*p)
                self.items.append(f'<circle cx="{u:.2f}" cy="{v:.2f}" r="{r}" fill="{color}" '
                                  f'fill-opacity="{opacity}"/>')

    def text(self, s, x=None, y=None, size=12):
        x = self.pad if x is None else x
        y = self.pad - 8 if y is None else y
        s = s.replace("&", "&amp;").replace("<", "&lt;")
        self.items.append(f'<text x="{x}" y="{y}" font-family="sans-serif" font-size="{size}">{s}</text>')

    def render(self) -> str:
        body = "\n".join(self.items)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">\n'
                f'<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n')

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render())
        return path


def trajectory_panel(path, trajectories, points, title="", zoom=1.6, max_lines=60):
    """Trajectories of the last part of sampling (inside a box of half-width ``zoom``),
    their endpoints and the dataset points."""
    cv = Canvas((-zoom, zoom), (-zoom, zoom))
    for k, t in enumerate(trajectories[:max_lines]):
        inside = np.all(np.abs(t.x[:, :2]) <= 2 * zoom, axis=1)
        cv.polyline(t.x[inside, :2], color=PALETTE[k % len(PALETTE)])
    cv.dots([t.endpoint[:2] for t in trajectories if not t.unstable], color="#333", r=1.2, opacity=0.5)
    cv.dots(np.asarray(points)[:, :2], color="#d62728", r=3.5, opacity=1.0)
    cv.text(title)
    return cv.save(path)


def line_plot(path, series: dict, title="", xlabel="w", ylabel="error"):
    """``series`` maps a label to ``(xs, ys)``; non-finite values are skipped."""
    xs_all = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys_all = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    ys_all = ys_all[np.isfinite(ys_all)]
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = (float(ys_all.min()), float(ys_all.max())) if ys_all.size else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    cv = Canvas((x0, x1), (y0, y1), width=480, height=320, pad=40)
    for k, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = np.column_stack([xs, ys])
        cv.polyline(pts, color=color, width=1.5, opacity=1.0)
        cv.dots(pts, color=color, r=2.5)
        cv.text(label, x=cv.width - 120, y=20 + 14 * k, size=11)
    cv.text(f"{title}  [{ylabel} vs {xlabel}; y in {y0:.3g}..{y1:.3g}]", size=11)
    return cv.save(path)
