"""Minimal self-contained SVG output for heatmaps and scatter plots."""

from __future__ import annotations

from html import escape

import numpy as np

PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
           "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac")
MISSING = "#000000"


def _ramp(level: float) -> str:
    """White to dark blue for ``level`` in [0, 1]."""
    level = min(max(level, 0.0), 1.0)
    r = int(round(255 * (1 - 0.85 * level)))
    g = int(round(255 * (1 - 0.65 * level)))
    b = int(round(255 * (1 - 0.25 * level)))
    return f"#{r:02x}{g:02x}{b:02x}"


class Figure:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.parts = []

    def panel(self, x: float, y: float, size: float, lo: float, hi: float, title: str = "") -> "Panel":
        p = Panel(self, x, y, size, lo, hi)
        self.parts.append(f'<rect x="{x}" y="{y}" width="{size}" height="{size}" fill="none" stroke="#333"/>')
        if title:
            self.text(x + size / 2, y - 6, title, anchor="middle")
        return p

    def text(self, x, y, s, size=12, anchor="start"):
        self.parts.append(f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" '
                          f'font-family="sans-serif" text-anchor="{anchor}">{escape(s)}</text>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">\n<rect width="100%" height="100%" fill="white"/>\n')
        return head + "\n".join(self.parts) + "\n</svg>\n"

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.render())


class Panel:
    """Square plotting area mapping data ``[lo, hi]^2`` to pixels (``y`` up)."""

    def __init__(self, fig: Figure, x: float, y: float, size: float, lo: float, hi: float):
        self.fig, self.x, self.y, self.size, self.lo, self.hi = fig, x, y, size, lo, hi

    def px(self, u, v):
        s = self.size / (self.hi - self.lo)
        return self.x + (u - self.lo) * s, self.y + self.size - (v - self.lo) * s

    def cells(self, colors: list[list[str]]):
        """Fill a row-major grid of colors (row 0 at the bottom), merging equal runs."""
        n_rows, n_cols = len(colors), len(colors[0])
        cw, ch = self.size / n_cols, self.size / n_rows
        for i, row in enumerate(colors):
            top = self.y + self.size - (i + 1) * ch
            j = 0
            while j < n_cols:
                k = j
                while k + 1 < n_cols and row[k + 1] == row[j]:
                    k += 1
                self.fig.parts.append(
                    f'<rect x="{self.x + j * cw:.2f}" y="{top:.2f}" width="{(k - j + 1) * cw:.2f}" '
                    f'height="{ch:.2f}" fill="{row[j]}" stroke="none"/>')
                j = k + 1

    def heatmap(self, values: np.ndarray, levels: int = 16):
        v = np.asarray(values, dtype=float)
        lo, hi = np.nanmin(v), np.nanmax(v)
        q = np.zeros_like(v) if hi <= lo else np.floor((v - lo) / (hi - lo) * (levels - 1) + 0.5) / (levels - 1)
        self.cells([[_ramp(c) for c in row] for row in q])

    def labels(self, labels: np.ndarray):
        self.cells([[PALETTE[c % len(PALETTE)] if c >= 0 else MISSING for c in row] for row in labels])

    def scatter(self, points, color: str, radius: float = 2.5, marker: str = "circle"):
        for u, v in np.asarray(points, dtype=float).reshape(-1, 2):
            if not (self.lo <= u <= self.hi and self.lo <= v <= self.hi):
                continue
            x, y = self.px(u, v)
            if marker == "circle":
                self.fig.parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{radius}" fill="{color}" '
                                      f'fill-opacity="0.6"/>')
            else:
                r = radius * 1.8
                self.fig.parts.append(f'<path d="M{x - r:.2f},{y - r:.2f}L{x + r:.2f},{y + r:.2f}'
                                      f'M{x - r:.2f},{y + r:.2f}L{x + r:.2f},{y - r:.2f}" '
                                      f'stroke="{color}" stroke-width="2.5"/>')
