"""
Plot Service Module
SVG scatter, KDE heatmap, transport map, ratio surface and diagnostic-trace rendering
"""

import logging
import os
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import svgwrite

from gemflow.core.bregman import RatioObjective
from gemflow.core.flow import RunRecord
from gemflow.core.metrics import DensityGrid, ratio_on_grid
from gemflow.core.net import Network
from gemflow.errors import InvalidArgumentError
from gemflow.storage.run_store import atomic_write

logger = logging.getLogger(__name__)

CANVAS = (480, 480)
PADDING = 24
POINT_RADIUS = 1.2
TRANSPORT_SEGMENTS = 2000
TRACE_COLORS = {"loss": "#1f77b4", "grad_norm": "#d62728"}

# black -> red -> yellow -> white, piecewise linear in the normalized density
HOT_RAMP = (
    (0.0, (0, 0, 0)),
    (1.0 / 3.0, (255, 0, 0)),
    (2.0 / 3.0, (255, 255, 0)),
    (1.0, (255, 255, 255)),
)


def _fmt(value: float) -> float:
    # fixed precision keeps the output byte-stable
    return round(float(value), 2)


def hot_color(t: float) -> str:
    """Map t in [0, 1] onto the hot ramp as #rrggbb"""
    t = min(max(float(t), 0.0), 1.0)
    for (t0, c0), (t1, c1) in zip(HOT_RAMP[:-1], HOT_RAMP[1:]):
        if t <= t1:
            w = (t - t0) / (t1 - t0)
            rgb = [int(round(a + w * (b - a))) for a, b in zip(c0, c1)]
            return "#{:02x}{:02x}{:02x}".format(*rgb)
    return "#ffffff"


class _Frame:
    """Affine map from data coordinates to canvas pixels (y axis up)"""

    def __init__(self, low: Sequence[float], high: Sequence[float], size: Tuple[int, int], padding: int = PADDING):
        self.low = np.asarray(low, dtype=np.float64)
        span = np.asarray(high, dtype=np.float64) - self.low
        self.span = np.where(span > 0, span, 1.0)
        self.size = size
        self.padding = padding

    def map(self, x: float, y: float) -> Tuple[float, float]:
        w, h = self.size[0] - 2 * self.padding, self.size[1] - 2 * self.padding
        px = self.padding + (x - self.low[0]) / self.span[0] * w
        py = self.size[1] - self.padding - (y - self.low[1]) / self.span[1] * h
        return _fmt(px), _fmt(py)


class PlotService:
    """Renders run artifacts as deterministic SVG documents"""

    def __init__(self, size: Tuple[int, int] = CANVAS):
        self.size = size

    def _drawing(self) -> svgwrite.Drawing:
        drawing = svgwrite.Drawing(size=self.size, profile="full", debug=False)
        drawing.add(drawing.rect(insert=(0, 0), size=self.size, fill="white"))
        return drawing

    def _save(self, drawing: svgwrite.Drawing, path: str) -> str:
        atomic_write(path, drawing.tostring())
        logger.debug("Wrote %s", path)
        return path

    def scatter(self, points: Any, path: str, color: str = "#1f3b73") -> str:
        """One circle per particle"""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] == 0:
            raise InvalidArgumentError("Scatter plot needs at least one point")
        if points.shape[1] != 2:
            raise InvalidArgumentError(f"Scatter plot needs 2-D points, got width {points.shape[1]}")
        frame = _Frame(points.min(axis=0), points.max(axis=0), self.size)
        drawing = self._drawing()
        group = drawing.g(fill=color, fill_opacity=0.5)
        for x, y in points:
            group.add(drawing.circle(center=frame.map(x, y), r=POINT_RADIUS))
        drawing.add(group)
        return self._save(drawing, path)

    def heatmap(self, grid: DensityGrid, path: str, label: Optional[str] = None) -> str:
        """Grid cells filled along the hot ramp, scaled to the grid maximum"""
        drawing = self._drawing()
        frame = _Frame((grid.x_range[0], grid.y_range[0]), (grid.x_range[1], grid.y_range[1]), self.size, padding=0)
        cell_w = _fmt(self.size[0] / grid.resolution[0])
        cell_h = _fmt(self.size[1] / grid.resolution[1])
        drawing.add(drawing.rect(insert=(0, 0), size=self.size, fill=hot_color(0.0)))

        peak = float(grid.values.max())
        cells = drawing.g(stroke="none")
        if peak > 0:
            for j, y in enumerate(grid.y_centers):
                for i, x in enumerate(grid.x_centers):
                    color = hot_color(grid.values[j, i] / peak)
                    if color == "#000000":
                        continue
                    cx, cy = frame.map(x, y)
                    cells.add(drawing.rect(
                        insert=(_fmt(cx - cell_w / 2), _fmt(cy - cell_h / 2)),
                        size=(cell_w, cell_h), fill=color,
                    ))
        drawing.add(cells)
        if label is not None:
            drawing.add(drawing.text(label, insert=(6, 14), fill="white", font_size=11, font_family="sans-serif"))
        return self._save(drawing, path)

    def transport_map(self, initial: Any, final: Any, path: str, max_segments: int = TRANSPORT_SEGMENTS) -> str:
        """A segment from each particle's start to its end position, with the end marked"""
        initial = np.asarray(initial, dtype=np.float64)
        final = np.asarray(final, dtype=np.float64)
        if initial.shape != final.shape:
            raise InvalidArgumentError(
                f"Transport map needs matching particle sets, got {initial.shape} and {final.shape}"
            )
        if initial.ndim != 2 or initial.shape[0] == 0 or initial.shape[1] != 2:
            raise InvalidArgumentError("Transport map needs at least one 2-D particle")
        if max_segments < 1:
            raise InvalidArgumentError(f"max_segments must be positive, got {max_segments}")

        n = initial.shape[0]
        # evenly spaced particle indices, so the drawn subset is the same on every call
        shown = np.unique(np.linspace(0, n - 1, min(n, max_segments)).round().astype(int))
        both = np.vstack([initial, final])
        frame = _Frame(both.min(axis=0), both.max(axis=0), self.size)
        drawing = self._drawing()
        segments = drawing.g(stroke="#9a9a9a", stroke_width=0.6)
        ends = drawing.g(fill="#1f3b73")
        for i in shown:
            end = frame.map(*final[i])
            segments.add(drawing.line(start=frame.map(*initial[i]), end=end))
            ends.add(drawing.circle(center=end, r=POINT_RADIUS))
        drawing.add(segments)
        drawing.add(ends)
        return self._save(drawing, path)

    def ratio_surface(self, net: Network, objective: RatioObjective, grid: DensityGrid, path: str) -> str:
        """Heatmap of the fitted ratio over the grid, labelled with its range"""
        surface = ratio_on_grid(net, objective, grid)
        low, high = float(surface.values.min()), float(surface.values.max())
        return self.heatmap(surface, path, label=f"ratio {low:.3g} .. {high:.3g}")

    def trace(self, record: RunRecord, path: str, columns: Sequence[str] = ("loss", "grad_norm")) -> str:
        """Side-by-side panels, one polyline per record column against the iteration"""
        if len(record) == 0:
            raise InvalidArgumentError("Trace plot needs at least one record row")
        drawing = self._drawing()
        iterations = record.column("iter")
        panel_w = self.size[0] // len(columns)

        for p, name in enumerate(columns):
            values = record.column(name)
            keep = np.isfinite(values)
            left = p * panel_w
            panel = drawing.g(transform=f"translate({left},0)")
            panel.add(drawing.text(name, insert=(PADDING, PADDING - 8), font_size=12, font_family="sans-serif"))
            frame = _Frame(
                (iterations.min(), values[keep].min() if keep.any() else 0.0),
                (iterations.max(), values[keep].max() if keep.any() else 1.0),
                (panel_w, self.size[1]),
            )
            self._axes(drawing, panel, frame)
            vertices: List[Tuple[float, float]] = [frame.map(x, y) for x, y in zip(iterations[keep], values[keep])]
            if vertices:
                panel.add(drawing.polyline(vertices, fill="none", stroke=TRACE_COLORS.get(name, "black"), stroke_width=1.5))
            drawing.add(panel)
        return self._save(drawing, path)

    def _axes(self, drawing: svgwrite.Drawing, panel, frame: _Frame):
        x0, y0 = frame.map(frame.low[0], frame.low[1])
        x1, y1 = frame.map(frame.low[0] + frame.span[0], frame.low[1] + frame.span[1])
        axis = drawing.g(stroke="black", stroke_width=1)
        axis.add(drawing.line(start=(x0, y0), end=(x1, y0)))
        axis.add(drawing.line(start=(x0, y0), end=(x0, y1)))
        panel.add(axis)
        style = {"font_size": 9, "font_family": "sans-serif"}
        panel.add(drawing.text(f"{frame.low[1]:.3g}", insert=(2, y0), **style))
        panel.add(drawing.text(f"{frame.low[1] + frame.span[1]:.3g}", insert=(2, y1 + 9), **style))
        panel.add(drawing.text(f"{frame.low[0]:.0f}", insert=(x0, y0 + 12), **style))
        panel.add(drawing.text(f"{frame.low[0] + frame.span[0]:.0f}", insert=(x1 - 24, y0 + 12), **style))


def render_run(
    service: PlotService,
    out_dir: str,
    record: Optional[RunRecord] = None,
    target_grid: Optional[DensityGrid] = None,
    generated_grid: Optional[DensityGrid] = None,
) -> List[str]:
    """kde_target.svg, kde_generated.svg and trace.svg for whatever is given"""
    written = []
    if target_grid is not None:
        written.append(service.heatmap(target_grid, os.path.join(out_dir, "kde_target.svg")))
    if generated_grid is not None:
        written.append(service.heatmap(generated_grid, os.path.join(out_dir, "kde_generated.svg")))
    if record is not None and len(record):
        written.append(service.trace(record, os.path.join(out_dir, "trace.svg")))
    return written
