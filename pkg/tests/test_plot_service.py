import re

import numpy as np
import pytest

from gemflow.core.bregman import RatioObjective
from gemflow.core.flow import RecordRow, RunRecord
from gemflow.core.metrics import DensityGrid, ratio_on_grid
from gemflow.core.net import Network
from gemflow.errors import InvalidArgumentError
from gemflow.services.plot_service import PlotService, hot_color, render_run


@pytest.fixture
def service():
    return PlotService(size=(200, 200))


def read(path):
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


class TestHotRamp:
    @pytest.mark.parametrize(
        "t,color",
        [(0.0, "#000000"), (1.0 / 3.0, "#ff0000"), (2.0 / 3.0, "#ffff00"), (1.0, "#ffffff"), (-2.0, "#000000"), (7.0, "#ffffff")],
    )
    def test_stops(self, t, color):
        assert hot_color(t) == color

    def test_monotone_brightness(self):
        brightness = [sum(int(hot_color(t)[i:i + 2], 16) for i in (1, 3, 5)) for t in np.linspace(0, 1, 50)]
        assert brightness == sorted(brightness)


class TestScatter:
    def test_one_point_one_circle(self, service, tmp_path):
        text = read(service.scatter([[0.3, -0.7]], str(tmp_path / "s.svg")))
        assert text.count("<circle") == 1

    def test_deterministic(self, service, tmp_path, rng):
        points = rng.normal(size=(30, 2))
        a = read(service.scatter(points, str(tmp_path / "a.svg")))
        b = read(service.scatter(points, str(tmp_path / "b.svg")))
        assert a == b
        assert a.count("<circle") == 30

    def test_empty(self, service, tmp_path):
        with pytest.raises(InvalidArgumentError):
            service.scatter(np.zeros((0, 2)), str(tmp_path / "s.svg"))
        assert not (tmp_path / "s.svg").exists()


class TestHeatmap:
    def test_only_lit_cells_are_drawn(self, service, tmp_path):
        values = np.zeros((2, 3))
        values[1, 2] = 4.0
        grid = DensityGrid((0.0, 3.0), (0.0, 2.0), (3, 2), values)
        text = read(service.heatmap(grid, str(tmp_path / "h.svg")))
        assert text.count('fill="#ffffff"') == 1
        assert text.count("<rect") == 3  # canvas, black background, peak cell

    def test_empty_grid_is_black(self, service, tmp_path):
        text = read(service.heatmap(DensityGrid((0.0, 1.0), (0.0, 1.0), (4, 4)), str(tmp_path / "h.svg")))
        assert text.count("<rect") == 2


class TestTrace:
    def test_polyline_per_column(self, service, tmp_path):
        record = RunRecord([RecordRow(k, -k / 10.0, 1.0 / k, 0.5, float("nan"), 0.0) for k in (1, 2, 3)])
        text = read(service.trace(record, str(tmp_path / "t.svg")))
        assert text.count("<polyline") == 2
        assert "loss" in text and "grad_norm" in text

    def test_all_nan_column_has_no_curve(self, service, tmp_path):
        record = RunRecord([RecordRow(k, float("nan"), float("nan"), 0.5, 0.1, 0.0) for k in (1, 2)])
        text = read(service.trace(record, str(tmp_path / "t.svg")))
        assert text.count("<polyline") == 0

    def test_empty_record(self, service, tmp_path):
        with pytest.raises(InvalidArgumentError):
            service.trace(RunRecord(), str(tmp_path / "t.svg"))


class TestRenderRun:
    def test_file_names(self, service, tmp_path):
        grid = DensityGrid((0.0, 1.0), (0.0, 1.0), (2, 2), np.ones((2, 2)))
        record = RunRecord([RecordRow(1, 0.0, 0.0, 0.0, 0.0, 0.0)])
        written = render_run(service, str(tmp_path), record=record, target_grid=grid, generated_grid=grid)
        assert [p.rsplit("/", 1)[-1] for p in written] == ["kde_target.svg", "kde_generated.svg", "trace.svg"]

    def test_empty_record_is_skipped(self, service, tmp_path):
        assert render_run(service, str(tmp_path), record=RunRecord()) == []


class TestTransportMap:
    def test_one_segment_per_particle(self, service, tmp_path, rng):
        initial = rng.normal(size=(25, 2))
        text = read(service.transport_map(initial, initial + 1.0, str(tmp_path / "t.svg")))
        assert text.count("<line") == 25
        assert text.count("<circle") == 25

    def test_many_particles_are_thinned_deterministically(self, service, tmp_path, rng):
        initial = rng.normal(size=(300, 2))
        final = 0.5 * initial
        a = read(service.transport_map(initial, final, str(tmp_path / "a.svg"), max_segments=40))
        b = read(service.transport_map(initial, final, str(tmp_path / "b.svg"), max_segments=40))
        assert a == b
        assert a.count("<line") == 40

    def test_segment_runs_from_start_to_end(self, service, tmp_path):
        text = read(service.transport_map([[0.0, 0.0]], [[1.0, 1.0]], str(tmp_path / "t.svg")))
        attrs = dict(re.findall(r'(\w+)="([^"]*)"', re.search(r"<line [^>]*>", text).group(0)))
        # a single move spans the padded canvas diagonal, y pointing up
        assert [float(attrs[k]) for k in ("x1", "y1", "x2", "y2")] == [24.0, 176.0, 176.0, 24.0]

    def test_mismatched_sets(self, service, tmp_path):
        with pytest.raises(InvalidArgumentError):
            service.transport_map(np.zeros((3, 2)), np.zeros((4, 2)), str(tmp_path / "t.svg"))
        assert not (tmp_path / "t.svg").exists()


class TestRatioSurface:
    def test_constant_ratio_lights_every_cell(self, service, tmp_path):
        net = Network((2, 1), [np.zeros((1, 2))], [np.array([1.0])])
        grid = DensityGrid((0.0, 1.0), (0.0, 1.0), (3, 2))
        text = read(service.ratio_surface(net, RatioObjective(kind="lsdr"), grid, str(tmp_path / "r.svg")))
        assert text.count('fill="#ffffff"') == 6
        assert "ratio 1 .. 1" in text

    def test_negative_lsdr_output_reads_as_zero(self, tmp_path):
        # R(x, y) = x - 0.5 on [0, 1]: the left half of the grid is negative
        net = Network((2, 1), [np.array([[1.0, 0.0]])], [np.array([-0.5])])
        surface = ratio_on_grid(net, RatioObjective(kind="lsdr"), DensityGrid((0.0, 1.0), (0.0, 1.0), (4, 1)))
        np.testing.assert_allclose(surface.values, [[0.0, 0.0, 0.125, 0.375]])

    def test_lr_ratio_is_clamped(self):
        net = Network((2, 1), [np.zeros((1, 2))], [np.array([-50.0])])
        surface = ratio_on_grid(net, RatioObjective(kind="lr"), DensityGrid((0.0, 1.0), (0.0, 1.0), (2, 2)))
        np.testing.assert_array_equal(surface.values, np.full((2, 2), 1e-3))
