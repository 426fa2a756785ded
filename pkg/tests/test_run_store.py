import math
import os

import numpy as np
import pytest

from gemflow.core.flow import RecordRow, RunRecord
from gemflow.core.metrics import DensityGrid
from gemflow.core.net import OptState, ParamGrads, network_init, rmsprop_step
from gemflow.errors import DataFormatError
from gemflow.storage.run_store import (
    RunStore,
    atomic_write,
    format_points_csv,
    load_network,
    read_grid_csv,
    read_points_csv,
    read_record_csv,
    save_network,
    write_grid_csv,
    write_metrics_csv,
    write_points_csv,
)


def write_text(path, text):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return str(path)


def sample_record():
    record = RunRecord()
    record.append(RecordRow(100, -0.5, 2.25, 0.75, float("nan"), 1.5))
    record.append(RecordRow(200, -0.9, 0.1 + 0.2, 0.25, 1e-4, 3.0))
    return record


class TestAtomicWrite:
    def test_replaces_and_leaves_no_temp_files(self, tmp_path):
        target = tmp_path / "out.txt"
        atomic_write(str(target), "first")
        atomic_write(str(target), "second")
        assert target.read_text() == "second"
        assert os.listdir(tmp_path) == ["out.txt"]

    def test_creates_parent_directories(self, tmp_path):
        target = tmp_path / "a" / "b" / "c.txt"
        atomic_write(str(target), "x")
        assert target.read_text() == "x"


class TestPointsCSV:
    def test_header_and_rows(self):
        text = format_points_csv([[0.5, -1.0], [2.0, 3.25]])
        assert text == "x,y\n0.5,-1.0\n2.0,3.25\n"

    def test_higher_dimensional_header(self):
        assert format_points_csv(np.zeros((1, 3))).splitlines()[0] == "x1,x2,x3"

    def test_values_round_trip_exactly(self, tmp_path, rng):
        points = rng.normal(size=(25, 2)) * 1e3
        path = str(tmp_path / "p.csv")
        write_points_csv(path, points)
        assert np.array_equal(read_points_csv(path, width=2), points)

    @pytest.mark.parametrize(
        "text,line,match",
        [
            ("", 1, "missing header"),
            ("a,b\n1,2\n", 1, "header"),
            ("x,y\n", 2, "no data rows"),
            ("x,y\n1,2\n3\n", 3, "columns"),
            ("x,y\n1,2\n\n3,four\n", 4, "non-numeric"),
            ("x,y\n1,2\n1,inf\n", 3, "non-finite"),
        ],
    )
    def test_malformed_files_report_the_line(self, tmp_path, text, line, match):
        path = write_text(tmp_path / "bad.csv", text)
        with pytest.raises(DataFormatError, match=match) as info:
            read_points_csv(path)
        assert info.value.line == line
        assert info.value.path == path
        assert f"{path}:{line}" in str(info.value)

    def test_width_check(self, tmp_path):
        path = write_text(tmp_path / "p.csv", "x1,x2,x3\n1,2,3\n")
        with pytest.raises(DataFormatError):
            read_points_csv(path, width=2)

    def test_allow_empty(self, tmp_path):
        path = write_text(tmp_path / "p.csv", "x,y\n")
        assert read_points_csv(path, allow_empty=True).shape == (0, 2)

    def test_missing_file_is_an_os_error(self, tmp_path):
        with pytest.raises(OSError):
            read_points_csv(str(tmp_path / "nope.csv"))


class TestRecordCSV:
    def test_round_trip(self, tmp_path):
        store = RunStore(str(tmp_path))
        store.save_record(sample_record())
        rows = list(store.load_record())
        assert [r.iteration for r in rows] == [100, 200]
        assert rows[1].grad_norm == 0.1 + 0.2
        assert math.isnan(rows[0].mmd)

    def test_header(self, tmp_path):
        store = RunStore(str(tmp_path))
        store.save_record(sample_record())
        first = (tmp_path / "record.csv").read_text().splitlines()[0]
        assert first == "iter,loss,grad_norm,w2,mmd"

    def test_out_of_order_rows(self, tmp_path):
        path = write_text(tmp_path / "record.csv", "iter,loss,grad_norm,w2,mmd\n5,0,0,0,0\n5,0,0,0,0\n")
        with pytest.raises(DataFormatError) as info:
            read_record_csv(path)
        assert info.value.line == 3

    def test_fractional_iteration(self, tmp_path):
        path = write_text(tmp_path / "record.csv", "iter,loss,grad_norm,w2,mmd\n1.5,0,0,0,0\n")
        with pytest.raises(DataFormatError, match="integer"):
            read_record_csv(path)

    def test_missing_record_is_empty(self, tmp_path):
        assert len(RunStore(str(tmp_path)).load_record()) == 0


class TestGridCSV:
    def test_round_trip(self, tmp_path, rng):
        grid = DensityGrid((-1.0, 2.0), (0.5, 1.5), (4, 3), rng.uniform(size=(3, 4)))
        path = str(tmp_path / "grid.csv")
        write_grid_csv(path, grid)
        restored = read_grid_csv(path)
        assert restored.same_geometry(grid)
        assert np.array_equal(restored.values, grid.values)

    def test_metadata_line(self, tmp_path):
        path = write_text(tmp_path / "grid.csv", "0,1,0,1,1,1\n0.5\n")
        with pytest.raises(DataFormatError, match="metadata"):
            read_grid_csv(path)

    def test_row_count(self, tmp_path):
        path = write_text(tmp_path / "grid.csv", "# 0,1,0,1,2,2\n1,1\n")
        with pytest.raises(DataFormatError, match="grid rows"):
            read_grid_csv(path)

    def test_negative_density(self, tmp_path):
        path = write_text(tmp_path / "grid.csv", "# 0,1,0,1,1,1\n-1\n")
        with pytest.raises(DataFormatError):
            read_grid_csv(path)


class TestNetworkJSON:
    def test_round_trip_with_optimizer(self, tmp_path, rng):
        net = network_init([2, 4, 1], seed=2)
        opt = OptState.for_network(net, learning_rate=1e-3)
        grads = ParamGrads([rng.normal(size=w.shape) for w in net.weights], [rng.normal(size=b.shape) for b in net.biases])
        rmsprop_step(net, grads, opt)
        path = str(tmp_path / "net.json")
        save_network(path, net, opt)

        restored, restored_opt = load_network(path)
        for a, b in zip(restored.parameters(), net.parameters()):
            assert np.array_equal(a, b)
        assert restored_opt.steps == 1
        for a, b in zip(restored_opt.accumulators, opt.accumulators):
            assert np.array_equal(a, b)

    def test_without_optimizer(self, tmp_path):
        path = str(tmp_path / "gen.json")
        save_network(path, network_init([2, 1], seed=0))
        assert load_network(path)[1] is None

    def test_malformed_json_reports_the_line(self, tmp_path):
        path = write_text(tmp_path / "net.json", '{\n  "layers": [\n  oops\n]}')
        with pytest.raises(DataFormatError) as info:
            load_network(path)
        assert info.value.line == 3

    def test_malformed_payload(self, tmp_path):
        path = write_text(tmp_path / "net.json", '{"nothing": 1}')
        with pytest.raises(DataFormatError, match="checkpoint"):
            load_network(path)


class TestRunStore:
    def test_checkpoints(self, tmp_path, rng):
        store = RunStore(str(tmp_path / "run"))
        net = network_init([2, 3, 1], seed=0)
        for k in (0, 50, 100):
            store.save_particles(k, rng.normal(size=(4, 2)))
        store.save_network(0, net)
        store.save_network(50, net, OptState.for_network(net, 1e-3))
        (tmp_path / "run" / "particles_x.csv").write_text("x,y\n")

        assert store.checkpoints() == [0, 50, 100]
        assert store.latest_checkpoint() == 50
        assert store.latest_checkpoint(needs_network=False) == 100

        particles, loaded, opt = store.load_checkpoint(50)
        assert particles.shape == (4, 2)
        assert loaded.layer_widths == (2, 3, 1)
        assert opt is not None
        assert store.load_checkpoint(100)[1] is None

    def test_config_copy(self, tmp_path):
        store = RunStore(str(tmp_path))
        assert store.load_config_text() is None
        store.save_config("step_size = 0.005\n")
        assert store.load_config_text() == "step_size = 0.005\n"

    def test_run_stats(self, tmp_path):
        store = RunStore(str(tmp_path))
        assert store.get_run_stats() == {"checkpoints": 0, "latest_checkpoint": None, "diagnostic_rows": 0}
        store.save_particles(0, np.zeros((2, 2)))
        store.save_record(sample_record())
        stats = store.get_run_stats()
        assert stats["checkpoints"] == 1
        assert stats["last_iteration"] == 200
        assert stats["loss"] == -0.9


class TestMetricsCSV:
    def test_single_row(self, tmp_path):
        path = tmp_path / "metrics.csv"
        write_metrics_csv(str(path), {"w2": 0.5, "mmd": 0.25})
        assert path.read_text() == "w2,mmd\n0.5,0.25\n"
