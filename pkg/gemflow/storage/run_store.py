"""
GemFlow Run Store
Run-directory persistence: particles, networks, records and grids
"""

import csv
import json
import logging
import os
import re
import tempfile
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from gemflow.core.flow import RECORD_COLUMNS, RecordRow, RunRecord
from gemflow.core.metrics import DensityGrid
from gemflow.core.net import Network, OptState
from gemflow.errors import ConfigError, DataFormatError, GemflowError

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.cfg"
RECORD_FILE = "record.csv"
GENERATOR_FILE = "generator.json"
_PARTICLES_RE = re.compile(r"^particles_(\d+)\.csv$")


def _num(value: float) -> str:
    # shortest round-trip decimal
    return repr(float(value))


def atomic_write(path: str, text: str):
    """Write via a temp file in the same directory, then rename over `path`"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def points_header(width: int) -> List[str]:
    return ["x", "y"] if width == 2 else [f"x{i + 1}" for i in range(width)]


def format_points_csv(points: Any) -> str:
    points = np.asarray(points, dtype=np.float64)
    lines = [",".join(points_header(points.shape[1]))]
    lines.extend(",".join(_num(v) for v in row) for row in points)
    return "\n".join(lines) + "\n"


def write_points_csv(path: str, points: Any):
    atomic_write(path, format_points_csv(points))


def _read_rows(path: str) -> List[Tuple[int, List[str]]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            return [(i + 1, row) for i, row in enumerate(csv.reader(f)) if row]
    except UnicodeDecodeError as exc:
        raise DataFormatError("file is not UTF-8 text", path) from exc
    except csv.Error as exc:
        raise DataFormatError(str(exc), path) from exc


def _parse_floats(path: str, line: int, row: Sequence[str], width: int) -> List[float]:
    if len(row) != width:
        raise DataFormatError(f"expected {width} columns, found {len(row)}", path, line)
    try:
        return [float(cell) for cell in row]
    except ValueError:
        raise DataFormatError(f"non-numeric value in row {row!r}", path, line) from None


def read_points_csv(path: str, width: Optional[int] = None, allow_empty: bool = False) -> np.ndarray:
    """Read an x,y (or x1..xm) CSV into an n x m matrix; errors carry the line number"""
    rows = _read_rows(path)
    if not rows:
        raise DataFormatError("missing header", path, 1)
    line, header = rows[0]
    header = [h.strip() for h in header]
    if header != points_header(len(header)):
        raise DataFormatError(f"unexpected header {','.join(header)!r}", path, line)
    if width is not None and len(header) != width:
        raise DataFormatError(f"expected {width} coordinate columns, found {len(header)}", path, line)

    values = [_parse_floats(path, line, row, len(header)) for line, row in rows[1:]]
    if not values and not allow_empty:
        raise DataFormatError("no data rows", path, line + 1)
    points = np.asarray(values, dtype=np.float64).reshape(len(values), len(header))
    bad = np.flatnonzero(~np.all(np.isfinite(points), axis=1))
    if bad.size:
        raise DataFormatError("non-finite coordinate", path, rows[1 + int(bad[0])][0])
    return points


def format_record_csv(record: RunRecord) -> str:
    lines = [",".join(RECORD_COLUMNS)]
    for row in record:
        lines.append(",".join([str(row.iteration)] + [_num(v) for v in row.as_tuple()[1:]]))
    return "\n".join(lines) + "\n"


def read_record_csv(path: str) -> RunRecord:
    rows = _read_rows(path)
    if not rows or [h.strip() for h in rows[0][1]] != list(RECORD_COLUMNS):
        raise DataFormatError(f"record header must be {','.join(RECORD_COLUMNS)}", path, 1)
    record = RunRecord()
    for line, row in rows[1:]:
        values = _parse_floats(path, line, row, len(RECORD_COLUMNS))
        if not float(values[0]).is_integer():
            raise DataFormatError(f"iteration {row[0]!r} is not an integer", path, line)
        try:
            record.append(RecordRow(int(values[0]), *values[1:]))
        except GemflowError as exc:
            raise DataFormatError(str(exc), path, line) from None
    return record


def write_grid_csv(path: str, grid: DensityGrid):
    """Row-major cell values under a '# x_min,x_max,y_min,y_max,nx,ny' metadata line"""
    meta = [*grid.x_range, *grid.y_range]
    lines = ["# " + ",".join([_num(v) for v in meta] + [str(r) for r in grid.resolution])]
    lines.extend(",".join(_num(v) for v in row) for row in grid.values)
    atomic_write(path, "\n".join(lines) + "\n")


def read_grid_csv(path: str) -> DensityGrid:
    rows = _read_rows(path)
    if not rows or not rows[0][1][0].startswith("#"):
        raise DataFormatError("missing grid metadata line", path, 1)
    meta = [rows[0][1][0].lstrip("# ")] + rows[0][1][1:]
    try:
        x0, x1, y0, y1 = (float(v) for v in meta[:4])
        nx, ny = (int(v) for v in meta[4:6])
    except ValueError:
        raise DataFormatError("malformed grid metadata", path, 1) from None
    values = [_parse_floats(path, line, row, nx) for line, row in rows[1:]]
    if len(values) != ny:
        raise DataFormatError(f"expected {ny} grid rows, found {len(values)}", path, len(rows) + 1)
    try:
        return DensityGrid((x0, x1), (y0, y1), (nx, ny), np.asarray(values))
    except ConfigError as exc:
        raise DataFormatError(str(exc), path) from None


def write_metrics_csv(path: str, metrics: Dict[str, float]):
    names = list(metrics)
    atomic_write(path, ",".join(names) + "\n" + ",".join(_num(metrics[n]) for n in names) + "\n")


def network_payload(net: Network, opt: Optional[OptState] = None) -> Dict[str, Any]:
    payload = net.to_dict()
    if opt is not None:
        payload["optimizer"] = opt.to_dict()
    return payload


def save_network(path: str, net: Network, opt: Optional[OptState] = None):
    atomic_write(path, json.dumps(network_payload(net, opt)))


def load_network(path: str) -> Tuple[Network, Optional[OptState]]:
    """Network plus its RMSProp state when the checkpoint carries one"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataFormatError(exc.msg, path, exc.lineno) from None
    try:
        net = Network.from_dict(payload)
        opt = OptState.from_dict(payload["optimizer"], net) if "optimizer" in payload else None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed network checkpoint: {exc}", path) from None
    return net, opt


class RunStore:
    """Run directory manager for train-flow"""

    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        self.ensure_run_directory()

    def ensure_run_directory(self):
        """Ensure run directory exists"""
        os.makedirs(self.run_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.run_dir, name)

    def particles_path(self, k: int) -> str:
        return self.path(f"particles_{k}.csv")

    def network_path(self, k: int) -> str:
        return self.path(f"net_{k}.json")

    def save_config(self, text: str):
        """Copy the resolved configuration verbatim into the run directory"""
        atomic_write(self.path(CONFIG_FILE), text)

    def load_config_text(self) -> Optional[str]:
        if not os.path.exists(self.path(CONFIG_FILE)):
            return None
        with open(self.path(CONFIG_FILE), "r", encoding="utf-8") as f:
            return f.read()

    def save_particles(self, k: int, particles: Any) -> str:
        write_points_csv(self.particles_path(k), particles)
        return self.particles_path(k)

    def load_particles(self, k: int) -> np.ndarray:
        return read_points_csv(self.particles_path(k))

    def save_network(self, k: int, net: Network, opt: Optional[OptState] = None) -> str:
        save_network(self.network_path(k), net, opt)
        return self.network_path(k)

    def save_generator(self, gen: Network):
        save_network(self.path(GENERATOR_FILE), gen)

    def save_record(self, record: RunRecord):
        atomic_write(self.path(RECORD_FILE), format_record_csv(record))

    def load_record(self) -> RunRecord:
        if not os.path.exists(self.path(RECORD_FILE)):
            return RunRecord()
        return read_record_csv(self.path(RECORD_FILE))

    def checkpoints(self) -> List[int]:
        """Iterations with a particle snapshot, ascending"""
        found = (_PARTICLES_RE.match(name) for name in os.listdir(self.run_dir))
        return sorted(int(m.group(1)) for m in found if m)

    def latest_checkpoint(self, needs_network: bool = True) -> Optional[int]:
        """Newest complete checkpoint (particles, and the network when the estimator has one)"""
        for k in reversed(self.checkpoints()):
            if not needs_network or k == 0 or os.path.exists(self.network_path(k)):
                return k
        return None

    def load_checkpoint(self, k: int) -> Tuple[np.ndarray, Optional[Network], Optional[OptState]]:
        particles = self.load_particles(k)
        if not os.path.exists(self.network_path(k)):
            return particles, None, None
        net, opt = load_network(self.network_path(k))
        return particles, net, opt

    def get_run_stats(self) -> Dict[str, Any]:
        """Get run statistics"""
        stats: Dict[str, Any] = {"checkpoints": len(self.checkpoints()), "latest_checkpoint": self.latest_checkpoint(False)}
        record = self.load_record()
        stats["diagnostic_rows"] = len(record)
        last = record.last
        if last is not None:
            stats.update(last_iteration=last.iteration, loss=last.loss, grad_norm=last.grad_norm, w2=last.w2, mmd=last.mmd)
        return stats
