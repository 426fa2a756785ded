"""
GemFlow Metrics
Exact W2, unbiased MMD^2, grid KDE and the loss / gradient-norm diagnostics
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import norm

from gemflow.config import Config
from gemflow.core.bregman import RatioObjective, lsdr_empirical_loss
from gemflow.core.net import Network, as_batch, forward, input_gradient
from gemflow.core.velocity import Kernel
from gemflow.errors import InvalidArgumentError, NumericFault

logger = logging.getLogger(__name__)

# Points per block when summing kernel columns onto the grid
KDE_CHUNK_ROWS = 8192


@dataclass
class TransportPlan:
    """Optimal pairing a_i -> b_permutation[i] and its total squared cost"""

    permutation: np.ndarray
    cost: float

    def __post_init__(self):
        self.permutation = np.asarray(self.permutation, dtype=np.intp)
        n = self.permutation.shape[0]
        if not np.array_equal(np.sort(self.permutation), np.arange(n)):
            raise InvalidArgumentError("Transport plan is not a permutation")


def wasserstein2_exact(A: Any, B: Any) -> Tuple[float, TransportPlan]:
    """W2 between two equal-size uniform empirical measures via exact assignment"""
    A = as_batch(A, name="A")
    B = as_batch(B, A.shape[1], name="B")
    n = A.shape[0]
    if n == 0 or B.shape[0] != n:
        raise InvalidArgumentError(f"W2 needs two nonempty batches of equal size, got {n} and {B.shape[0]}")
    if n > Config.MAX_W2_POINTS:
        raise InvalidArgumentError(f"W2 batches are limited to {Config.MAX_W2_POINTS} points, got {n}")

    with np.errstate(over="ignore"):
        cost = cdist(A, B, "sqeuclidean")
        # n * max cost bounds every assignment total and the solver's potentials
        bound = float(cost.max()) * n
    if not math.isfinite(bound):
        raise NumericFault(f"W2 cost overflows: largest squared distance {cost.max():.3g} over {n} pairs")
    rows, cols = linear_sum_assignment(cost)
    permutation = np.empty(n, dtype=np.intp)
    permutation[rows] = cols
    # exactly rounded sum, so W2(A, B) == W2(B, A) bitwise
    total = math.fsum(cost[np.arange(n), permutation])
    return math.sqrt(total / n), TransportPlan(permutation, total)


def mmd2_unbiased(A: Any, B: Any, kernel: Kernel) -> float:
    """Unbiased U-statistic estimate of the squared MMD between A and B"""
    A = as_batch(A, name="A")
    B = as_batch(B, A.shape[1], name="B")
    n, m = A.shape[0], B.shape[0]
    if n < 2 or m < 2:
        raise InvalidArgumentError(f"MMD^2 needs at least 2 points per batch, got {n} and {m}")

    k_aa = kernel.gram(A, A)
    k_bb = kernel.gram(B, B)
    k_ab = kernel.gram(A, B)
    within_a = (k_aa.sum() - np.trace(k_aa)) / (n * (n - 1))
    within_b = (k_bb.sum() - np.trace(k_bb)) / (m * (m - 1))
    return float(within_a + within_b - 2.0 * k_ab.mean())


def subsample(points: Any, size: int, rng: np.random.Generator) -> np.ndarray:
    """At most `size` rows drawn without replacement"""
    points = as_batch(points)
    if points.shape[0] <= size:
        return points
    return points[np.sort(rng.choice(points.shape[0], size=size, replace=False))]


@dataclass
class DensityGrid:
    """Cell-centred density on a regular x/y grid; values[j, i] sits at (x_i, y_j)"""

    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    resolution: Tuple[int, int]
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x_range = (float(self.x_range[0]), float(self.x_range[1]))
        self.y_range = (float(self.y_range[0]), float(self.y_range[1]))
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if not (self.x_range[1] > self.x_range[0] and self.y_range[1] > self.y_range[0]):
            raise InvalidArgumentError(f"Grid ranges must be increasing, got {self.x_range} x {self.y_range}")
        if min(self.resolution) < 1:
            raise InvalidArgumentError(f"Grid resolution must be positive, got {self.resolution}")
        shape = (self.resolution[1], self.resolution[0])
        if self.values is None:
            self.values = np.zeros(shape)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != shape:
            raise InvalidArgumentError(f"Grid values have shape {self.values.shape}, expected {shape}")
        if np.any(self.values < 0):
            raise InvalidArgumentError("Density grid values must be nonnegative")

    @classmethod
    def covering(
        cls, *batches: Any, resolution: Union[int, Tuple[int, int]] = Config.KDE_RESOLUTION,
        margin: float = Config.KDE_MARGIN,
    ) -> "DensityGrid":
        """Empty grid over the joint bounding box, widened by `margin` of its extent"""
        points = np.vstack([as_batch(b, 2) for b in batches])
        low, high = points.min(axis=0), points.max(axis=0)
        span = np.where(high > low, high - low, 1.0)
        low, high = low - 0.5 * margin * span, high + 0.5 * margin * span
        if isinstance(resolution, int):
            resolution = (resolution, resolution)
        return cls((low[0], high[0]), (low[1], high[1]), resolution)

    @property
    def cell_width(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.resolution[0]

    @property
    def cell_height(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / self.resolution[1]

    @property
    def cell_area(self) -> float:
        return self.cell_width * self.cell_height

    @property
    def x_centers(self) -> np.ndarray:
        return self.x_range[0] + (np.arange(self.resolution[0]) + 0.5) * self.cell_width

    @property
    def y_centers(self) -> np.ndarray:
        return self.y_range[0] + (np.arange(self.resolution[1]) + 0.5) * self.cell_height

    def total_mass(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def same_geometry(self, other: "DensityGrid") -> bool:
        return (self.x_range, self.y_range, self.resolution) == (other.x_range, other.y_range, other.resolution)

    def with_values(self, values: np.ndarray) -> "DensityGrid":
        return DensityGrid(self.x_range, self.y_range, self.resolution, values)


def scott_bandwidth(points: Any) -> np.ndarray:
    """Per-axis Scott's rule n^(-1/6) * sigma for 2D data"""
    points = as_batch(points)
    n = points.shape[0]
    sigma = points.std(axis=0, ddof=1) if n > 1 else np.zeros(points.shape[1])
    return n ** (-1.0 / 6.0) * sigma


def kde(points: Any, grid: DensityGrid, bandwidth: Union[None, float, Sequence[float]] = None) -> DensityGrid:
    """Gaussian KDE evaluated at the grid's cell centres, normalized over the grid.

    bandwidth None means Scott's rule per axis; an axis with zero spread falls
    back to two cell widths.
    """
    points = as_batch(points, 2, name="points")
    if points.shape[0] == 0:
        raise InvalidArgumentError("KDE needs at least one point")

    if bandwidth is None:
        h = scott_bandwidth(points)
        fallback = 2.0 * np.array([grid.cell_width, grid.cell_height])
        h = np.where(h > 0, h, fallback)
    else:
        h = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (2,)).copy()
        if np.any(~(h > 0)):
            raise InvalidArgumentError(f"KDE bandwidth must be positive, got {bandwidth}")

    xs, ys = grid.x_centers, grid.y_centers
    values = np.zeros((ys.shape[0], xs.shape[0]))
    for start in range(0, points.shape[0], KDE_CHUNK_ROWS):
        chunk = points[start:start + KDE_CHUNK_ROWS]
        kx = norm.pdf((xs[None, :] - chunk[:, :1]) / h[0]) / h[0]
        ky = norm.pdf((ys[None, :] - chunk[:, 1:]) / h[1]) / h[1]
        values += ky.T @ kx

    mass = values.sum() * grid.cell_area
    if not mass > 0:
        raise InvalidArgumentError("No kernel mass falls on the grid; widen the grid or the bandwidth")
    logger.debug("KDE of %d points, bandwidth (%.4g, %.4g)", points.shape[0], h[0], h[1])
    return grid.with_values(values / mass)


def kde_l1(a: DensityGrid, b: DensityGrid) -> float:
    """L1 distance between two densities on the same grid"""
    if not a.same_geometry(b):
        raise InvalidArgumentError("KDE grids differ in range or resolution")
    return float(np.abs(a.values - b.values).sum() * a.cell_area)


def ratio_fit_diagnostics(net: Network, target: Any, particles: Any) -> Tuple[float, float]:
    """(alpha = 0 LSDR loss, mean ||grad R|| over the particles)"""
    loss, _ = lsdr_empirical_loss(net, target, particles, alpha=0.0)
    grad = input_gradient(net, as_batch(particles, net.input_width, name="particles"))
    return loss, float(np.linalg.norm(grad, axis=1).mean())


def ratio_on_grid(net: Network, objective: RatioObjective, grid: DensityGrid) -> DensityGrid:
    """Fitted ratio at the grid's cell centres; negative LSDR outputs read as 0"""
    xx, yy = np.meshgrid(grid.x_centers, grid.y_centers)
    raw = forward(net, np.column_stack([xx.ravel(), yy.ravel()]))
    values, _ = objective.ratio_values(raw[:, 0])
    return grid.with_values(np.maximum(values, 0.0).reshape(xx.shape))
