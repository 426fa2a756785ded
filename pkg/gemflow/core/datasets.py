"""
GemFlow Datasets
Deterministic samplers for the 2D targets and the reference distributions
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict

import numpy as np

from gemflow.errors import ConfigError, InvalidArgumentError

logger = logging.getLogger(__name__)

# Documented constructions and their tunable parameters
DEFAULT_PARAMS: Dict[str, Dict[str, float]] = {
    # means on a circle of `radius` at angles 2 pi k / 8, isotropic `sigma`
    "eight_gaussians": {"radius": 2.0, "sigma": 0.2},
    # 5 blades: r ~ |N(radial_mean, radial_std)|, tangential N(0, tangential_std),
    # rotated by 2 pi k / 5 + rate * r
    "pinwheel": {"radial_mean": 1.0, "radial_std": 0.25, "tangential_std": 0.05, "rate": 0.4},
    # upper arc centred at (0, 0), flipped lower arc centred at (1, 0.5)
    "moons": {"noise": 0.08},
    # x1 ~ U(-4, 4), occupied unit cells where floor(x1) and floor(x2) share parity, scaled by `scale`
    "checkerboard": {"scale": 0.5},
    # theta ~ U(0, 3 pi), r = 2 theta / (3 pi), second arm mirrored through the origin
    "two_spirals": {"noise": 0.05},
    # rings of radius 2 and 1, radial noise, scaled by `scale`
    "circles": {"noise": 0.08, "scale": 0.5},
    # uniform on side x side squares centred at (+-1, +-1) [and (0, 0)]
    "four_squares": {"side": 0.5},
    "five_squares": {"side": 0.5},
    "small_four_gaussians": {"offset": 0.5, "sigma": 0.1},
    "large_four_gaussians": {"offset": 1.5, "sigma": 0.1},
    "gaussian_ref": {"sigma": 1.0},
    "uniform_ref": {"half_width": 1.0},
}

DATASET_IDS = tuple(DEFAULT_PARAMS)

CHECKERBOARD_EXTENT = 4.0
CIRCLE_RADII = (2.0, 1.0)
SPIRAL_TURN = 3.0 * np.pi


@dataclass
class DatasetSpec:
    """A named 2D distribution, its parameters and the sampling seed"""

    id: str
    params: Dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.id not in DEFAULT_PARAMS:
            raise ConfigError(f"Unknown dataset id '{self.id}' (expected one of {', '.join(DATASET_IDS)})")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.id])
        if unknown:
            raise ConfigError(f"Unknown parameter(s) for '{self.id}': {', '.join(sorted(unknown))}")
        for key, value in self.resolved_params().items():
            if not value > 0:
                raise ConfigError(f"Parameter '{key}' of '{self.id}' must be positive, got {value}")

    def resolved_params(self) -> Dict[str, float]:
        return {**DEFAULT_PARAMS[self.id], **self.params}


def _eight_gaussians(rng: np.random.Generator, n: int, radius: float, sigma: float) -> np.ndarray:
    angles = 2.0 * np.pi * rng.integers(0, 8, size=n) / 8.0
    centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    return centers + sigma * rng.standard_normal((n, 2))


def _pinwheel(
    rng: np.random.Generator, n: int, radial_mean: float, radial_std: float, tangential_std: float, rate: float
) -> np.ndarray:
    r = np.abs(rng.normal(radial_mean, radial_std, size=n))
    t = rng.normal(0.0, tangential_std, size=n)
    angle = 2.0 * np.pi * rng.integers(0, 5, size=n) / 5.0 + rate * r
    cos, sin = np.cos(angle), np.sin(angle)
    return np.column_stack([r * cos - t * sin, r * sin + t * cos])


def _moons(rng: np.random.Generator, n: int, noise: float) -> np.ndarray:
    theta = rng.uniform(0.0, np.pi, size=n)
    lower = rng.integers(0, 2, size=n).astype(bool)
    x = np.where(lower, 1.0 - np.cos(theta), np.cos(theta))
    y = np.where(lower, 0.5 - np.sin(theta), np.sin(theta))
    return np.column_stack([x, y]) + noise * rng.standard_normal((n, 2))


def _checkerboard(rng: np.random.Generator, n: int, scale: float) -> np.ndarray:
    x1 = rng.uniform(-CHECKERBOARD_EXTENT, CHECKERBOARD_EXTENT, size=n)
    row_pair = rng.integers(0, int(CHECKERBOARD_EXTENT), size=n)
    # each row pair spans two unit rows; the parity of floor(x1) picks the occupied one
    x2 = -CHECKERBOARD_EXTENT + 2.0 * row_pair + (np.floor(x1) % 2) + rng.uniform(0.0, 1.0, size=n)
    return scale * np.column_stack([x1, x2])


def _two_spirals(rng: np.random.Generator, n: int, noise: float) -> np.ndarray:
    theta = rng.uniform(0.0, SPIRAL_TURN, size=n)
    r = 2.0 * theta / SPIRAL_TURN
    arm = np.where(rng.integers(0, 2, size=n) == 1, -1.0, 1.0)[:, None]
    points = arm * np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    return points + noise * rng.standard_normal((n, 2))


def _circles(rng: np.random.Generator, n: int, noise: float, scale: float) -> np.ndarray:
    radii = np.asarray(CIRCLE_RADII)[rng.integers(0, 2, size=n)]
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = radii + noise * rng.standard_normal(n)
    return scale * np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def square_centers(count: int) -> np.ndarray:
    centers = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
    if count == 5:
        centers.append((0.0, 0.0))
    return np.asarray(centers)


def _squares(rng: np.random.Generator, n: int, side: float, count: int) -> np.ndarray:
    centers = square_centers(count)[rng.integers(0, count, size=n)]
    return centers + rng.uniform(-side / 2.0, side / 2.0, size=(n, 2))


def _four_gaussians(rng: np.random.Generator, n: int, offset: float, sigma: float) -> np.ndarray:
    centers = offset * square_centers(4)[rng.integers(0, 4, size=n)]
    return centers + sigma * rng.standard_normal((n, 2))


_SAMPLERS: Dict[str, Callable[..., np.ndarray]] = {
    "eight_gaussians": _eight_gaussians,
    "pinwheel": _pinwheel,
    "moons": _moons,
    "checkerboard": _checkerboard,
    "two_spirals": _two_spirals,
    "circles": _circles,
    "four_squares": lambda rng, n, side: _squares(rng, n, side, 4),
    "five_squares": lambda rng, n, side: _squares(rng, n, side, 5),
    "small_four_gaussians": _four_gaussians,
    "large_four_gaussians": _four_gaussians,
    "gaussian_ref": lambda rng, n, sigma: sigma * rng.standard_normal((n, 2)),
    "uniform_ref": lambda rng, n, half_width: rng.uniform(-half_width, half_width, size=(n, 2)),
}


def sample(spec: DatasetSpec, n: int) -> np.ndarray:
    """n i.i.d. draws (n x 2) from the named distribution, deterministic in the seed"""
    if n < 1:
        raise InvalidArgumentError(f"Sample size must be >= 1, got {n}")
    rng = np.random.default_rng(spec.seed)
    points = _SAMPLERS[spec.id](rng, int(n), **spec.resolved_params())
    logger.debug("Sampled %d points from %s (seed %d)", n, spec.id, spec.seed)
    return np.ascontiguousarray(points, dtype=np.float64)


def analytic_ratio_1d(mu_q: float, mu_p: float, sigma: float) -> Callable[[Any], Any]:
    """x -> N(mu_q, sigma^2)(x) / N(mu_p, sigma^2)(x)"""
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")

    def ratio(x):
        return np.exp((mu_q - mu_p) * (2.0 * np.asarray(x, dtype=np.float64) - mu_q - mu_p) / (2.0 * sigma ** 2))

    return ratio
