"""
GemFlow Velocity Fields
Ratio-, difference- and kernel-driven velocity fields for the particle flow
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from gemflow.core.bregman import RatioObjective
from gemflow.core.net import Network, as_batch, input_gradient, value_and_input_gradient
from gemflow.errors import ConfigError, DomainError, InvalidArgumentError, NumericFault

logger = logging.getLogger(__name__)

# Rows evaluated per kernel block in mmd_velocity
KERNEL_CHUNK_ROWS = 4096


@dataclass(frozen=True)
class FDivergence:
    """f-divergence generator f with its first and second derivatives"""

    tag: str
    f: Callable[[np.ndarray], np.ndarray]
    f_prime: Callable[[np.ndarray], np.ndarray]
    f_second: Callable[[np.ndarray], np.ndarray]


DIVERGENCES: Dict[str, FDivergence] = {
    "chi2": FDivergence(
        "chi2",
        f=lambda u: (u - 1.0) ** 2,
        f_prime=lambda u: 2.0 * (u - 1.0),
        f_second=lambda u: np.full_like(u, 2.0),
    ),
    "kl": FDivergence(
        "kl",
        f=lambda u: u * np.log(u),
        f_prime=lambda u: np.log(u) + 1.0,
        f_second=lambda u: 1.0 / u,
    ),
    "js": FDivergence(
        "js",
        f=lambda u: u * np.log(u) - (u + 1.0) * np.log((u + 1.0) / 2.0),
        f_prime=lambda u: np.log(2.0 * u / (u + 1.0)),
        f_second=lambda u: 1.0 / (u * (u + 1.0)),
    ),
    # log-D trick: f(u) = -log(2u / (1 + u))
    "logd": FDivergence(
        "logd",
        f=lambda u: np.log1p(u) - np.log(2.0 * u),
        f_prime=lambda u: 1.0 / (1.0 + u) - 1.0 / u,
        f_second=lambda u: 1.0 / (u * u) - 1.0 / ((1.0 + u) ** 2),
    ),
}


def get_divergence(tag: str) -> FDivergence:
    try:
        return DIVERGENCES[tag]
    except KeyError:
        raise ConfigError(f"Unknown divergence '{tag}' (expected one of {', '.join(DIVERGENCES)})") from None


def f_second(div: FDivergence, u: Any):
    """f''(u) for u > 0; scalars in, scalars out"""
    values = np.asarray(u, dtype=np.float64)
    if np.any(~(values > 0)):
        raise DomainError(f"f'' of '{div.tag}' is only defined for u > 0")
    result = div.f_second(values)
    return float(result) if result.ndim == 0 else result


@dataclass(frozen=True)
class Kernel:
    """Gaussian RBF kernel K(x, z) = exp(-||x - z||^2 / (2 h^2))"""

    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ConfigError(f"Kernel bandwidth must be positive, got {self.bandwidth}")

    def __call__(self, x: Any, z: Any) -> float:
        d = np.asarray(x, dtype=np.float64) - np.asarray(z, dtype=np.float64)
        return float(np.exp(-np.dot(d, d) / (2.0 * self.bandwidth ** 2)))

    def gram(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * self.bandwidth ** 2))

    @classmethod
    def median_heuristic(cls, batch: Any, max_points: int = 2000, seed: int = 0) -> "Kernel":
        """Bandwidth = median pairwise distance of (a subsample of) the batch"""
        points = as_batch(batch)
        if points.shape[0] > max_points:
            rng = np.random.default_rng(seed)
            points = points[rng.choice(points.shape[0], size=max_points, replace=False)]
        distances = pdist(points) if points.shape[0] > 1 else np.zeros(0)
        median = float(np.median(distances)) if distances.size else 0.0
        return cls(median if median > 0 else 1.0)


def cap_velocity(field: np.ndarray, v_max: float = np.inf) -> np.ndarray:
    """Scale rows whose Euclidean norm exceeds v_max back to norm v_max"""
    if not np.isfinite(v_max):
        return field
    norms = np.linalg.norm(field, axis=1, keepdims=True)
    scale = np.minimum(1.0, v_max / np.maximum(norms, np.finfo(np.float64).tiny))
    return field * scale


def _checked(field: np.ndarray, name: str, v_max: float) -> np.ndarray:
    if not np.all(np.isfinite(field)):
        raise NumericFault(f"{name} velocity is not finite")
    return cap_velocity(field, v_max)


def ratio_velocity(
    net: Network,
    div: FDivergence,
    points: Any,
    objective: Optional[RatioObjective] = None,
    v_max: float = np.inf,
) -> np.ndarray:
    """v(x) = -f''(R(x)) grad R(x), R read through the objective's positivity map"""
    objective = objective or RatioObjective()
    raw, grad_raw = value_and_input_gradient(net, as_batch(points, net.input_width, name="points"))
    ratio, d_ratio = objective.ratio_values(raw)
    grad_ratio = grad_raw if objective.kind == "lsdr" else d_ratio * grad_raw
    u = np.clip(ratio, objective.ratio_min, objective.ratio_max)
    field = -div.f_second(u) * grad_ratio
    return _checked(field, "ratio", v_max)


def diff_velocity(net: Network, points: Any, v_max: float = np.inf) -> np.ndarray:
    """v(x) = -2 grad D(x)"""
    field = -2.0 * input_gradient(net, as_batch(points, net.input_width, name="points"))
    return _checked(field, "difference", v_max)


def kernel_grad(kernel: Kernel, x: Any, z: Any) -> np.ndarray:
    """grad_x K(x, z) = -(x - z) / h^2 K(x, z)"""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return -(x - z) / kernel.bandwidth ** 2 * kernel(x, z)


def _mean_kernel_grad(kernel: Kernel, x: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """Row i: mean over z in pool of grad_x K(x_i, z)"""
    k = kernel.gram(x, pool)
    return (k @ pool - k.sum(axis=1, keepdims=True) * x) / (kernel.bandwidth ** 2 * pool.shape[0])


def mmd_velocity(
    kernel: Kernel, target: Any, current: Any, points: Any, v_max: float = np.inf
) -> np.ndarray:
    """Empirical MMD-flow field: mean grad K against target minus against current"""
    target = as_batch(target, name="target")
    current = as_batch(current, target.shape[1], name="current")
    points = as_batch(points, target.shape[1], name="points")
    if target.shape[0] == 0 or current.shape[0] == 0 or points.shape[0] == 0:
        raise InvalidArgumentError("MMD velocity needs nonempty target, current and evaluation batches")

    field = np.empty_like(points)
    for start in range(0, points.shape[0], KERNEL_CHUNK_ROWS):
        chunk = points[start:start + KERNEL_CHUNK_ROWS]
        field[start:start + KERNEL_CHUNK_ROWS] = (
            _mean_kernel_grad(kernel, chunk, target) - _mean_kernel_grad(kernel, chunk, current)
        )
    return _checked(field, "MMD", v_max)
