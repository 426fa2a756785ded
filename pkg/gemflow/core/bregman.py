"""
GemFlow Bregman Scores
Density-ratio and density-difference fitting objectives with gradient penalty
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from scipy.special import expit, xlogy

from gemflow.core.net import Network, ParamGrads, as_batch, backward, forward_cache, input_gradient_vjp
from gemflow.errors import ConfigError, DomainError, InvalidArgumentError, NumericFault, UndefinedRatioError

logger = logging.getLogger(__name__)

RATIO_KINDS = ("lsdr", "lr")


@dataclass
class RatioObjective:
    """Which ratio score to fit, its penalty weight and the positivity clamp"""

    kind: str = "lsdr"
    penalty_alpha: float = 0.0
    ratio_min: float = 1e-3
    ratio_max: float = 1e3

    def __post_init__(self):
        if self.kind not in RATIO_KINDS:
            raise ConfigError(f"Unknown ratio objective '{self.kind}'")
        if self.penalty_alpha < 0:
            raise ConfigError(f"penalty_alpha must be >= 0, got {self.penalty_alpha}")
        if not 0 < self.ratio_min < self.ratio_max:
            raise ConfigError(f"ratio clamp needs 0 < r_min < r_max, got [{self.ratio_min}, {self.ratio_max}]")

    def ratio_values(self, raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Map raw network output to R and dR/draw.

        LSDR uses the raw output. LR passes it through softplus and clamps to
        [ratio_min, ratio_max]; the derivative is zero where the clamp is active.
        """
        if self.kind == "lsdr":
            return raw, np.ones_like(raw)
        soft = np.logaddexp(0.0, raw)
        inside = (soft >= self.ratio_min) & (soft <= self.ratio_max)
        return np.clip(soft, self.ratio_min, self.ratio_max), expit(raw) * inside

    def loss(self, net: Network, x_p: Any, y_q: Any) -> Tuple[float, ParamGrads]:
        if self.kind == "lsdr":
            return lsdr_empirical_loss(net, x_p, y_q, self.penalty_alpha)
        return lr_empirical_loss(net, x_p, y_q, objective=self)


@dataclass
class DiffObjective:
    """Uniform base measure w on a box, used by density-difference fitting"""

    low: np.ndarray
    high: np.ndarray
    sample_count: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=np.float64)
        self.high = np.asarray(self.high, dtype=np.float64)
        if self.low.shape != self.high.shape or self.low.ndim != 1:
            raise ConfigError("Base-measure box bounds must be matching vectors")
        if np.any(self.high <= self.low):
            raise ConfigError("Base-measure box must have positive extent on every axis")
        if self.sample_count < 1:
            raise ConfigError(f"sample_count must be positive, got {self.sample_count}")

    @classmethod
    def from_batches(
        cls, x_p: Any, y_q: Any, sample_count: int = 1000, seed: int = 0, margin: float = 0.1
    ) -> "DiffObjective":
        """Bounding box of x_p and y_q, widened by `margin` of its extent"""
        points = np.vstack([as_batch(x_p), as_batch(y_q)])
        low, high = points.min(axis=0), points.max(axis=0)
        span = np.where(high > low, high - low, 1.0)
        return cls(low - 0.5 * margin * span, high + 0.5 * margin * span, sample_count, seed)

    @property
    def width(self) -> int:
        return self.low.shape[0]

    def sample(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return rng.uniform(self.low, self.high, size=(self.sample_count, self.width))

    def contains(self, points: Any) -> bool:
        pts = as_batch(points, self.width)
        return bool(np.all((pts >= self.low) & (pts <= self.high)))


@dataclass
class DiscreteDistributionPair:
    """Two probability vectors on a shared finite set of atoms"""

    atoms: np.ndarray
    p_weights: np.ndarray
    q_weights: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        self.p_weights = np.asarray(self.p_weights, dtype=np.float64)
        self.q_weights = np.asarray(self.q_weights, dtype=np.float64)
        k = self.atoms.shape[0]
        for name, w in (("p_weights", self.p_weights), ("q_weights", self.q_weights)):
            if w.shape != (k,):
                raise InvalidArgumentError(f"{name} must have one entry per atom ({k})")
            if np.any(w < 0):
                raise InvalidArgumentError(f"{name} has negative entries")
            if abs(w.sum() - 1.0) > 1e-12:
                raise InvalidArgumentError(f"{name} sums to {w.sum()!r}, not 1")
        if np.any((self.q_weights > 0) & (self.p_weights == 0)):
            raise UndefinedRatioError("q has mass on an atom where p has none")

    @property
    def ratio(self) -> np.ndarray:
        """r_i = q_i / p_i on atoms with p_i > 0 (0 elsewhere)"""
        r = np.zeros_like(self.p_weights)
        support = self.p_weights > 0
        r[support] = self.q_weights[support] / self.p_weights[support]
        return r


def _check_pair(net: Network, x_p: Any, y_q: Any) -> Tuple[np.ndarray, np.ndarray]:
    x_p = as_batch(x_p, net.input_width, name="x_p")
    y_q = as_batch(y_q, net.input_width, name="y_q")
    if x_p.shape[0] == 0 or y_q.shape[0] == 0:
        raise InvalidArgumentError("Both sample batches must be nonempty")
    if net.output_width != 1:
        raise ConfigError(f"Fitting objectives need a scalar-output network, got width {net.output_width}")
    return x_p, y_q


def _finite(loss: float, grads: ParamGrads, name: str) -> Tuple[float, ParamGrads]:
    if not np.isfinite(loss) or not grads.is_finite():
        raise NumericFault(f"{name} produced a non-finite loss or gradient")
    return float(loss), grads


def gradient_penalty(net: Network, x_p: Any) -> Tuple[float, ParamGrads]:
    """(1/n) sum_i ||grad_x R(X_i)||^2 and its exact parameter gradient"""
    x_p = as_batch(x_p, net.input_width, name="x_p")
    if x_p.shape[0] == 0:
        raise InvalidArgumentError("Gradient penalty needs a nonempty batch")
    grad, pullback = input_gradient_vjp(net, x_p)
    n = x_p.shape[0]
    value = float(np.sum(grad * grad)) / n
    return _finite(value, pullback(2.0 * grad / n), "gradient penalty")


def lsdr_empirical_loss(net: Network, x_p: Any, y_q: Any, alpha: float = 0.0) -> Tuple[float, ParamGrads]:
    """mean_p R^2 + alpha mean_p ||grad R||^2 - 2 mean_q R, with parameter gradient"""
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be >= 0, got {alpha}")
    x_p, y_q = _check_pair(net, x_p, y_q)
    n_p, n_q = x_p.shape[0], y_q.shape[0]

    r_p, cache_p = forward_cache(net, x_p)
    r_q, cache_q = forward_cache(net, y_q)
    loss = float(np.mean(r_p * r_p)) - 2.0 * float(np.mean(r_q))

    grads_p, _ = backward(net, x_p, 2.0 * r_p / n_p, cache_p)
    grads_q, _ = backward(net, y_q, np.full_like(r_q, -2.0 / n_q), cache_q)
    grads = grads_p + grads_q

    if alpha > 0:
        penalty, penalty_grads = gradient_penalty(net, x_p)
        loss += alpha * penalty
        grads = grads + penalty_grads.scaled(alpha)

    return _finite(loss, grads, "LSDR loss")


def lr_empirical_loss(
    net: Network, x_p: Any, y_q: Any, objective: Optional[RatioObjective] = None, alpha: Optional[float] = None
) -> Tuple[float, ParamGrads]:
    """Logistic-regression score mean_p log(1+R) - mean_q log(R/(1+R))

    R is softplus(net) clamped to the objective's range. An optional penalty
    alpha ||grad net||^2 at the p samples is added on the raw output.
    """
    objective = objective or RatioObjective(kind="lr")
    if objective.kind != "lr":
        raise ConfigError(f"lr_empirical_loss needs an LR objective, got '{objective.kind}'")
    alpha = objective.penalty_alpha if alpha is None else alpha
    x_p, y_q = _check_pair(net, x_p, y_q)
    n_p, n_q = x_p.shape[0], y_q.shape[0]

    raw_p, cache_p = forward_cache(net, x_p)
    raw_q, cache_q = forward_cache(net, y_q)
    r_p, dr_p = objective.ratio_values(raw_p)
    r_q, dr_q = objective.ratio_values(raw_q)

    loss = float(np.mean(np.log1p(r_p))) - float(np.mean(np.log(r_q) - np.log1p(r_q)))

    grads_p, _ = backward(net, x_p, dr_p / (1.0 + r_p) / n_p, cache_p)
    grads_q, _ = backward(net, y_q, -dr_q / (r_q * (1.0 + r_q)) / n_q, cache_q)
    grads = grads_p + grads_q

    if alpha > 0:
        penalty, penalty_grads = gradient_penalty(net, x_p)
        loss += alpha * penalty
        grads = grads + penalty_grads.scaled(alpha)

    return _finite(loss, grads, "LR loss")


def lsdd_empirical_loss(net: Network, x_p: Any, y_q: Any, diff: DiffObjective) -> Tuple[float, ParamGrads]:
    """Density-difference score 2 mean_p D - 2 mean_q D + mean_w D^2"""
    x_p, y_q = _check_pair(net, x_p, y_q)
    if diff.width != net.input_width:
        raise InvalidArgumentError(f"Base measure has width {diff.width}, network expects {net.input_width}")
    if not (diff.contains(x_p) and diff.contains(y_q)):
        # the quadratic term only sees the box, so D is unconstrained outside it
        logger.warning("Samples fall outside the base-measure box [%s, %s]", diff.low, diff.high)
    w = diff.sample()
    n_p, n_q, n_w = x_p.shape[0], y_q.shape[0], w.shape[0]

    d_p, cache_p = forward_cache(net, x_p)
    d_q, cache_q = forward_cache(net, y_q)
    d_w, cache_w = forward_cache(net, w)
    loss = 2.0 * float(np.mean(d_p)) - 2.0 * float(np.mean(d_q)) + float(np.mean(d_w * d_w))

    grads_p, _ = backward(net, x_p, np.full_like(d_p, 2.0 / n_p), cache_p)
    grads_q, _ = backward(net, y_q, np.full_like(d_q, -2.0 / n_q), cache_q)
    grads_w, _ = backward(net, w, 2.0 * d_w / n_w, cache_w)

    return _finite(loss, grads_p + grads_q + grads_w, "LSDD loss")


# Score functions g with derivative g', keyed by tag

def _lr_g(c: np.ndarray) -> np.ndarray:
    return xlogy(c, c) - xlogy(c + 1.0, c + 1.0)


def _lr_g_prime(c: np.ndarray) -> np.ndarray:
    return np.log(c) - np.log1p(c)


BREGMAN_SCORES: Dict[str, Tuple[Callable, Callable, bool]] = {
    # tag: (g, g', requires R > 0)
    "lsdr": (lambda c: (c - 1.0) ** 2, lambda c: 2.0 * (c - 1.0), False),
    "lr": (_lr_g, _lr_g_prime, True),
    "lsdd": (lambda c: c * c, lambda c: 2.0 * c, False),
}


def bregman_oracle(pair: DiscreteDistributionPair, R: Any, g: str = "lsdr") -> float:
    """Exact B(r, R) - B(r, r) on a finite support, r = q/p.

    Equals sum_i p_i [g(r_i) - g(R_i) - g'(R_i)(r_i - R_i)], which is
    nonnegative by convexity of g and zero iff R = r on the support of p.
    """
    if g not in BREGMAN_SCORES:
        raise ConfigError(f"Unknown Bregman score '{g}'")
    score, score_prime, positive = BREGMAN_SCORES[g]
    R = np.asarray(R, dtype=np.float64)
    if R.shape != pair.p_weights.shape:
        raise InvalidArgumentError(f"R has shape {R.shape}, expected one value per atom {pair.p_weights.shape}")

    support = pair.p_weights > 0
    p, r, R = pair.p_weights[support], pair.ratio[support], R[support]
    if positive and np.any(R <= 0):
        raise DomainError(f"Score '{g}' requires R > 0 on the support of p")
    terms = score(r) - score(R) - score_prime(R) * (r - R)
    return float(np.sum(p * terms))


def lsdr_score_offset(pair: DiscreteDistributionPair) -> float:
    """C = E_p[r^2] - 1 = E_q[r] - 1, which makes the LSDR score vanish at R = r"""
    r = pair.ratio
    return float(np.sum(pair.p_weights * r * r)) - 1.0


def smoothed_expectation(
    fn: Callable[[np.ndarray], np.ndarray], x: Any, alpha: float, n_samples: int, seed: int = 0
) -> Tuple[float, float]:
    """Monte-Carlo E_eps[fn(x + eps)] with eps ~ N(0, alpha I): (mean, standard error)"""
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be >= 0, got {alpha}")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    rng = np.random.default_rng(seed)
    noisy = x + np.sqrt(alpha) * rng.standard_normal((n_samples, x.shape[1]))
    values = np.asarray(fn(noisy), dtype=np.float64).reshape(-1)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(n_samples))
