"""
GemFlow Particle Flow
Forward-Euler particle transport with the ratio-fit inner loop and the generator outer loop
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterator, List, Optional, Tuple

import numpy as np

from gemflow.config import Config, FlowConfig, RATIO_ESTIMATORS
from gemflow.core.bregman import DiffObjective, RatioObjective, lsdd_empirical_loss
from gemflow.core.metrics import ratio_fit_diagnostics, mmd2_unbiased, subsample, wasserstein2_exact
from gemflow.core.net import (
    Network,
    OptState,
    as_batch,
    backward,
    forward,
    forward_cache,
    input_gradient,
    network_init,
    rmsprop_step,
    value_and_input_gradient,
)
from gemflow.core.velocity import Kernel, diff_velocity, get_divergence, mmd_velocity, ratio_velocity
from gemflow.errors import ConfigError, InvalidArgumentError, NumericFault, ShapeError

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ("iter", "loss", "grad_norm", "w2", "mmd")

# Called after every iteration with (iteration, particles, net, opt, record)
IterationCallback = Callable[[int, np.ndarray, Optional[Network], Optional[OptState], "RunRecord"], None]


@dataclass(frozen=True)
class RecordRow:
    iteration: int
    loss: float
    grad_norm: float
    w2: float
    mmd: float
    # seconds since the loop started; kept in memory and in the log, not in record.csv
    wall_clock: float = float("nan")

    def as_tuple(self) -> Tuple[float, ...]:
        return (self.iteration, self.loss, self.grad_norm, self.w2, self.mmd)


@dataclass
class RunRecord:
    """Append-only diagnostics, one row per diagnostic step; NaN marks a skipped value"""

    rows: List[RecordRow] = field(default_factory=list)

    def append(self, row: RecordRow):
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise InvalidArgumentError(
                f"Record rows must be ordered: iteration {row.iteration} after {self.rows[-1].iteration}"
            )
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[RecordRow]:
        return iter(self.rows)

    @property
    def last(self) -> Optional[RecordRow]:
        return self.rows[-1] if self.rows else None

    def column(self, name: str) -> np.ndarray:
        index = RECORD_COLUMNS.index(name)
        return np.array([row.as_tuple()[index] for row in self.rows], dtype=np.float64)

    def truncated(self, iteration: int) -> "RunRecord":
        """Rows up to and including `iteration` (used when resuming)"""
        return RunRecord([row for row in self.rows if row.iteration <= iteration])


def euler_step(particles: Any, field: Any, s: float) -> np.ndarray:
    """x + s v(x), row by row"""
    particles = as_batch(particles, name="particles")
    field = np.asarray(field, dtype=np.float64)
    if field.shape != particles.shape:
        raise ShapeError(f"Velocity field shape {field.shape} does not match particles {particles.shape}")
    return particles + s * field


def integrate_analytic(field: Callable[[np.ndarray], np.ndarray], x0: Any, s: float, K: int) -> np.ndarray:
    """K forward-Euler steps of size s under a closed-form field"""
    if K < 0:
        raise InvalidArgumentError(f"K must be >= 0, got {K}")
    x = as_batch(x0, name="x0").copy()
    for _ in range(K):
        x = euler_step(x, field(x), s)
    return x


def ratio_network_for(cfg: FlowConfig, width: int, seed: Optional[int] = None) -> Network:
    """Scalar-output network [m, hidden..., 1] used for R or D"""
    return network_init([width, *cfg.hidden_widths, 1], cfg.seed if seed is None else seed)


def ratio_objective_for(cfg: FlowConfig) -> RatioObjective:
    return RatioObjective(cfg.estimator, cfg.penalty_alpha, cfg.ratio_min, cfg.ratio_max)


def _canonical(pool: np.ndarray) -> np.ndarray:
    # lexicographic row order, so equal multisets give bitwise-equal kernel sums
    return pool[np.lexsort(pool.T[::-1])]


def _draw(pool: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    return pool[rng.integers(0, pool.shape[0], size=size)]


def _fit(
    net: Network,
    opt: OptState,
    target: np.ndarray,
    particles: np.ndarray,
    cfg: FlowConfig,
    objective: Optional[RatioObjective],
    rng: np.random.Generator,
) -> float:
    """T rounds of the configured fitting objective; returns the last mini-batch loss"""
    loss = float("nan")
    for r in range(cfg.fit_rounds):
        x_p = _draw(target, cfg.batch_size, rng)
        y_q = _draw(particles, cfg.batch_size, rng)
        if objective is not None:
            loss, grads = objective.loss(net, x_p, y_q)
        else:
            diff = DiffObjective.from_batches(
                x_p, y_q, sample_count=cfg.lsdd_samples, seed=int(rng.integers(2 ** 62))
            )
            loss, grads = lsdd_empirical_loss(net, x_p, y_q, diff)
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug("fit round %d: loss %.6g, parameter gradient norm %.4g", r + 1, loss, grads.global_norm())
        rmsprop_step(net, grads, opt)
    return loss


def _velocity(
    net: Optional[Network],
    particles: np.ndarray,
    target: np.ndarray,
    cfg: FlowConfig,
    objective: Optional[RatioObjective],
    kernel: Optional[Kernel],
    rng: np.random.Generator,
) -> np.ndarray:
    if cfg.estimator in RATIO_ESTIMATORS:
        return ratio_velocity(net, get_divergence(cfg.divergence), particles, objective, cfg.v_max)
    if cfg.estimator == "lsdd":
        return diff_velocity(net, particles, cfg.v_max)
    # whole pools when the batch covers them, so equal pools give an exactly zero field
    target_pool = target if cfg.batch_size >= target.shape[0] else subsample(target, cfg.batch_size, rng)
    current_pool = particles if cfg.batch_size >= particles.shape[0] else subsample(particles, cfg.batch_size, rng)
    return mmd_velocity(kernel, _canonical(target_pool), _canonical(current_pool), particles, cfg.v_max)


def _fit_diagnostics(
    net: Optional[Network], target: np.ndarray, particles: np.ndarray, cfg: FlowConfig,
    objective: Optional[RatioObjective], rng: np.random.Generator,
) -> Tuple[float, float]:
    """(alpha = 0 fitting loss, mean gradient norm of the fitted function over the particles)"""
    if cfg.estimator == "mmd":
        return float("nan"), float("nan")
    if cfg.estimator == "lsdr":
        loss, grad_norm = ratio_fit_diagnostics(net, target, particles)
        if not np.isfinite(grad_norm):
            raise NumericFault(f"Non-finite gradient norm {grad_norm} in the fit diagnostics")
        return loss, grad_norm
    if cfg.estimator == "lsdd":
        diff = DiffObjective.from_batches(
            target, particles, sample_count=cfg.lsdd_samples, seed=int(rng.integers(2 ** 62))
        )
        loss, _ = lsdd_empirical_loss(net, target, particles, diff)
        grad = input_gradient(net, particles)
    else:
        loss, _ = replace(objective, penalty_alpha=0.0).loss(net, target, particles)
        raw, grad = value_and_input_gradient(net, particles)
        grad = objective.ratio_values(raw)[1] * grad
    grad_norm = float(np.linalg.norm(grad, axis=1).mean())
    if not (np.isfinite(loss) and np.isfinite(grad_norm)):
        raise NumericFault(f"Non-finite fit diagnostics: loss {loss}, gradient norm {grad_norm}")
    return loss, grad_norm


def _transport_diagnostics(
    target: np.ndarray, particles: np.ndarray, cfg: FlowConfig, kernel: Kernel, rng: np.random.Generator
) -> Tuple[float, float]:
    size = min(cfg.diag_size, target.shape[0], particles.shape[0], Config.MAX_W2_POINTS)
    target_sub = subsample(target, size, rng)
    particle_sub = subsample(particles, size, rng)
    w2, _ = wasserstein2_exact(particle_sub, target_sub)
    mmd = mmd2_unbiased(particle_sub, target_sub, kernel) if size >= 2 else float("nan")
    if size >= 2 and not np.isfinite(mmd):
        raise NumericFault("Non-finite MMD^2 diagnostic")
    return w2, mmd


def diagnostic_kernel(target: np.ndarray, cfg: FlowConfig) -> Kernel:
    """Fixed kernel per run: configured bandwidth or the median heuristic on the target"""
    if cfg.kernel_bandwidth is not None:
        return Kernel(cfg.kernel_bandwidth)
    return Kernel.median_heuristic(target, seed=cfg.seed)


def inner_loop(
    particles: Any,
    target: Any,
    net: Optional[Network],
    cfg: FlowConfig,
    record: Optional[RunRecord] = None,
    start_iteration: int = 0,
    opt: Optional[OptState] = None,
    callback: Optional[IterationCallback] = None,
) -> Tuple[np.ndarray, Optional[Network], RunRecord]:
    """Iterations start_iteration+1 .. cfg.iterations of fit-then-push.

    Each iteration draws its randomness from default_rng([seed, k]), so a run
    resumed from a checkpoint at iteration k continues bit for bit. `opt` is
    updated in place; pass the checkpointed state to resume.
    """
    cfg.validate()
    particles = as_batch(particles, name="particles").copy()
    target = as_batch(target, particles.shape[1], name="target")
    record = record if record is not None else RunRecord()
    if particles.shape[0] == 0 or target.shape[0] == 0:
        raise InvalidArgumentError("Particles and target must be nonempty")
    if cfg.batch_size > particles.shape[0]:
        raise ConfigError(f"batch_size ({cfg.batch_size}) exceeds the particle count ({particles.shape[0]})")

    objective = ratio_objective_for(cfg) if cfg.estimator in RATIO_ESTIMATORS else None
    if cfg.estimator != "mmd":
        if net is None:
            net = ratio_network_for(cfg, particles.shape[1])
        if net.input_width != particles.shape[1] or net.output_width != 1:
            raise ShapeError(f"Network widths {net.layer_widths} do not fit {particles.shape[1]}-D particles")
        if opt is None:
            opt = OptState.for_network(net, cfg.learning_rate)
    kernel = diagnostic_kernel(target, cfg)

    started = time.perf_counter()
    k = start_iteration
    try:
        for k in range(start_iteration, cfg.iterations):
            rng = np.random.default_rng([cfg.seed, k])
            fit_loss = float("nan")
            if net is not None:
                if not cfg.warm_start:
                    net = ratio_network_for(cfg, particles.shape[1], seed=int(rng.integers(2 ** 31)))
                    opt = OptState.for_network(net, cfg.learning_rate)
                fit_loss = _fit(net, opt, target, particles, cfg, objective, rng)

            iteration = k + 1
            diagnose = iteration % cfg.diag_every == 0 or iteration == cfg.iterations
            if diagnose:
                diag_rng = np.random.default_rng([cfg.seed, k, 1])
                size = min(cfg.diag_size, target.shape[0], particles.shape[0])
                loss, grad_norm = _fit_diagnostics(
                    net, subsample(target, size, diag_rng), subsample(particles, size, diag_rng),
                    cfg, objective, diag_rng,
                )

            field = _velocity(net, particles, target, cfg, objective, kernel, rng)
            particles = euler_step(particles, field, cfg.step_size)
            if not np.all(np.isfinite(particles)):
                raise NumericFault(f"Particles left the finite range at iteration {iteration}")

            if diagnose:
                w2, mmd = _transport_diagnostics(target, particles, cfg, kernel, diag_rng)
                elapsed = time.perf_counter() - started
                record.append(RecordRow(iteration, loss, grad_norm, w2, mmd, elapsed))
                logger.info(
                    "iter %d: loss %.5f (last batch %.5f), grad norm %.4g, W2 %.4f, MMD^2 %.3g, %.1fs",
                    iteration, loss, fit_loss, grad_norm, w2, mmd, elapsed,
                )
            if callback is not None:
                callback(iteration, particles, net, opt, record)
    except NumericFault as exc:
        logger.error("Numeric fault at iteration %d: %s", k + 1, exc)
        exc.record = record
        raise

    return particles, net, record


def generator_loss(gen: Network, latents: Any, targets: Any) -> float:
    """(1/n) sum_i ||G(z_i) - y_i||^2"""
    out = forward(gen, latents)
    targets = as_batch(targets, gen.output_width, name="targets")
    return float(np.sum((out - targets) ** 2)) / targets.shape[0]


def fit_generator(
    gen: Network, latents: Any, targets: Any, epochs: int, lr: float, opt: Optional[OptState] = None
) -> Network:
    """Full-batch RMSProp on the mean squared distance between G(z_i) and y_i"""
    latents = as_batch(latents, gen.input_width, name="latents")
    targets = as_batch(targets, gen.output_width, name="targets")
    n = latents.shape[0]
    if targets.shape[0] != n or n == 0:
        raise ShapeError(f"latents ({n}) and targets ({targets.shape[0]}) must pair up row by row")
    if epochs < 1:
        raise InvalidArgumentError(f"epochs must be >= 1, got {epochs}")

    gen = gen.copy()
    opt = opt if opt is not None else OptState.for_network(gen, lr)
    for epoch in range(epochs):
        out, cache = forward_cache(gen, latents)
        residual = out - targets
        grads, _ = backward(gen, latents, 2.0 * residual / n, cache)
        rmsprop_step(gen, grads, opt)
        if epoch == 0 or epoch == epochs - 1:
            logger.debug("generator epoch %d: mse %.6g", epoch, float(np.sum(residual ** 2)) / n)
    return gen


LatentSampler = Callable[[int, np.random.Generator], np.ndarray]


def gaussian_latents(n: int, rng: np.random.Generator, width: int = 2) -> np.ndarray:
    return rng.standard_normal((n, width))


def outer_loop(
    gen: Network,
    latent_sampler: LatentSampler,
    target: Any,
    cfg: FlowConfig,
    outer_rounds: int,
    inner_per_outer: int,
    n_samples: int,
    gen_epochs: int = 200,
    gen_learning_rate: float = 0.0005,
    net: Optional[Network] = None,
    record: Optional[RunRecord] = None,
    round_callback: Optional[Callable[[int, Network, RunRecord], None]] = None,
) -> Tuple[Network, RunRecord]:
    """Alternate: push G(Z) with IL inner iterations, then refit G on the pushed points"""
    if outer_rounds < 0 or inner_per_outer < 0:
        raise InvalidArgumentError("outer_rounds and inner_per_outer must be >= 0")
    target = as_batch(target, gen.output_width, name="target")
    record = record if record is not None else RunRecord()
    opt = None
    if net is None and cfg.estimator != "mmd":
        net = ratio_network_for(cfg, gen.output_width)
    if net is not None:
        opt = OptState.for_network(net, cfg.learning_rate)

    for r in range(outer_rounds):
        rng = np.random.default_rng([cfg.seed, r, 2])
        latents = as_batch(latent_sampler(n_samples, rng), gen.input_width, name="latents")
        pushed = forward(gen, latents)
        if inner_per_outer > 0:
            inner_cfg = replace(cfg, iterations=(r + 1) * inner_per_outer, diag_every=inner_per_outer)
            pushed, net, record = inner_loop(
                pushed, target, net, inner_cfg, record, start_iteration=r * inner_per_outer, opt=opt,
            )
        gen = fit_generator(gen, latents, pushed, gen_epochs, gen_learning_rate)
        logger.info("outer round %d/%d: generator mse %.6g", r + 1, outer_rounds, generator_loss(gen, latents, pushed))
        if round_callback is not None:
            round_callback(r + 1, gen, record)
    return gen, record
