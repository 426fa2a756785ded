"""
Training Service Module
Runs train-flow end to end: data, flow, checkpoints, resume and plots
"""

import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from gemflow.config import RATIO_ESTIMATORS, RunConfig, dump_run_config, parse_run_config, resume_conflicts
from gemflow.core.datasets import DatasetSpec, sample
from gemflow.core.flow import (
    RunRecord,
    gaussian_latents,
    inner_loop,
    outer_loop,
    ratio_network_for,
    ratio_objective_for,
)
from gemflow.core.metrics import DensityGrid, kde
from gemflow.core.net import Network, OptState, forward, network_init
from gemflow.errors import ConfigError, NumericFault
from gemflow.services.plot_service import PlotService, render_run
from gemflow.storage.run_store import RunStore

logger = logging.getLogger(__name__)

# the reference pool is drawn with its own seed so target and reference never share a stream
REFERENCE_SEED_OFFSET = 1


@dataclass
class TrainingResult:
    particles: np.ndarray
    record: RunRecord
    net: Optional[Network] = None
    generator: Optional[Network] = None
    final_iteration: int = 0
    resumed_from: Optional[int] = None
    plots: List[str] = field(default_factory=list)
    # particles at iteration 0, for the transport map
    initial: Optional[np.ndarray] = None


class TrainingService:
    """Executes one train-flow run inside its run directory"""

    def __init__(self, config: RunConfig, plot_service: Optional[PlotService] = None):
        self.config = config.validate()
        self.store = RunStore(config.out_dir)
        self.plot_service = plot_service or PlotService()

    def target_sample(self) -> np.ndarray:
        spec = DatasetSpec(self.config.dataset, seed=self.config.data_seed)
        return sample(spec, self.config.resolved_target_size)

    def reference_sample(self) -> np.ndarray:
        spec = DatasetSpec(self.config.reference, seed=self.config.data_seed + REFERENCE_SEED_OFFSET)
        return sample(spec, self.config.n_particles)

    def run(self, resume: bool = False) -> TrainingResult:
        """Run the configured flow; with resume, continue from the newest usable checkpoint"""
        if resume:
            self._check_resumable()
        self.store.save_config(dump_run_config(self.config))
        target = self.target_sample()
        if self.config.outer is not None:
            result = self._run_outer(target)
        else:
            result = self._run_inner(target, resume)
        result.plots = self._plot(target, result)
        return result

    def _check_resumable(self):
        saved_text = self.store.load_config_text()
        if saved_text is None:
            return
        conflicts = resume_conflicts(parse_run_config(saved_text), self.config)
        if conflicts:
            raise ConfigError(
                f"Cannot resume {self.store.run_dir}: its checkpoints were written with different "
                f"{', '.join(conflicts)}"
            )

    def _resume_point(self) -> Optional[int]:
        needs_network = self.config.flow.estimator != "mmd"
        usable = [
            k for k in self.store.checkpoints()
            if 0 < k <= self.config.flow.iterations
            and (not needs_network or os.path.exists(self.store.network_path(k)))
        ]
        return usable[-1] if usable else None

    def _run_inner(self, target: np.ndarray, resume: bool) -> TrainingResult:
        cfg = self.config.flow
        start = self._resume_point() if resume else None
        net: Optional[Network] = None
        opt: Optional[OptState] = None

        if start is not None:
            particles, net, opt = self.store.load_checkpoint(start)
            record = self.store.load_record().truncated(start)
            initial = self.store.load_particles(0) if os.path.exists(self.store.particles_path(0)) else None
            print(f"🔄 Resuming from checkpoint {start}")
        else:
            particles = self.reference_sample()
            initial = particles.copy()
            record = RunRecord()
            if cfg.estimator != "mmd":
                net = ratio_network_for(cfg, particles.shape[1])
                opt = OptState.for_network(net, cfg.learning_rate)
            self.store.save_particles(0, particles)
            if net is not None:
                self.store.save_network(0, net, opt)

        every = self.config.checkpoint_every

        def checkpoint(iteration, current, current_net, current_opt, current_record):
            if iteration == cfg.iterations or (every and iteration % every == 0):
                self.store.save_particles(iteration, current)
                if current_net is not None:
                    self.store.save_network(iteration, current_net, current_opt)
                self.store.save_record(current_record)
                logger.info("Checkpoint %d written to %s", iteration, self.store.run_dir)

        try:
            particles, net, record = inner_loop(
                particles, target, net, cfg, record, start_iteration=start or 0, opt=opt, callback=checkpoint,
            )
        except NumericFault as exc:
            if exc.record is not None:
                self.store.save_record(exc.record)
            raise

        self.store.save_record(record)
        return TrainingResult(
            particles, record, net=net, final_iteration=cfg.iterations, resumed_from=start, initial=initial,
        )

    def _run_outer(self, target: np.ndarray) -> TrainingResult:
        cfg, outer = self.config.flow, self.config.outer
        gen = network_init([outer.latent_dim, *outer.generator_widths, target.shape[1]], cfg.seed)

        def sampler(n, rng):
            return gaussian_latents(n, rng, outer.latent_dim)

        def after_round(r, current_gen, current_record):
            self.store.save_generator(current_gen)
            self.store.save_record(current_record)

        gen, record = outer_loop(
            gen, sampler, target, cfg,
            outer_rounds=outer.outer_rounds,
            inner_per_outer=outer.inner_per_outer,
            n_samples=self.config.n_particles,
            gen_epochs=outer.gen_epochs,
            gen_learning_rate=outer.gen_learning_rate,
            round_callback=after_round,
        )
        final = outer.outer_rounds * outer.inner_per_outer
        rng = np.random.default_rng([cfg.seed, outer.outer_rounds, 3])
        particles = forward(gen, sampler(self.config.n_particles, rng))
        self.store.save_particles(final, particles)
        self.store.save_record(record)
        return TrainingResult(particles, record, generator=gen, final_iteration=final)

    def _plot(self, target: np.ndarray, result: TrainingResult) -> List[str]:
        written = []
        if self.config.plot_kde and target.shape[1] == 2:
            grid = DensityGrid.covering(target, result.particles)
            written += render_run(
                self.plot_service, self.store.run_dir,
                target_grid=kde(target, grid), generated_grid=kde(result.particles, grid),
            )
            if result.net is not None and self.config.flow.estimator in RATIO_ESTIMATORS:
                written.append(self.plot_service.ratio_surface(
                    result.net, ratio_objective_for(self.config.flow), grid, self.store.path("ratio_surface.svg"),
                ))
        if self.config.plot_trace:
            written += render_run(self.plot_service, self.store.run_dir, record=result.record)
        if self.config.plot_scatter and result.particles.shape[1] == 2:
            written.append(self.plot_service.scatter(result.particles, self.store.path("scatter.svg")))
            if result.initial is not None:
                written.append(self.plot_service.transport_map(
                    result.initial, result.particles, self.store.path("transport_map.svg"),
                ))
        return written
