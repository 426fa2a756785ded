"""
GemFlow Command Line
sample-data, train-flow, eval and plot subcommands
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from gemflow.config import get_config, load_run_config, with_overrides
from gemflow.core.datasets import DATASET_IDS, DatasetSpec, sample
from gemflow.core.metrics import DensityGrid, kde, kde_l1, mmd2_unbiased, subsample, wasserstein2_exact
from gemflow.core.velocity import Kernel
from gemflow.errors import ConfigError, GemflowError, InvalidArgumentError
from gemflow.services.plot_service import PlotService
from gemflow.services.training_service import TrainingService
from gemflow.storage.run_store import (
    read_grid_csv,
    read_points_csv,
    read_record_csv,
    write_metrics_csv,
    write_points_csv,
)

EXIT_OK = 0
EXIT_IO = 4

# eval compares against the target drawn at --seed; baseline draw b uses --seed + 1 + b
EVAL_TARGET_OFFSET = 0
EVAL_BASELINE_OFFSET = 1
EVAL_BASELINE_DRAWS = 20
EVAL_BASELINE_QUANTILE = 0.95
EVAL_MAX_POINTS = 2048


def cmd_sample_data(args: argparse.Namespace) -> int:
    points = sample(DatasetSpec(args.dataset, seed=args.seed), args.n)
    write_points_csv(args.out, points)
    print(f"✅ Wrote {args.n} points from {args.dataset} to {args.out}")
    return EXIT_OK


def cmd_train_flow(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    config = with_overrides(config, out_dir=args.out, seed=args.seed, n_particles=args.n, dataset=args.dataset)
    service = TrainingService(config)
    print(f"🚀 Training {config.flow.estimator}/{config.flow.divergence} flow: "
          f"{config.reference} -> {config.dataset}, {config.n_particles} particles")
    result = service.run(resume=args.resume)

    stats = service.store.get_run_stats()
    print(f"✅ Run finished at iteration {result.final_iteration}: {service.store.run_dir}")
    print("📊 Run stats:")
    for key, value in stats.items():
        print(f"   • {key}: {value}")
    return EXIT_OK


def baseline_w2(target: np.ndarray, dataset: str, seed: int, draws: int, quantile: float) -> float:
    """Upper quantile of W2(fresh target draw, target) over `draws` independent draws of the same size"""
    size = target.shape[0]
    values = []
    for b in range(draws):
        fresh = sample(DatasetSpec(dataset, seed=seed + EVAL_BASELINE_OFFSET + b), size)
        values.append(wasserstein2_exact(fresh, target)[0])
    return float(np.quantile(values, quantile, method="higher"))


def evaluate(
    particles: np.ndarray,
    dataset: str,
    seed: int,
    max_points: int = EVAL_MAX_POINTS,
    baseline_draws: int = EVAL_BASELINE_DRAWS,
    baseline_quantile: float = EVAL_BASELINE_QUANTILE,
) -> dict:
    """W2, MMD^2 and KDE L1 against a fresh target draw, plus a resampled two-sample W2 baseline"""
    if baseline_draws < 1:
        raise InvalidArgumentError(f"baseline draws must be >= 1, got {baseline_draws}")
    if not 0.0 <= baseline_quantile <= 1.0:
        raise InvalidArgumentError(f"baseline quantile must lie in [0, 1], got {baseline_quantile}")
    n = particles.shape[0]
    target = sample(DatasetSpec(dataset, seed=seed + EVAL_TARGET_OFFSET), n)

    rng = np.random.default_rng(seed)
    size = min(n, max_points)
    ours, theirs = (subsample(batch, size, rng) for batch in (particles, target))
    w2, _ = wasserstein2_exact(ours, theirs)
    w2_baseline = baseline_w2(theirs, dataset, seed, baseline_draws, baseline_quantile)
    kernel = Kernel.median_heuristic(theirs, seed=seed)
    mmd = mmd2_unbiased(ours, theirs, kernel) if size >= 2 else float("nan")

    grid = DensityGrid.covering(particles, target)
    l1 = kde_l1(kde(particles, grid), kde(target, grid))
    return {"w2": w2, "mmd": mmd, "kde_l1": l1, "w2_baseline": w2_baseline}


def cmd_eval(args: argparse.Namespace) -> int:
    particles = read_points_csv(args.particles, width=2)
    metrics = evaluate(
        particles, args.dataset, args.seed,
        baseline_draws=args.baseline_draws, baseline_quantile=args.baseline_quantile,
    )
    write_metrics_csv(args.out, metrics)
    print(f"✅ Metrics written to {args.out}: " + ", ".join(f"{k}={v:.4g}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    if not (args.particles or args.record or args.grid):
        raise ConfigError("plot needs at least one of --particles, --record, --grid")
    # read everything first so a bad input writes nothing
    particles = read_points_csv(args.particles, width=2) if args.particles else None
    record = read_record_csv(args.record) if args.record else None
    grid = read_grid_csv(args.grid) if args.grid else None

    service = PlotService()
    os.makedirs(args.out, exist_ok=True)
    written: List[str] = []

    if particles is not None:
        written.append(service.scatter(particles, os.path.join(args.out, "scatter.svg")))
        if args.kde:
            particle_grid = DensityGrid.covering(particles)
            written.append(service.heatmap(kde(particles, particle_grid), os.path.join(args.out, "kde.svg")))
    if record is not None:
        written.append(service.trace(record, os.path.join(args.out, "trace.svg")))
    if grid is not None:
        written.append(service.heatmap(grid, os.path.join(args.out, "heatmap.svg")))

    for path in written:
        print(f"✅ Wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gemflow", description="Particle flows driven by deep density-ratio fitting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-data", help="Write an x,y CSV sample of a 2D dataset")
    p.add_argument("--dataset", required=True, help=f"one of {', '.join(DATASET_IDS)}")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(handler=cmd_sample_data)

    p = sub.add_parser("train-flow", help="Run a particle flow from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="run directory (overrides out_dir)")
    p.add_argument("--seed", type=int, help="flow seed override")
    p.add_argument("--n", type=int, help="particle count override")
    p.add_argument("--dataset", help="target dataset override")
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in the run directory")
    p.set_defaults(handler=cmd_train_flow)

    p = sub.add_parser("eval", help="Compare a particle CSV with a target dataset")
    p.add_argument("--particles", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--baseline-draws", type=int, default=EVAL_BASELINE_DRAWS, help="target pairs behind w2_baseline")
    p.add_argument("--baseline-quantile", type=float, default=EVAL_BASELINE_QUANTILE, help="quantile reported as w2_baseline")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("plot", help="Render particles, a record or a density grid as SVG")
    p.add_argument("--particles")
    p.add_argument("--record")
    p.add_argument("--grid")
    p.add_argument("--kde", action="store_true", help="also render a KDE heatmap of --particles")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(handler=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    config = get_config()
    args = build_parser().parse_args(argv)
    try:
        config.validate_config()
        logging.basicConfig(level=config.log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        return args.handler(args)
    except GemflowError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_IO
