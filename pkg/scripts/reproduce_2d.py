#!/usr/bin/env python3
"""
GemFlow 2D Experiments Script
Runs the shipped 2D configs at desk scale and prints a summary table
"""

import argparse
import glob
import os
import sys
from pathlib import Path

# Add parent directory to path to import modules
sys.path.append(str(Path(__file__).parent.parent))

from gemflow.config import load_run_config, with_overrides
from gemflow.errors import GemflowError
from gemflow.main import evaluate
from gemflow.services.training_service import TrainingService

CONFIG_DIR = Path(__file__).parent.parent / "configs"


def reproduce(config_paths, out_root, iterations=None, n_particles=None):
    """Train every config, evaluate against a fresh target draw, return summary rows"""
    print("🧪 GemFlow 2D experiments")
    print("=" * 50)

    rows = []
    for path in config_paths:
        name = Path(path).stem
        config = load_run_config(path)
        config = with_overrides(
            config, out_dir=os.path.join(out_root, name), iterations=iterations, n_particles=n_particles,
        )
        print(f"🚀 {name}: {config.reference} -> {config.dataset} ({config.flow.estimator}/{config.flow.divergence})")
        try:
            result = TrainingService(config).run()
        except GemflowError as e:
            print(f"❌ {name} failed: {e}")
            rows.append({"name": name, "status": "failed"})
            continue

        metrics = evaluate(result.particles, config.dataset, seed=config.data_seed + 100)
        last = result.record.last
        rows.append({
            "name": name,
            "status": "ok",
            "loss": last.loss if last else float("nan"),
            **metrics,
        })
        print(f"✅ {name}: W2 {metrics['w2']:.4f} (baseline {metrics['w2_baseline']:.4f}), KDE L1 {metrics['kde_l1']:.4f}")

    print()
    print(f"📊 {'config':<24}{'loss':>10}{'w2':>10}{'baseline':>10}{'kde_l1':>10}")
    for row in rows:
        if row["status"] != "ok":
            print(f"   {row['name']:<24}{'failed':>10}")
            continue
        print(f"   {row['name']:<24}{row['loss']:>10.4f}{row['w2']:>10.4f}{row['w2_baseline']:>10.4f}{row['kde_l1']:>10.4f}")
    return rows


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run the 2D experiment configs")
    parser.add_argument("configs", nargs="*", help="config files (default: every configs/*.cfg)")
    parser.add_argument("--out", default="runs/reproduce_2d", help="root directory for the run directories")
    parser.add_argument("--iterations", type=int, help="override the iteration count of every run")
    parser.add_argument("--n", type=int, help="override the particle count of every run")
    args = parser.parse_args()

    paths = args.configs or sorted(glob.glob(str(CONFIG_DIR / "*.cfg")))
    rows = reproduce(paths, args.out, iterations=args.iterations, n_particles=args.n)
    sys.exit(0 if all(row["status"] == "ok" for row in rows) else 1)
