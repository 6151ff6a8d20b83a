"""
Desk-scale benchmark end to end
===============================

Generate the 64x64 benchmark, build the pre-selection cache, train the
ablation matrix, score the full model on masked hold-out layouts and emit
relaxation curves. This is what the ``hallucigrid`` CLI does step by step.

Run with ``python3 demos/03_benchmark.py [out_dir] [epochs] [configs...]``.
The defaults (60 epochs, all six configurations) take a few hours on one core;
``python3 demos/03_benchmark.py bench 5 all only_prior`` finishes in minutes.
"""
import sys
from pathlib import Path

from hallucigrid import harness

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/benchmark")
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 60
configs = sys.argv[3:] or list(harness.ABLATIONS)

###############################################################################
# Data and cache. The cache holds one consensus target per training sample
# and records the pre-selection settings it was built with.

train = harness.benchmark_train_config(epochs=epochs)
dataset = harness.generate_dataset(harness.benchmark_dataset_config(), out / "data")
cache = harness.build_cache(dataset, out / "data", train)
print(f"{len(dataset.prior)} prior crops, {len(dataset.partial_train)}/{len(dataset.partial_test)} "
      f"train/test partial samples, {len(dataset.holdout)} hold-out layouts")

###############################################################################
# The ablation matrix trains every requested configuration with identical
# settings apart from the pair flags.

base = harness.ExperimentSpec(run_id="ablation", dataset=str(out / "data"), train=train,
                              net=harness.benchmark_net_config(), out_dir=str(out))
table = harness.run_ablation_matrix(base, seeds=(0,), configs=configs, dataset=dataset, cache=cache)
for row in table.means():
    print(f"{row['config']:<18} F(r=0) {row['f_measure_r0']:.3f}  mIoU full {row['mean_iou_full']:.3f}  "
          f"hidden {row['mean_iou_unobserved']:.3f}")

###############################################################################
# Hold-out generalization: unseen prior layouts behind real test masks.

first = base.run_dir / f"{configs[0]}_seed0"
report = harness.run_holdout_eval(first / "checkpoint.hnet", dataset, out_dir=first)
print(f"hold-out ({configs[0]}): hidden mIoU {report.means['mean_iou_unobserved']:.3f}")

###############################################################################
# Relaxation curves of every run as CSV and SVG.

runs = [base.run_dir / f"{name}_seed0" for name in configs]
csv_path, svg_path = harness.emit_report(runs, out / "report", labels=configs)
print(f"curves in {csv_path} and {svg_path}")
