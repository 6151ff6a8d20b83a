"""
Partial grids and pre-selected targets
======================================

Build a small synthetic benchmark, look at one partially observed road grid
and at the consensus target assembled from its nearest prior samples.

Run with ``python3 demos/01_data_and_preselection.py [out_dir]``; PGM images
land in ``out_dir`` (default ``demo_out/01``).
"""
import sys
from pathlib import Path

import numpy as np

from hallucigrid.datagen import DatasetConfig, MaskSpec, WorldSpec, make_dataset
from hallucigrid.grid import BinaryGrid, TernaryGrid, write_pgm
from hallucigrid.preselect import PackedCorpus, consensus_target, packed_scores, topk_select

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/01")
out.mkdir(parents=True, exist_ok=True)

###############################################################################
# A dataset is three disjoint pools of procedural worlds: prior worlds give
# complete layouts, observation worlds give the partial samples (their ground
# truth is kept aside for scoring), hold-out worlds test generalization.

config = DatasetConfig(
    prior_worlds=[WorldSpec(seed=s, size=128, road_width=(2, 6)) for s in range(4)],
    observation_worlds=[WorldSpec(seed=100 + s, size=128, road_width=(4, 8)) for s in range(2)],
    mask=MaskSpec(seed=0, occluder_count=(1, 3), occluder_min_distance=8.0),
    window=32, prior_stride=8, observation_stride=16, n_train=32, n_test=16, n_holdout=0)
dataset = make_dataset(config)
print(f"{len(dataset.prior)} prior crops, {len(dataset.partial_train)} partial training samples")

###############################################################################
# Each partial sample is a ternary grid: road, non-road or unobserved. The
# unobserved part is the camera's blind region plus occluder shadows.

partial = TernaryGrid(dataset.partial_train[0])
print(f"observed fraction of sample 0: {np.mean(partial.cells != 2):.2f}")
write_pgm(partial, out / "partial.pgm")
write_pgm(BinaryGrid(dataset.gt_train[0]), out / "ground_truth.pgm")

###############################################################################
# Pre-selection scores every prior crop by mean IoU on the observed cells only
# and keeps the best K. Cells where all K agree form the consensus target.

corpus = PackedCorpus(dataset.prior)
scores = packed_scores(partial, corpus)
selected = topk_select(partial, corpus, k=8)
print("best scores:", np.round(scores[selected], 3))

target = consensus_target(corpus, selected)
print(f"consensus covers {target.valid.mean():.2f} of the grid")
write_pgm(TernaryGrid(np.where(target.valid, target.target.astype(np.uint8), 2)), out / "consensus.pgm")
write_pgm(BinaryGrid(dataset.prior[selected[0]]), out / "nearest_prior.pgm")
print(f"images written to {out}")
