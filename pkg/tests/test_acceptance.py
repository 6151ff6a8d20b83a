"""Acceptance criteria 1-8, one PASS/FAIL line each.

Criteria 5 and 6 train the desk-scale benchmark for 60 epochs (three
configurations, about an hour on one core) and are marked ``slow``; they still
run by default. Every line is repeated in the terminal summary.
"""
import itertools
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from hallucigrid import harness
from hallucigrid.datagen import GridSpec, LabelClass, LabeledPoint, project_points_to_grid
from hallucigrid.grid import CODE_NONROAD, CODE_ROAD, CODE_UNOBSERVED, TernaryGrid
from hallucigrid.harness import ExperimentSpec
from hallucigrid.metrics import VoxelGrid, contour_prf, hamming_distance, mean_iou
from hallucigrid.neuralnet import NetConfig, grad_check
from hallucigrid.preselect import PackedCorpus, consensus_target, topk_select
from hallucigrid.supervision import masked_bce, masked_bce_grad

RESULTS: dict[int, str] = {}


def record(n: int, passed: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert passed, line


# --- 1 -----------------------------------------------------------------------------------


def test_criterion_1_gradient_exactness():
    config = NetConfig(depth=2, base_channels=2, norm=False)
    start = time.perf_counter()
    report = grad_check(config, seed=0, size=8)
    elapsed = time.perf_counter() - start
    record(1, report.max_rel_error < 1e-4 and elapsed < 60,
           f"max rel error {report.max_rel_error:.2e} over {report.n_params} params (< 1e-4), "
           f"{elapsed:.1f} s (< 60 s)")


# --- 2 -----------------------------------------------------------------------------------


def _naive_bce(pred, target, valid):
    total, n = 0.0, 0
    for p, t, v in zip(pred.ravel().tolist(), target.ravel().tolist(), valid.ravel().tolist()):
        if v:
            total -= t * math.log(p) + (1.0 - t) * math.log(1.0 - p)
            n += 1
    return total / n


def test_criterion_2_loss_oracle():
    rng = np.random.default_rng(2)
    worst, grad_leak = 0.0, 0
    for _ in range(100):
        shape = (int(rng.integers(1, 5)), 1, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        pred = rng.uniform(1e-4, 1 - 1e-4, shape)
        t1 = rng.choice([0.0, 1.0], shape)
        t2 = (rng.random(shape) < 0.5).astype(float)
        v1 = rng.random(shape) < 0.5
        v2 = rng.random(shape) < 0.3
        v1.flat[0] = v2.flat[-1] = True
        for t, v in ((t1, v1), (t2, v2)):
            ref = _naive_bce(pred, t, v)
            worst = max(worst, abs(masked_bce(pred, t, v) - ref) / abs(ref))
        # pairs 1 and 2 share a prediction; pair 3 is valid everywhere
        combined = 0.5 * masked_bce_grad(pred, t1, v1) + 0.25 * masked_bce_grad(pred, t2, v2)
        grad_leak += int(np.count_nonzero(combined[~(v1 | v2)]))
    record(2, worst <= 1e-12 and grad_leak == 0,
           f"max rel deviation from per-cell reference {worst:.1e} (<= 1e-12); "
           f"non-zero gradients at non-valid cells: {grad_leak}")


# --- 3 -----------------------------------------------------------------------------------


def _naive_score(codes, candidate):
    obs = [(i, j) for i, j in itertools.product(*map(range, codes.shape)) if codes[i, j] != CODE_UNOBSERVED]
    ious = []
    for cls in (True, False):
        p = {c for c in obs if (codes[c] == CODE_ROAD) == cls}
        g = {c for c in obs if bool(candidate[c]) == cls}
        if p | g:
            ious.append(Fraction(len(p & g), len(p | g)))
    return sum(ious) / len(ious)


def test_criterion_3_preselection_oracle():
    rng = np.random.default_rng(3)
    base = rng.random((60, 8, 8)) < 0.4
    corpus_arr = np.concatenate([base, base[:40]])  # 40 exact duplicates force ties
    corpus_arr = corpus_arr[rng.permutation(100)]
    corpus = PackedCorpus(corpus_arr)
    k = 5
    mismatches, ties, valid_mismatch = 0, 0, 0
    for q in range(20):
        gt = corpus_arr[rng.integers(100)] if q % 2 else rng.random((8, 8)) < 0.4
        mask = rng.random((8, 8)) < rng.uniform(0.2, 0.9)
        mask[0, 0] = True
        codes = np.where(mask, gt.astype(np.uint8), CODE_UNOBSERVED).astype(np.uint8)
        scores = [_naive_score(codes, c) for c in corpus_arr]
        naive = sorted(range(100), key=lambda i: (-scores[i], i))[:k]
        ties += int(scores[naive[k - 1]] in [scores[i] for i in range(100) if i not in naive])
        ties += int(len({scores[i] for i in naive}) < k)
        selected = topk_select(TernaryGrid(codes), corpus, k)
        mismatches += int(list(selected) != naive)
        target = consensus_target(corpus, selected)
        unanimous = np.array([[len({bool(corpus_arr[s][i, j]) for s in naive}) == 1 for j in range(8)]
                              for i in range(8)])
        valid_mismatch += int(not np.array_equal(target.valid, unanimous))
        valid_mismatch += int(not np.array_equal(target.target[unanimous], corpus_arr[naive[0]][unanimous]))
    record(3, mismatches == 0 and valid_mismatch == 0 and ties > 0,
           f"20 queries on a 100-sample corpus: top-{k} mismatches {mismatches}, consensus mismatches "
           f"{valid_mismatch}, tie cases exercised {ties}")


# --- 4 -----------------------------------------------------------------------------------


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    failures = []
    for g in (rng.random((16, 16)) < 0.5, np.zeros((8, 8), bool), np.ones((8, 8), bool)):
        if any(contour_prf(g, g, r).f_measure != 1.0 for r in range(6)):
            failures.append("identity")
    a = np.zeros((12, 12), bool)
    a[4:7] = True
    b = np.roll(a, 1, axis=0)
    shift = [contour_prf(a, b, r).f_measure for r in range(6)]
    if shift != [0.0, 1.0, 1.0, 1.0, 1.0, 1.0]:
        failures.append(f"shift {shift}")
    for _ in range(50):
        pred, gt = rng.random((2, 16, 16)) < rng.uniform(0.2, 0.8)
        s = [contour_prf(pred, gt, r) for r in range(6)]
        if any(y.precision < x.precision or y.recall < x.recall for x, y in zip(s, s[1:])):
            failures.append("monotone")
    for _ in range(50):
        pred, gt = rng.random((2, 8, 8)) < 0.5
        region = rng.random((8, 8)) < 0.7
        region[0, 0] = True
        cells = set(zip(*np.nonzero(region)))
        ious = []
        for cls in (True, False):
            p = {c for c in cells if pred[c] == cls}
            q = {c for c in cells if gt[c] == cls}
            if p | q:
                ious.append(len(p & q) / len(p | q))
        if mean_iou(pred, gt, region) != sum(ious) / len(ious):
            failures.append("mean_iou")
        v, w = rng.random((2, 3, 4, 5)) < 0.5
        if hamming_distance(VoxelGrid(v), VoxelGrid(w)) != sum(x != y for x, y in zip(v.flat, w.flat)) / 60:
            failures.append("hamming")
    record(4, not failures, f"F(r=0..5) on shifted stripe {shift}; failures: {failures or 'none'}")


# --- 8 -----------------------------------------------------------------------------------


def _brute_vote(labels):
    if not labels:
        return CODE_UNOBSERVED
    counts = {c: labels.count(c) for c in LabelClass}
    best = max(counts.values())
    if counts[LabelClass.MOVABLE] == best:
        return CODE_UNOBSERVED
    if counts[LabelClass.STATIC] == best:
        return CODE_NONROAD
    return CODE_ROAD


def test_criterion_8_majority_vote():
    spec = GridSpec(1, 1, 1.0, origin=(0.0, 1.0))
    cases, wrong = 0, 0
    for n in range(5):
        for combo in itertools.combinations_with_replacement(list(LabelClass), n):
            pts = [LabeledPoint(0.25 + 0.1 * i, 0.5, c) for i, c in enumerate(combo)]
            cases += 1
            wrong += int(project_points_to_grid(pts, spec).cells[0, 0] != _brute_vote(list(combo)))
    record(8, wrong == 0 and cases == 35, f"{cases} class-count combinations (<= 4 points), mismatches {wrong}")


# --- benchmark ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def bench_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    dataset = harness.generate_dataset(harness.benchmark_dataset_config(), root / "data")
    train = harness.benchmark_train_config()
    cache = harness.build_cache(dataset, root / "data", train)
    return root, dataset, cache, train


def test_criterion_7_determinism(bench_data):
    root, dataset, cache, train = bench_data
    outs = []
    for name in ("first", "second"):
        spec = ExperimentSpec(run_id="det", dataset=str(root / "data"), train=harness.benchmark_train_config(epochs=2),
                              net=harness.benchmark_net_config(), out_dir=str(root / name))
        harness.run_experiment(spec, dataset, cache)
        outs.append({f: (spec.run_dir / f).read_bytes()
                     for f in ("checkpoint.hnet", "report.json", "train_log.csv", "relaxation.csv")})
    same = [f for f in outs[0] if outs[0][f] == outs[1][f]]
    record(7, len(same) == 4, f"two 2-epoch benchmark runs, bit-identical: {', '.join(same)}")


BENCH_CONFIGS = ("all", "only_preselection", "wo_observation")


@pytest.fixture(scope="module")
def benchmark(bench_data):
    root, dataset, cache, train = bench_data
    base = ExperimentSpec(run_id="matrix", dataset=str(root / "data"), train=train,
                          net=harness.benchmark_net_config(), out_dir=str(root))
    start = time.perf_counter()
    table = harness.run_ablation_matrix(base, seeds=(0,), configs=BENCH_CONFIGS, dataset=dataset, cache=cache)
    per_run = (time.perf_counter() - start) / len(BENCH_CONFIGS)
    return base, table, per_run


@pytest.mark.slow
def test_criterion_5_learning_effect(benchmark, bench_data):
    _, dataset, _, _ = bench_data
    _, table, per_run = benchmark
    scale = (len(dataset.prior) >= 2048 and len(dataset.partial_train) == 512 and len(dataset.partial_test) == 128)
    a, pre, wo = (table.row(c) for c in BENCH_CONFIGS)
    d_iou = a["mean_iou_unobserved"] - pre["mean_iou_unobserved"]
    d_f = a["f_measure_r0"] - wo["f_measure_r0"]
    summary = "; ".join(f"{c}: F0 {table.row(c)['f_measure_r0']:.3f} mIoU full {table.row(c)['mean_iou_full']:.3f} "
                        f"unobs {table.row(c)['mean_iou_unobserved']:.3f}" for c in BENCH_CONFIGS)
    record(5, scale and (d_iou >= 0.05 or d_f >= 0.02),
           f"unobs mIoU all - only_preselection = {d_iou:+.3f} (>= 0.05) or F0 all - wo_observation = {d_f:+.3f} "
           f"(>= 0.02); {summary}; {per_run / 60:.1f} min per run (target < 30)")


@pytest.mark.slow
def test_criterion_6_holdout(benchmark, bench_data):
    _, dataset, _, _ = bench_data
    base, _, _ = benchmark
    run = base.run_dir / "all_seed0"
    manifest = json.loads((run / "manifest.json").read_text())
    report = harness.run_holdout_eval(run / "checkpoint.hnet", dataset, manifest, out_dir=run)
    m = report.means
    record(6, len(report) == 256 and m["mean_iou_unobserved"] >= 0.60,
           f"{len(report)} masked hold-out samples: unobserved mIoU {m['mean_iou_unobserved']:.3f} (>= 0.60), "
           f"full mIoU {m['mean_iou_full']:.3f}, F0 {m['f_measure_r0']:.3f}")
