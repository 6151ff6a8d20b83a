import csv
import json
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest
from conftest import TINY_NET, tiny_train_config

from hallucigrid import harness
from hallucigrid.datagen import DataError, load_dataset
from hallucigrid.harness import ABLATIONS, ConfigError, ExperimentSpec
from hallucigrid.metrics import evaluate
from hallucigrid.neuralnet import load_checkpoint
from hallucigrid.preselect import PreselectionCache


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory, tiny_config):
    root = tmp_path_factory.mktemp("data")
    dataset = harness.generate_dataset(tiny_config, root)
    harness.build_cache(dataset, root, tiny_train_config())
    return root


def spec(data_dir, out, run_id="run", **kw):
    return ExperimentSpec(run_id=run_id, dataset=str(data_dir), train=tiny_train_config(), net=TINY_NET,
                          out_dir=str(out), **kw)


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    s = spec(data_dir, tmp_path_factory.mktemp("runs"))
    means = harness.run_experiment(s)
    return s, means


# --- experiment spec --------------------------------------------------------------------


def test_spec_needs_a_pair(data_dir, tmp_path):
    with pytest.raises(ConfigError):
        spec(data_dir, tmp_path, pairs=(False, False, False))


def test_spec_zeroes_disabled_weights(data_dir, tmp_path):
    s = spec(data_dir, tmp_path, pairs=(False, True, False))
    assert s.effective_train_config().loss_weights == (0.0, 0.25, 0.0)
    assert s.train.loss_weights == (0.5, 0.25, 0.25)


def test_spec_json_round_trip(data_dir, tmp_path):
    s = spec(data_dir, tmp_path, pairs=(True, False, True), radii=(0, 2))
    assert ExperimentSpec.from_json(json.loads(json.dumps(s.to_json()))) == s
    with pytest.raises(ConfigError):
        ExperimentSpec.from_json({"run_id": "x"})
    with pytest.raises(ConfigError):
        ExperimentSpec.from_json({"run_id": "x", "dataset": "d", "train": {"epochs": "many", "bogus": 1}})


def test_benchmark_defaults():
    cfg = harness.benchmark_dataset_config()
    cfg.validate()
    assert cfg.window == 64 and len(cfg.prior_worlds) == 8 and len(cfg.observation_worlds) == 4
    assert (cfg.n_train, cfg.n_test, cfg.n_holdout) == (512, 128, 256)
    widths = {w.road_width for w in cfg.prior_worlds}, {w.road_width for w in cfg.observation_worlds}
    assert widths[0] != widths[1]
    assert harness.benchmark_net_config().depth == 4
    t = harness.benchmark_train_config(seed=3)
    assert (t.epochs, t.loss_weights, t.flip_p, t.subset_size, t.seed) == (60, (0.5, 0.25, 0.25), 0.15, 4096, 3)


# --- single runs --------------------------------------------------------------------------


def test_run_directory_is_complete(trained, data_dir):
    s, means = trained
    names = {p.name for p in s.run_dir.iterdir()}
    assert {"config.json", "manifest.json", "train_log.csv", "checkpoint.hnet", "report.json",
            "relaxation.csv"} <= names
    replay = ExperimentSpec.from_json(json.loads((s.run_dir / "config.json").read_text()))
    assert replay == s
    assert json.loads((s.run_dir / "manifest.json").read_text()) == load_dataset(data_dir).manifest
    report = json.loads((s.run_dir / "report.json").read_text())
    assert report["means"] == means and len(report["per_sample"]) == 8


def test_checkpoint_evaluation_reproduces_report(trained, data_dir):
    s, means = trained
    params, net, _, _ = load_checkpoint(s.run_dir / "checkpoint.hnet")
    assert harness.evaluate_checkpoint(params, net, load_dataset(data_dir), s.radii).means == means


def test_duplicate_run_id(trained, data_dir):
    s, _ = trained
    with pytest.raises(ConfigError, match="already exists"):
        harness.run_experiment(s)


def test_missing_cache(tiny_config, tmp_path):
    harness.generate_dataset(tiny_config, tmp_path / "d")
    with pytest.raises(DataError, match="cache"):
        harness.run_experiment(spec(tmp_path / "d", tmp_path / "runs"))
    assert not (tmp_path / "runs" / "run").exists()


def test_cache_must_cover_and_match(data_dir, tmp_path):
    dataset = load_dataset(data_dir)
    full = PreselectionCache.read(data_dir / harness.CACHE_FILE)
    partial = PreselectionCache(dict(list(full.items())[:3]), full.dims, full.meta)
    with pytest.raises(DataError, match="lacks"):
        harness.run_experiment(spec(data_dir, tmp_path), dataset, partial)
    with pytest.raises(DataError, match="cache"):
        harness.run_experiment(replace(spec(data_dir, tmp_path), train=tiny_train_config(k=2)), dataset, full)
    assert not (tmp_path / "run").exists()


# --- ablation matrix -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ablation(data_dir, tmp_path_factory):
    base = spec(data_dir, tmp_path_factory.mktemp("abl"), run_id="matrix")
    return base, harness.run_ablation_matrix(base, seeds=(0, 1))


def test_ablation_has_six_rows_per_seed(ablation):
    base, table = ablation
    assert len(table.rows) == 6 * 2
    assert [(r["config"], r["seed"]) for r in table.rows] == [(c, s) for c in ABLATIONS for s in (0, 1)]
    assert [m["config"] for m in table.means()] == list(ABLATIONS)
    with open(base.run_dir / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12 + 6 and tuple(rows[0]) == harness.ABLATION_COLUMNS
    a = [r for r in table.rows if r["config"] == "all"]
    assert table.row("all")["mean_iou_full"] == pytest.approx((a[0]["mean_iou_full"] + a[1]["mean_iou_full"]) / 2)


def test_ablation_rows_differ_only_in_pairs_and_seed(ablation):
    base, _ = ablation
    reference = None
    for name, flags in ABLATIONS.items():
        for seed in (0, 1):
            run = base.run_dir / f"{name}_seed{seed}"
            cfg = json.loads((run / "config.json").read_text())
            assert cfg["pairs"] == list(flags) and cfg["train"]["seed"] == seed
            with open(run / "train_log.csv") as fh:
                last = list(csv.DictReader(fh))[-1]
            for column, on in zip(("loss_observation", "loss_preselection", "loss_prior"), flags):
                assert (last[column] != "") == on
            header = load_checkpoint(run / "checkpoint.hnet")[3]
            weights = header["extra"]["train_config"]["loss_weights"]
            assert [w > 0 for w in weights] == list(flags)
            rest = {k: v for k, v in cfg.items() if k not in ("pairs", "run_id")}
            rest["train"] = {k: v for k, v in rest["train"].items() if k != "seed"}
            reference = reference or rest
            assert rest == reference


def test_ablation_rejects_unknown_and_duplicate(ablation):
    base, _ = ablation
    with pytest.raises(ConfigError):
        harness.run_ablation_matrix(replace(base, run_id="other"), configs=["only_observation"])
    with pytest.raises(ConfigError, match="already exists"):
        harness.run_ablation_matrix(base)


# --- hold-out ----------------------------------------------------------------------------------


def test_holdout_inputs_use_test_masks(data_dir):
    dataset = load_dataset(data_dir)
    codes, masks = harness.holdout_inputs(dataset, seed=4)
    pool = {m.tobytes() for m in dataset.test_masks}
    assert all(m.tobytes() in pool for m in masks)
    assert np.array_equal(codes == 2, ~masks)
    assert np.array_equal((codes == 1)[masks], dataset.holdout[masks])
    assert np.array_equal(harness.holdout_inputs(dataset, seed=4)[0], codes)


def test_holdout_perfect_predictor(data_dir, tmp_path):
    dataset = load_dataset(data_dir)
    report = harness.run_holdout_eval(lambda codes: dataset.holdout, dataset, out_dir=tmp_path)
    assert len(report) == len(dataset.holdout) == 10
    m = report.means
    assert m["f_measure_r0"] == 1.0 and m["mean_iou_full"] == 1.0 and m["mean_iou_unobserved"] == 1.0
    assert (tmp_path / "holdout_report.json").exists() and (tmp_path / "holdout_relaxation.csv").exists()


def test_holdout_rejects_overlap(data_dir, trained):
    dataset = load_dataset(data_dir)
    manifest = json.loads(json.dumps(dataset.manifest))
    manifest["seeds"]["prior_worlds"].append(dataset.manifest["seeds"]["holdout_worlds"][0])
    with pytest.raises(DataError, match="overlap"):
        harness.run_holdout_eval(trained[0].run_dir / "checkpoint.hnet", dataset, manifest)


def test_holdout_from_checkpoint(data_dir, trained):
    dataset = load_dataset(data_dir)
    path = trained[0].run_dir / "checkpoint.hnet"
    a = harness.run_holdout_eval(path, dataset, seed=1)
    b = harness.run_holdout_eval(load_checkpoint(path)[:2], dataset, seed=1)
    assert a.to_json() == b.to_json() and len(a) == 10


# --- reports --------------------------------------------------------------------------------


def test_report_rows_and_bytes(ablation, tmp_path):
    base, _ = ablation
    runs = [base.run_dir / "all_seed0", base.run_dir / "only_prior_seed0"]
    csv_path, svg_path = harness.emit_report(runs, tmp_path / "a")
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * len(base.radii)
    assert [r["config"] for r in rows[:6]] == ["all_seed0"] * 6
    harness.emit_report(runs, tmp_path / "b")
    assert (tmp_path / "b" / csv_path.name).read_bytes() == csv_path.read_bytes()
    assert (tmp_path / "b" / svg_path.name).read_bytes() == svg_path.read_bytes()
    root = ET.fromstring(svg_path.read_text())
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2


def test_report_values_equal_recomputed_metrics(ablation, data_dir, tmp_path):
    base, _ = ablation
    run = base.run_dir / "all_seed1"
    csv_path, _ = harness.emit_report([run], tmp_path, labels=["mine"])
    params, net, _, _ = load_checkpoint(run / "checkpoint.hnet")
    dataset = load_dataset(data_dir)
    fresh = evaluate(harness.predict_binary(params, net, dataset.partial_test), dataset.gt_test,
                     dataset.test_masks, base.radii).relaxation_curve()
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    for row, (r, p, rc, f) in zip(rows, fresh):
        assert row["config"] == "mine"
        assert (int(row["r"]), float(row["precision"]), float(row["recall"]), float(row["f_measure"])) == (r, p, rc, f)


def test_report_missing_input(tmp_path):
    with pytest.raises(DataError):
        harness.emit_report([tmp_path / "nothing"], tmp_path / "out")


def test_svg_escapes_labels():
    svg = harness.relaxation_svg([("a<b&c", [(0, 0.1, 0.2, 0.3), (1, 0.4, 0.5, 0.6)])])
    assert "a&lt;b&amp;c" in svg
    ET.fromstring(svg)
