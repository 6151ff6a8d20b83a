"""Experiment orchestration: data, cache, training runs, ablations, hold-out tests, reports.

A run directory holds everything needed to replay it::

    <out>/<run_id>/config.json      experiment spec (train + net config, pair flags)
    <out>/<run_id>/manifest.json    copy of the dataset manifest
    <out>/<run_id>/train_log.csv
    <out>/<run_id>/checkpoint.hnet
    <out>/<run_id>/report.json      per-sample and mean scores on the test split
    <out>/<run_id>/relaxation.csv
"""
from __future__ import annotations

import csv
import json
import logging
from functools import partial
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Dataset, DatasetConfig, DataError, MaskSpec, WorldSpec, load_dataset, make_dataset, \
    write_dataset
from .grid import compose_codes, decode_codes
from .metrics import DEFAULT_RADII, EvaluationReport, evaluate
from .neuralnet import NetConfig, Params, load_checkpoint, predict
from .preselect import PackedCorpus, PreselectionCache, build_preselection_cache
from .supervision import TrainConfig, TrainingData, train

log = logging.getLogger(__name__)

CACHE_FILE = "preselect.cache"

# pair flags: (observation, pre-selection, masked prior)
ABLATIONS = {
    "all": (True, True, True),
    "wo_observation": (False, True, True),
    "wo_preselection": (True, False, True),
    "wo_prior": (True, True, False),
    "only_preselection": (False, True, False),
    "only_prior": (False, False, True),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    run_id: str
    dataset: str
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=NetConfig)
    pairs: tuple[bool, bool, bool] = (True, True, True)
    radii: tuple[int, ...] = DEFAULT_RADII
    out_dir: str = "runs"

    def __post_init__(self):
        self.pairs = tuple(bool(p) for p in self.pairs)
        if len(self.pairs) != 3 or not any(self.pairs):
            raise ConfigError("at least one supervision pair must be enabled")
        self.radii = tuple(int(r) for r in self.radii)

    def effective_train_config(self) -> TrainConfig:
        weights = tuple(w if on else 0.0 for w, on in zip(self.train.loss_weights, self.pairs))
        return replace(self.train, loss_weights=weights)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_id

    def to_json(self) -> dict:
        return {"run_id": self.run_id, "dataset": str(self.dataset), "train": asdict(self.train),
                "net": asdict(self.net), "pairs": list(self.pairs), "radii": list(self.radii),
                "out_dir": str(self.out_dir)}

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentSpec":
        try:
            train_cfg = dict(data.get("train", {}))
            if "loss_weights" in train_cfg:
                train_cfg["loss_weights"] = tuple(train_cfg["loss_weights"])
            return cls(run_id=data["run_id"], dataset=data["dataset"], train=TrainConfig(**train_cfg),
                       net=NetConfig(**data.get("net", {})), pairs=tuple(data.get("pairs", (True, True, True))),
                       radii=tuple(data.get("radii", DEFAULT_RADII)), out_dir=data.get("out_dir", "runs"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment spec: {exc}") from exc


# --------------------------------------------------------------------------
# benchmark defaults


def benchmark_dataset_config(window: int = 64) -> DatasetConfig:
    """Desk-scale synthetic benchmark.

    8 prior worlds (narrower roads) give 5000 crops at stride 8; 4 observation
    worlds (wider roads) give the partial samples, three for training and one
    for testing; 2 hold-out worlds share the prior distribution.
    """
    prior = [WorldSpec(seed=100 + i, size=256, road_count=(3, 6), road_width=(2, 6)) for i in range(8)]
    observation = [WorldSpec(seed=200 + i, size=288, road_count=(5, 8), road_width=(4, 8)) for i in range(4)]
    holdout = [WorldSpec(seed=300 + i, size=256, road_count=(3, 6), road_width=(2, 6)) for i in range(2)]
    mask = MaskSpec(seed=0, half_angle=np.radians(35.0), occluder_count=(1, 4), occluder_size=(4, 12),
                    occluder_min_distance=16.0, dropout=0.05)
    return DatasetConfig(prior_worlds=prior, observation_worlds=observation, holdout_worlds=holdout, mask=mask,
                         window=window, prior_stride=8, observation_stride=16, n_train_worlds=3,
                         n_train=512, n_test=128, n_holdout=256)


def benchmark_train_config(**overrides) -> TrainConfig:
    """Default schedule with a fixed 4096-sample pre-selection subset."""
    return TrainConfig(**{"subset_size": 4096, **overrides})


def benchmark_net_config() -> NetConfig:
    return NetConfig(depth=4, base_channels=8, skip_levels=3, norm=True)


# --------------------------------------------------------------------------
# steps


def generate_dataset(config: DatasetConfig, out) -> Dataset:
    dataset = make_dataset(config)
    write_dataset(dataset, out)
    return dataset


def build_cache(dataset: Dataset, root, config: TrainConfig) -> PreselectionCache:
    """Consensus targets for every training sample, with the pre-selection settings of ``config``."""
    corpus = PackedCorpus(dataset.prior)
    subset = None if config.subset_size is None else min(config.subset_size, len(corpus))
    return build_preselection_cache(dataset.partial_train, dataset.manifest["splits"]["partial_train"], corpus,
                                    k=config.k, subset_size=subset, seed=config.subset_seed,
                                    path=Path(root) / CACHE_FILE)


def load_cache(root) -> PreselectionCache:
    path = Path(root) / CACHE_FILE
    if not path.exists():
        raise DataError(f"missing pre-selection cache {path}; run build-cache first")
    return PreselectionCache.read(path)


def predict_binary(params: Params, net: NetConfig, codes: np.ndarray) -> np.ndarray:
    return predict(params, net, decode_codes(codes)) >= 0.5


def evaluate_checkpoint(params: Params, net: NetConfig, dataset: Dataset,
                        radii: Sequence[int] = DEFAULT_RADII) -> EvaluationReport:
    preds = predict_binary(params, net, dataset.partial_test)
    return evaluate(preds, dataset.gt_test, dataset.test_masks, radii)


def run_experiment(spec: ExperimentSpec, dataset: Dataset | None = None,
                   cache: PreselectionCache | None = None) -> dict:
    """Train one configuration and score it on the test split; returns the mean scores."""
    run_dir = spec.run_dir
    if run_dir.exists():
        raise ConfigError(f"run id {spec.run_id!r} already exists in {spec.out_dir}")
    dataset = dataset if dataset is not None else load_dataset(spec.dataset)
    cache = cache if cache is not None else load_cache(spec.dataset)
    missing = set(dataset.manifest["splits"]["partial_train"]) - set(cache)
    if missing:
        raise DataError(f"pre-selection cache lacks {len(missing)} training samples")
    try:
        spec.train.check_cache(cache)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    run_dir.mkdir(parents=True)
    (run_dir / "config.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True))
    (run_dir / "manifest.json").write_text(json.dumps(dataset.manifest, indent=2, sort_keys=True))
    result = train(spec.effective_train_config(), spec.net, TrainingData.from_dataset(dataset), cache,
                   validation=(dataset.partial_test, dataset.gt_test), out_dir=run_dir)
    report = evaluate_checkpoint(result.params, spec.net, dataset, spec.radii)
    report.write(run_dir / "report.json", run_dir / "relaxation.csv")
    return report.means


ABLATION_COLUMNS = ("config", "seed", "f_measure_r0", "mean_iou_full", "mean_iou_unobserved")
_SCORE_KEYS = ABLATION_COLUMNS[2:]


@dataclass
class AblationTable:
    """One row per (configuration, seed); :meth:`means` averages over seeds."""

    rows: list[dict]

    def means(self) -> list[dict]:
        names = list(dict.fromkeys(r["config"] for r in self.rows))
        out = []
        for name in names:
            mine = [r for r in self.rows if r["config"] == name]
            out.append({"config": name, "seed": "mean",
                        **{k: float(np.mean([r[k] for r in mine])) for k in _SCORE_KEYS}})
        return out

    def row(self, config: str) -> dict:
        return next(r for r in self.means() if r["config"] == config)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ABLATION_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows + self.means())


def run_ablation_matrix(base: ExperimentSpec, seeds: Sequence[int] = (0,), configs: Sequence[str] | None = None,
                        dataset: Dataset | None = None, cache: PreselectionCache | None = None) -> AblationTable:
    """Train every pair configuration with every seed under ``<out>/<run_id>/``.

    Rows differ only in pair flags (hence zeroed weights) and seed. The table is
    also written to ``ablation.csv`` with the seed-averaged rows appended.
    """
    configs = list(configs or ABLATIONS)
    unknown = set(configs) - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablation configurations {sorted(unknown)}")
    dataset = dataset if dataset is not None else load_dataset(base.dataset)
    cache = cache if cache is not None else load_cache(base.dataset)
    root = Path(base.out_dir) / base.run_id
    if root.exists():
        raise ConfigError(f"run id {base.run_id!r} already exists in {base.out_dir}")
    rows = []
    for name in configs:
        for seed in seeds:
            spec = replace(base, run_id=f"{name}_seed{seed}", out_dir=str(root), pairs=ABLATIONS[name],
                           train=replace(base.train, seed=seed))
            means = run_experiment(spec, dataset, cache)
            rows.append({"config": name, "seed": seed, **{k: means[k] for k in _SCORE_KEYS}})
    table = AblationTable(rows)
    table.write(root / "ablation.csv")
    return table


def holdout_inputs(dataset: Dataset, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Hold-out prior samples composed with masks drawn from the partial test set."""
    if len(dataset.holdout) == 0:
        raise DataError("dataset has no hold-out samples")
    rng = np.random.default_rng(seed)
    masks = dataset.test_masks[rng.integers(len(dataset.test_masks), size=len(dataset.holdout))]
    return compose_codes(dataset.holdout, masks), masks


def _predictor(checkpoint):
    if callable(checkpoint):
        return checkpoint
    if isinstance(checkpoint, (str, Path)):
        params, net, _, _ = load_checkpoint(checkpoint)
    else:
        params, net = checkpoint
    return partial(predict_binary, params, net)


def run_holdout_eval(checkpoint, dataset: Dataset, training_manifest: dict | None = None, seed: int = 0,
                     radii: Sequence[int] = DEFAULT_RADII, out_dir=None) -> EvaluationReport:
    """Score a trained model on unseen prior layouts hidden behind real test masks.

    ``checkpoint`` is a checkpoint path, a ``(params, net_config)`` pair or any
    callable mapping ternary codes ``(N, H, W)`` to binary predictions.
    """
    predictor = _predictor(checkpoint)
    manifest = training_manifest or dataset.manifest
    overlap = set(manifest["seeds"]["prior_worlds"]) & set(dataset.manifest["seeds"]["holdout_worlds"])
    if overlap:
        raise DataError(f"hold-out worlds overlap the training prior corpus: {sorted(overlap)}")
    codes, masks = holdout_inputs(dataset, seed)
    report = evaluate(predictor(codes), dataset.holdout, masks, radii)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write(out_dir / "holdout_report.json", out_dir / "holdout_relaxation.csv")
    return report


# --------------------------------------------------------------------------
# reports

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def emit_report(run_dirs: Sequence, out_dir, labels: Sequence[str] | None = None) -> tuple[Path, Path]:
    """Relaxation curves of several runs as one CSV and one SVG line chart."""
    out_dir = Path(out_dir)
    curves = []
    for i, run in enumerate(run_dirs):
        path = Path(run) / "report.json"
        if not path.exists():
            raise DataError(f"missing evaluation report {path}")
        report = EvaluationReport.from_json(json.loads(path.read_text()))
        label = labels[i] if labels else Path(run).name
        curves.append((label, report.relaxation_curve()))
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = out_dir / "relaxation_curves.csv", out_dir / "relaxation_curves.svg"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "r", "precision", "recall", "f_measure"])
        for label, rows in curves:
            for r, p, rc, f in rows:
                w.writerow([label, r, repr(p), repr(rc), repr(f)])
    svg_path.write_text(relaxation_svg(curves))
    return csv_path, svg_path


def relaxation_svg(curves, width: int = 480, height: int = 320) -> str:
    """F-measure against relaxation radius, one polyline per configuration."""
    left, right, top, bottom = 50, 150, 20, 40
    pw, ph = width - left - right, height - top - bottom
    radii = sorted({r for _, rows in curves for r, *_ in rows}) or [0]
    rmax = max(radii[-1], 1)

    def sx(r):
        return left + pw * r / rmax

    def sy(f):
        return top + ph * (1.0 - f)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for r in radii:
        parts.append(f'<line x1="{sx(r):.2f}" y1="{top + ph}" x2="{sx(r):.2f}" y2="{top + ph + 4}" stroke="black"/>')
        parts.append(f'<text x="{sx(r):.2f}" y="{top + ph + 16}" text-anchor="middle">{r}</text>')
    for i in range(6):
        f = i / 5
        parts.append(f'<line x1="{left - 4}" y1="{sy(f):.2f}" x2="{left}" y2="{sy(f):.2f}" stroke="black"/>')
        parts.append(f'<text x="{left - 7}" y="{sy(f) + 4:.2f}" text-anchor="end">{f:.1f}</text>')
    parts.append(f'<text x="{left + pw / 2:.2f}" y="{height - 6}" text-anchor="middle">relaxation radius r</text>')
    parts.append(f'<text x="14" y="{top + ph / 2:.2f}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {top + ph / 2:.2f})">F-measure</text>')
    for i, (label, rows) in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(r):.2f},{sy(f):.2f}" for r, _, _, f in rows)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 * (i + 1)
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 28}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{left + pw + 32}" y="{ly}">{_escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
