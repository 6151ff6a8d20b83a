"""Command line entry point: ``hallucigrid <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Every setting lives in one JSON file; ``--seed`` and ``--out`` are the only
overrides. Recognised top-level keys (all optional)::

    {"dataset": {...DatasetConfig...}, "train": {...TrainConfig...}, "net": {...NetConfig...},
     "pairs": [true, true, true],
     "radii": [0, 1, 2, 3, 4, 5], "run_id": "run", "seeds": [0], "holdout_seed": 0}

Missing sections fall back to the desk-scale benchmark defaults. ``--seed``
replaces the split seed (gen-data), the pre-selection subset seed (build-cache),
the training seed (train, ablate) or the mask-draw seed (holdout).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-finite numerics.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .datagen import DataError, DatasetConfig, load_dataset
from .grid import GridFormatError
from .metrics import DEFAULT_RADII
from .neuralnet import NetConfig, NonFiniteGradientError, load_checkpoint
from .preselect import CacheMissError
from .supervision import NonFiniteLossError, TrainConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("hallucigrid")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise harness.ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise harness.ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise harness.ConfigError("config must be a JSON object")
    return data


def _build(kind, fn, *args):
    try:
        return fn(*args)
    except (TypeError, ValueError, KeyError) as exc:
        raise harness.ConfigError(f"invalid {kind} config: {exc}") from None


def _dataset_config(cfg: dict, seed) -> DatasetConfig:
    if "dataset" in cfg:
        dc = _build("dataset", DatasetConfig.from_json, cfg["dataset"])
    else:
        dc = harness.benchmark_dataset_config()
    if seed is not None:
        dc = replace(dc, split_seed=seed)
    try:
        dc.validate()
    except DataError as exc:
        raise harness.ConfigError(str(exc)) from None
    return dc


def _train_config(cfg: dict, **overrides) -> TrainConfig:
    train_cfg = {**cfg.get("train", {}), **overrides}
    if "loss_weights" in train_cfg:
        train_cfg["loss_weights"] = tuple(train_cfg["loss_weights"])
    return _build("train", lambda d: harness.benchmark_train_config(**d), train_cfg)


def _experiment(cfg: dict, data: str, out: str, seed) -> harness.ExperimentSpec:
    train = _train_config(cfg, **({} if seed is None else {"seed": seed}))
    net = _build("net", lambda d: NetConfig(**d), cfg["net"]) if "net" in cfg else harness.benchmark_net_config()
    return _build("experiment", lambda: harness.ExperimentSpec(
        run_id=cfg.get("run_id", "run"), dataset=data, train=train, net=net,
        pairs=tuple(cfg.get("pairs", (True, True, True))), radii=tuple(cfg.get("radii", DEFAULT_RADII)),
        out_dir=out))


def _radii(cfg: dict) -> tuple[int, ...]:
    return tuple(int(r) for r in cfg.get("radii", DEFAULT_RADII))


def _require(value, flag):
    if value is None:
        raise harness.ConfigError(f"{flag} is required")
    return value


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg):
    out = _require(args.out, "--out")
    dataset = harness.generate_dataset(_dataset_config(cfg, args.seed), out)
    (Path(out) / "dataset_config.json").write_text(json.dumps(dataset.manifest["config"], indent=2, sort_keys=True))
    print(f"wrote {len(dataset.prior)} prior, {len(dataset.partial_train)} train, {len(dataset.partial_test)} test, "
          f"{len(dataset.holdout)} hold-out samples to {out}")


def cmd_build_cache(args, cfg):
    data = _require(args.data, "--data")
    train = _train_config(cfg, **({} if args.seed is None else {"subset_seed": args.seed}))
    cache = harness.build_cache(load_dataset(data), data, train)
    print(f"cached {len(cache)} consensus targets in {Path(data) / harness.CACHE_FILE}")


def cmd_train(args, cfg):
    spec = _experiment(cfg, _require(args.data, "--data"), args.out or "runs", args.seed)
    means = harness.run_experiment(spec)
    print(json.dumps({"run_dir": str(spec.run_dir), **means}, indent=2))


def cmd_eval(args, cfg):
    params, net, _, _ = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    report = harness.evaluate_checkpoint(params, net, load_dataset(_require(args.data, "--data")), _radii(cfg))
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json", out / "relaxation.csv")
    print(json.dumps(report.means, indent=2))


def cmd_ablate(args, cfg):
    spec = _experiment(cfg, _require(args.data, "--data"), args.out or "runs", None)
    seeds = [args.seed] if args.seed is not None else [int(s) for s in cfg.get("seeds", [0])]
    table = harness.run_ablation_matrix(spec, seeds)
    for row in table.means():
        print(f"{row['config']:<18} F(r=0)={row['f_measure_r0']:.4f} mIoU full={row['mean_iou_full']:.4f} "
              f"unobserved={row['mean_iou_unobserved']:.4f}")


def cmd_holdout(args, cfg):
    checkpoint = _require(args.checkpoint, "--checkpoint")
    dataset = load_dataset(_require(args.data, "--data"))
    manifest_path = Path(checkpoint).parent / "manifest.json"
    training_manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else None
    seed = args.seed if args.seed is not None else int(cfg.get("holdout_seed", 0))
    report = harness.run_holdout_eval(checkpoint, dataset, training_manifest, seed, _radii(cfg),
                                      out_dir=args.out or Path(checkpoint).parent)
    print(json.dumps(report.means, indent=2))


def cmd_report(args, cfg):
    if not args.runs:
        raise harness.ConfigError("report needs at least one run directory")
    csv_path, svg_path = harness.emit_report(args.runs, args.out or ".")
    print(f"wrote {csv_path} and {svg_path}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic benchmark"),
    "build-cache": (cmd_build_cache, "pre-compute consensus targets for the training split"),
    "train": (cmd_train, "train one configuration and score it on the test split"),
    "eval": (cmd_eval, "score a checkpoint on the test split"),
    "ablate": (cmd_ablate, "train and tabulate the six supervision configurations"),
    "holdout": (cmd_holdout, "score a checkpoint on masked hold-out prior samples"),
    "report": (cmd_report, "emit relaxation curves of several runs as CSV and SVG"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hallucigrid", description="Road layout completion from partial grids.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--out", help="output directory")
        if name not in ("gen-data", "report"):
            p.add_argument("--data", help="dataset directory")
        if name in ("eval", "holdout"):
            p.add_argument("--checkpoint", help="checkpoint.hnet of a trained run")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories containing report.json")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handler = COMMANDS[args.command][0]
    try:
        handler(args, _load_config(args.config))
    except harness.ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (NonFiniteLossError, NonFiniteGradientError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, GridFormatError, CacheMissError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
