"""Single-step training with three masked supervisions.

Every iteration builds three input/target pairs from one batch of partial
observations:

1. observation pair: the partial map against its own observed cells;
2. pre-selection pair: the same input against the consensus of the nearest
   prior samples, valid where they all agree;
3. masked prior pair: a random prior sample hidden behind a random real
   observation mask, against the complete prior sample.

The losses are masked binary cross-entropies combined with weights
``(l1, l2, l3)``. Pairs 1 and 2 share their input, so one forward pass serves
both and their gradients are summed at the prediction.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import CODE_NONROAD, CODE_ROAD, CODE_UNOBSERVED, compose_codes, decode_codes
from .metrics import evaluate
from .neuralnet import AdamState, NetConfig, Params, adam_step, backward, forward, init_params, predict, \
    save_checkpoint
from .preselect import PreselectionCache

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "loss_observation", "loss_preselection", "loss_prior", "loss_total",
               "val_mean_iou_full", "val_mean_iou_unobserved", "val_f_measure_r0"]


class DegenerateBatchError(ValueError):
    """A loss term has no valid cells."""


class NonFiniteLossError(FloatingPointError):
    pass


def masked_bce(pred, target, valid) -> float:
    """Mean binary cross-entropy over the valid cells only."""
    pred, target, valid = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64), \
        np.asarray(valid, dtype=bool)
    if not pred.shape == target.shape == valid.shape:
        raise ValueError(f"shape mismatch: {pred.shape}, {target.shape}, {valid.shape}")
    n = np.count_nonzero(valid)
    if n == 0:
        raise DegenerateBatchError("no valid cells")
    p, t = pred[valid], target[valid]
    return float(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() / n)


def masked_bce_grad(pred, target, valid) -> np.ndarray:
    """dLoss/dPrediction of :func:`masked_bce`; exactly zero outside ``valid``."""
    pred, target, valid = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64), \
        np.asarray(valid, dtype=bool)
    n = np.count_nonzero(valid)
    if n == 0:
        raise DegenerateBatchError("no valid cells")
    grad = np.zeros_like(pred)
    p, t = pred[valid], target[valid]
    grad[valid] = (p - t) / (p * (1.0 - p)) / n
    return grad


def total_loss(l1: float, l2: float, l3: float, w1: float = 0.5, w2: float = 0.25, w3: float = 0.25) -> float:
    return w1 * l1 + w2 * l2 + w3 * l3


def augment_observed(codes, p: float, rng) -> np.ndarray:
    """Flip road/non-road on each observed cell with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("flip probability must lie in [0, 1]")
    codes = np.asarray(codes, dtype=np.uint8)
    rng = np.random.default_rng(rng)
    flip = (rng.random(codes.shape) < p) & (codes != CODE_UNOBSERVED)
    out = codes.copy()
    out[flip] = np.where(codes[flip] == CODE_ROAD, CODE_NONROAD, CODE_ROAD)
    return out


@dataclass
class Pair:
    input: np.ndarray   # (B, 1, H, W) status values
    target: np.ndarray  # (B, 1, H, W) in [0, 1]
    valid: np.ndarray   # (B, 1, H, W) bool


@dataclass
class SupervisionTriplet:
    observation: Pair
    preselection: Pair
    prior: Pair


@dataclass
class TrainingData:
    """Everything training may read. Ground truth is deliberately absent."""

    partials: np.ndarray      # (N, H, W) ternary codes
    sample_ids: list[str]
    prior: np.ndarray         # (M, H, W) bool
    mask_pool: np.ndarray     # (K, H, W) bool, real observation masks

    @classmethod
    def from_dataset(cls, dataset) -> "TrainingData":
        return cls(dataset.partial_train, list(dataset.manifest["splits"]["partial_train"]),
                   dataset.prior, dataset.train_masks)


def build_triplet(codes: np.ndarray, sample_ids: Sequence[str], cache: PreselectionCache, prior: np.ndarray,
                  mask_pool: np.ndarray, prior_rng: np.random.Generator, aug_rng: np.random.Generator,
                  flip_p: float = 0.15) -> SupervisionTriplet:
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.shape[1:] != prior.shape[1:] or codes.shape[1:] != mask_pool.shape[1:]:
        raise ValueError("partial, prior and mask dimensions differ")
    batch = len(codes)
    target2, valid2 = cache.batch(sample_ids)
    pick = prior_rng.integers(len(prior), size=batch)
    masks = mask_pool[prior_rng.integers(len(mask_pool), size=batch)]
    prior_samples = prior[pick]
    masked_prior = compose_codes(prior_samples, masks)

    partial_in = decode_codes(augment_observed(codes, flip_p, aug_rng))[:, None]
    prior_in = decode_codes(augment_observed(masked_prior, flip_p, aug_rng))[:, None]
    observation = Pair(partial_in, (codes == CODE_ROAD)[:, None].astype(np.float64),
                       (codes != CODE_UNOBSERVED)[:, None])
    preselection = Pair(partial_in, target2[:, None], valid2[:, None])
    prior_pair = Pair(prior_in, prior_samples[:, None].astype(np.float64), np.ones_like(prior_samples)[:, None])
    return SupervisionTriplet(observation, preselection, prior_pair)


@dataclass
class TrainConfig:
    """Training schedule.

    ``seed`` derives the init, data-order, prior-draw and augmentation streams.
    ``k``, ``subset_size`` and ``subset_seed`` describe the pre-selection cache
    the run expects; they are shared by every training seed.
    """

    loss_weights: tuple[float, float, float] = (0.5, 0.25, 0.25)
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    flip_p: float = 0.15
    k: int = 8
    subset_size: int | None = None
    subset_seed: int = 0
    seed: int = 0
    val_every: int = 5
    dtype: str = "float32"

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0:
            raise ValueError("loss_weights must be three non-negative numbers")
        if not any(self.loss_weights):
            raise ValueError("at least one loss weight must be positive")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ValueError("flip_p must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.k < 1 or (self.subset_size is not None and self.subset_size < self.k):
            raise ValueError("need 1 <= k <= subset_size")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")

    def check_cache(self, cache: PreselectionCache) -> None:
        """Refuse a cache built with different pre-selection settings."""
        meta = cache.meta
        if not meta:
            return
        expected = {"k": self.k, "seed": self.subset_seed}
        if self.subset_size is not None:
            expected["subset_size"] = min(self.subset_size, meta.get("corpus_size", self.subset_size))
        else:
            expected["subset_size"] = meta.get("corpus_size")
        found = {key: meta.get(key) for key in expected}
        if found != expected:
            raise ValueError(f"pre-selection cache settings {found} differ from the training config {expected}")

    def streams(self) -> dict[str, int]:
        children = np.random.SeedSequence(self.seed).spawn(4)
        return {name: int(c.generate_state(1)[0])
                for name, c in zip(("init", "order", "prior", "augment"), children)}


@dataclass
class TrainResult:
    params: Params
    state: AdamState
    net_config: NetConfig
    log: list[dict] = field(default_factory=list)


def validation_scores(params: Params, net_config: NetConfig, partials: np.ndarray, gts: np.ndarray) -> dict:
    probs = predict(params, net_config, decode_codes(partials))
    report = evaluate(probs >= 0.5, gts, partials != CODE_UNOBSERVED, radii=(0,))
    m = report.means
    return {"val_mean_iou_full": m["mean_iou_full"], "val_mean_iou_unobserved": m["mean_iou_unobserved"],
            "val_f_measure_r0": m["f_measure_r0"]}


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in LOG_COLUMNS])


def train(config: TrainConfig, net_config: NetConfig, data: TrainingData, cache: PreselectionCache,
          validation: tuple[np.ndarray, np.ndarray] | None = None, out_dir=None) -> TrainResult:
    """Run the single-step training loop.

    ``validation`` is an optional ``(partial codes, ground truth)`` pair scored
    before training (epoch 0) and every ``val_every`` epochs. With ``out_dir``
    the log and final checkpoint are written there.
    """
    config.check_cache(cache)
    streams = config.streams()
    dtype = np.dtype(config.dtype)
    params = init_params(net_config, streams["init"], dtype=dtype)
    state = AdamState.create(params, lr=config.lr)
    order_rng = np.random.default_rng(streams["order"])
    prior_rng = np.random.default_rng(streams["prior"])
    aug_rng = np.random.default_rng(streams["augment"])
    w1, w2, w3 = config.loss_weights
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []

    def record(row):
        rows.append(row)
        if out_dir is not None:
            write_log(out_dir / "train_log.csv", rows)

    if validation is not None:
        record({"epoch": 0, **validation_scores(params, net_config, *validation)})

    n = len(data.partials)
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(n)
        sums = {"observation": [], "preselection": [], "prior": [], "total": []}
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            triplet = build_triplet(data.partials[idx], [data.sample_ids[i] for i in idx], cache, data.prior,
                                    data.mask_pool, prior_rng, aug_rng, config.flip_p)
            losses, grads = _step_losses(params, net_config, triplet, (w1, w2, w3))
            total = total_loss(losses.get("observation", 0.0), losses.get("preselection", 0.0),
                               losses.get("prior", 0.0), w1, w2, w3)
            if not math.isfinite(total):
                if out_dir is not None:
                    save_checkpoint(out_dir / "diagnostic.hnet", params, net_config, state, config.seed,
                                    {"epoch": epoch, "losses": {k: float(v) for k, v in losses.items()}})
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}: {losses}")
            if grads is not None:
                adam_step(params, grads, state)
            for key, value in losses.items():
                sums[key].append(value)
            sums["total"].append(total)
        row = {"epoch": epoch, "loss_total": float(np.mean(sums["total"])) if sums["total"] else None}
        for key, weight in (("observation", w1), ("preselection", w2), ("prior", w3)):
            row[f"loss_{key}"] = float(np.mean(sums[key])) if weight > 0 and sums[key] else None
        if validation is not None and (epoch % config.val_every == 0 or epoch == config.epochs):
            row.update(validation_scores(params, net_config, *validation))
        log.info("epoch %d: %s", epoch, row)
        record(row)

    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.hnet", params, net_config, state, config.seed,
                        {"train_config": asdict(config)})
    return TrainResult(params, state, net_config, rows)


def _step_losses(params, net_config, triplet: SupervisionTriplet, weights):
    """Forward/backward for the enabled pairs; returns (losses, summed gradients)."""
    w1, w2, w3 = weights
    losses, grads = {}, None

    def add(g):
        nonlocal grads
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]

    if w1 > 0 or w2 > 0:
        pred, tape = forward(params, net_config, triplet.observation.input, train=True)
        upstream = np.zeros_like(pred)
        for key, weight, pair in (("observation", w1, triplet.observation),
                                  ("preselection", w2, triplet.preselection)):
            if weight == 0:
                continue
            try:
                losses[key] = masked_bce(pred, pair.target, pair.valid)
                upstream += weight * masked_bce_grad(pred, pair.target, pair.valid)
            except DegenerateBatchError:
                log.warning("%s pair has no valid cells in this batch; skipped", key)
        if upstream.any():
            add(backward(tape, upstream))
    if w3 > 0:
        pair = triplet.prior
        pred, tape = forward(params, net_config, pair.input, train=True)
        losses["prior"] = masked_bce(pred, pair.target, pair.valid)
        add(backward(tape, w3 * masked_bce_grad(pred, pair.target, pair.valid)))
    return losses, grads
