"""Partially observed datasets and unpaired prior-knowledge corpora.

Two sources are supported:

* labeled ground-plane point clouds, projected to ternary grids by per-cell
  majority vote (:func:`project_points_to_grid`, :func:`read_points_csv`);
* procedural synthetic worlds: random smooth roads rasterized onto large maps
  (:func:`synth_world`), observed through a field-of-view wedge with ray-cast
  occlusion shadows (:func:`synth_mask`).

:func:`make_dataset` assembles the synthetic benchmark, and
:func:`write_dataset` / :func:`load_dataset` move it to and from disk as HGRD1
files plus a JSON manifest.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import (
    CODE_NONROAD,
    CODE_ROAD,
    CODE_UNOBSERVED,
    BinaryGrid,
    ObservationMask,
    TernaryGrid,
    compose_codes,
    read_grid,
    write_grid,
)


class DataError(ValueError):
    """Inconsistent or degenerate data or data configuration."""


# --------------------------------------------------------------------------
# point-cloud projection


class LabelClass(enum.IntEnum):
    ROAD = 0
    STATIC = 1
    MOVABLE = 2


_CSV_CLASSES = {"road": LabelClass.ROAD, "static": LabelClass.STATIC, "movable": LabelClass.MOVABLE}


@dataclass(frozen=True)
class LabeledPoint:
    x: float
    y: float
    label: LabelClass


@dataclass(frozen=True)
class GridSpec:
    """Cartesian grid over the ground plane.

    ``origin`` is the (x, y) coordinate of the far-left corner of cell (0, 0).
    Columns grow with x; rows grow as y decreases, so row 0 is the farthest.
    """

    height: int
    width: int
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise DataError("cell_size must be positive")
        if self.height < 1 or self.width < 1:
            raise DataError("grid dimensions must be >= 1")


def vote_cell(n_road: int, n_static: int, n_movable: int) -> int:
    """Majority vote for one cell, returning a ternary code.

    Ties fall to the more conservative status: movable/unknown, then static,
    then road. An empty cell is unobserved.
    """
    top = max(n_road, n_static, n_movable)
    if top == 0 or n_movable == top:
        return CODE_UNOBSERVED
    if n_static == top:
        return CODE_NONROAD
    return CODE_ROAD


def project_points_to_grid(points: Iterable[LabeledPoint], spec: GridSpec) -> TernaryGrid:
    pts = list(points)
    counts = np.zeros((spec.height, spec.width, 3), dtype=np.int64)
    if pts:
        xy = np.array([(p.x, p.y) for p in pts], dtype=float)
        labels = np.array([int(p.label) for p in pts], dtype=np.int64)
        cols = np.floor((xy[:, 0] - spec.origin[0]) / spec.cell_size)
        rows = np.floor((spec.origin[1] - xy[:, 1]) / spec.cell_size)
        inside = (rows >= 0) & (rows < spec.height) & (cols >= 0) & (cols < spec.width)
        np.add.at(counts, (rows[inside].astype(int), cols[inside].astype(int), labels[inside]), 1)
    n_static, n_movable = counts[..., 1], counts[..., 2]
    top = counts.max(axis=-1)
    codes = np.full((spec.height, spec.width), CODE_ROAD, dtype=np.uint8)
    codes[n_static == top] = CODE_NONROAD
    codes[(n_movable == top) | (top == 0)] = CODE_UNOBSERVED
    return TernaryGrid(codes)


def read_points_csv(path) -> list[LabeledPoint]:
    """Read ``x,y,class`` lines (class in road/static/movable); a header row is allowed."""
    points = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            x, y, name = (s.strip() for s in row)
            if lineno == 1 and (x, y, name) == ("x", "y", "class"):
                continue
            if name not in _CSV_CLASSES:
                raise DataError(f"{path}:{lineno}: unknown class {name!r}")
            try:
                points.append(LabeledPoint(float(x), float(y), _CSV_CLASSES[name]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad coordinate") from None
    return points


# --------------------------------------------------------------------------
# cropping


def crop_count(shape: tuple[int, int], window_h: int, window_w: int, stride: int) -> int:
    H, W = shape
    return ((H - window_h) // stride + 1) * ((W - window_w) // stride + 1)


def crop_offsets(shape, window_h, window_w, stride) -> list[tuple[int, int]]:
    H, W = shape
    if window_h > H or window_w > W:
        raise DataError(f"window {window_h}x{window_w} larger than map {H}x{W}")
    if window_h < 1 or window_w < 1:
        raise DataError("window must be at least 1x1")
    if stride < 1:
        raise DataError("stride must be >= 1")
    return [(i, j) for i in range(0, H - window_h + 1, stride)
            for j in range(0, W - window_w + 1, stride)]


def slide_crop(road_map: BinaryGrid, window_h: int, window_w: int, stride: int) -> list[BinaryGrid]:
    cells = np.asarray(road_map, dtype=bool)
    return [BinaryGrid(cells[i:i + window_h, j:j + window_w])
            for i, j in crop_offsets(cells.shape, window_h, window_w, stride)]


# --------------------------------------------------------------------------
# synthetic worlds


@dataclass(frozen=True)
class WorldSpec:
    """Procedural road map: ``road_count`` and ``road_width`` are inclusive ranges.

    ``curvature`` is the standard deviation (radians) of the heading change per
    unit of road length; 0 gives straight roads.
    """

    seed: int
    size: int = 256
    road_count: tuple[int, int] = (3, 6)
    road_width: tuple[int, int] = (3, 7)
    curvature: float = 0.02

    def validate(self) -> None:
        lo, hi = self.road_count
        if lo < 1 or hi < lo:
            raise DataError(f"invalid road count range {self.road_count}")
        wlo, whi = self.road_width
        if wlo < 1 or whi < wlo or whi >= self.size:
            raise DataError(f"road width range {self.road_width} must lie in [1, {self.size})")
        if self.curvature < 0:
            raise DataError("curvature must be non-negative")


def _trace_road(rng: np.random.Generator, size: int, width: int, curvature: float) -> np.ndarray:
    """Polyline through a random cell center, extended both ways until it leaves the map."""
    start = rng.integers(0, size, 2) + 0.5  # (row, col)
    heading = rng.uniform(0, 2 * math.pi)
    step = 4.0
    margin = width + step
    max_steps = int(4 * size / step)
    halves = []
    for direction in (0.0, math.pi):
        pts, h, p = [], heading + direction, start.copy()
        for _ in range(max_steps):
            h += rng.normal(0.0, curvature * math.sqrt(step)) if curvature > 0 else 0.0
            p = p + step * np.array([math.sin(h), math.cos(h)])
            pts.append(p)
            if not (-margin <= p[0] <= size + margin and -margin <= p[1] <= size + margin):
                break
        halves.append(pts)
    return np.array(halves[1][::-1] + [start] + halves[0])


def rasterize_polyline(cells: np.ndarray, polyline: np.ndarray, width: float) -> None:
    """Mark cells whose center lies within ``width / 2`` of the polyline."""
    H, W = cells.shape
    half = width / 2.0
    for a, b in zip(polyline[:-1], polyline[1:]):
        r0 = max(int(math.floor(min(a[0], b[0]) - half)), 0)
        r1 = min(int(math.ceil(max(a[0], b[0]) + half)) + 1, H)
        c0 = max(int(math.floor(min(a[1], b[1]) - half)), 0)
        c1 = min(int(math.ceil(max(a[1], b[1]) + half)) + 1, W)
        if r0 >= r1 or c0 >= c1:
            continue
        rr, cc = np.mgrid[r0:r1, c0:c1]
        pr, pc = rr + 0.5 - a[0], cc + 0.5 - a[1]
        d = b - a
        seg2 = float(d @ d)
        t = np.clip((pr * d[0] + pc * d[1]) / seg2, 0.0, 1.0) if seg2 > 0 else 0.0
        dist2 = (pr - t * d[0]) ** 2 + (pc - t * d[1]) ** 2
        cells[r0:r1, c0:c1] |= dist2 <= half * half


def synth_world(spec: WorldSpec) -> BinaryGrid:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cells = np.zeros((spec.size, spec.size), dtype=bool)
    n_roads = int(rng.integers(spec.road_count[0], spec.road_count[1] + 1))
    for _ in range(n_roads):
        width = int(rng.integers(spec.road_width[0], spec.road_width[1] + 1))
        rasterize_polyline(cells, _trace_road(rng, spec.size, width, spec.curvature), width)
    return BinaryGrid(cells)


# --------------------------------------------------------------------------
# observation masks


@dataclass(frozen=True)
class MaskSpec:
    """Sensor footprint: FOV wedge from ``apex`` minus occluder shadows minus dropout.

    ``apex`` is (row, col) in continuous cell coordinates; ``None`` puts it at
    the middle of the bottom edge. Occluders are axis-aligned rectangles with
    side lengths drawn from ``occluder_size`` (inclusive, cells), centred on
    wedge cells at least ``occluder_min_distance`` cells from the apex.
    """

    seed: int
    half_angle: float = math.radians(40)
    apex: tuple[float, float] | None = None
    occluder_count: tuple[int, int] = (0, 3)
    occluder_size: tuple[int, int] = (3, 8)
    dropout: float = 0.0
    max_range: float | None = None
    occluder_min_distance: float = 0.0

    def validate(self) -> None:
        if not 0.0 < self.half_angle <= math.pi / 2:
            raise DataError("half_angle must lie in (0, pi/2]")
        if not 0.0 <= self.dropout <= 1.0:
            raise DataError("dropout must lie in [0, 1]")
        lo, hi = self.occluder_count
        if lo < 0 or hi < lo:
            raise DataError(f"invalid occluder count range {self.occluder_count}")
        slo, shi = self.occluder_size
        if slo < 1 or shi < slo:
            raise DataError(f"invalid occluder size range {self.occluder_size}")
        if self.max_range is not None and self.max_range <= 0:
            raise DataError("max_range must be positive")
        if self.occluder_min_distance < 0:
            raise DataError("occluder_min_distance must be >= 0")


def _cell_centers(dims):
    H, W = dims
    return np.mgrid[0:H, 0:W].astype(float) + 0.5


def fov_wedge(dims, apex, half_angle: float, max_range: float | None = None) -> np.ndarray:
    rows, cols = _cell_centers(dims)
    forward = apex[0] - rows
    lateral = np.abs(cols - apex[1])
    inside = np.arctan2(lateral, forward) <= half_angle
    if max_range is not None:
        inside &= np.hypot(forward, lateral) <= max_range
    return inside


def shadow(dims, apex, box) -> np.ndarray:
    """Cells hidden by a rectangle ``box = (r0, c0, r1, c1)`` as seen from ``apex``.

    A cell is hidden when the segment from the apex to its center meets the
    closed rectangle (this includes cells inside it). Uses slab clipping.
    """
    rows, cols = _cell_centers(dims)
    r0, c0, r1, c1 = box
    t_lo = np.zeros(rows.shape)
    t_hi = np.ones(rows.shape)
    hit = np.ones(rows.shape, dtype=bool)
    for origin, target, lo, hi in ((apex[0], rows, r0, r1), (apex[1], cols, c0, c1)):
        d = target - origin
        parallel = d == 0
        hit &= ~parallel | ((origin >= lo) & (origin <= hi))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta, tb = (lo - origin) / d, (hi - origin) / d
        t_lo = np.where(parallel, t_lo, np.maximum(t_lo, np.minimum(ta, tb)))
        t_hi = np.where(parallel, t_hi, np.minimum(t_hi, np.maximum(ta, tb)))
    return hit & (t_lo <= t_hi)


def synth_mask(spec: MaskSpec, dims: tuple[int, int]) -> ObservationMask:
    spec.validate()
    H, W = dims
    apex = spec.apex if spec.apex is not None else (float(H), W / 2.0)
    observed = fov_wedge(dims, apex, spec.half_angle, spec.max_range)
    # independent streams: adding occluders never changes the dropout pattern
    occ_rng, drop_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    rows, cols = _cell_centers(dims)
    far = np.hypot(rows - apex[0], cols - apex[1]) >= spec.occluder_min_distance
    for box in _sample_occluders(occ_rng, spec, dims, observed & far):
        observed &= ~shadow(dims, apex, box)
    if spec.dropout > 0:
        observed &= drop_rng.random(dims) >= spec.dropout
    return ObservationMask(observed)


def _sample_occluders(rng, spec: MaskSpec, dims, wedge) -> list[tuple[int, int, int, int]]:
    n = int(rng.integers(spec.occluder_count[0], spec.occluder_count[1] + 1))
    candidates = np.argwhere(wedge)
    boxes = []
    for _ in range(n):
        h, w = rng.integers(spec.occluder_size[0], spec.occluder_size[1] + 1, 2)
        if len(candidates) == 0:
            break
        r, c = candidates[rng.integers(len(candidates))]
        r0, c0 = max(int(r) - int(h) // 2, 0), max(int(c) - int(w) // 2, 0)
        boxes.append((r0, c0, min(r0 + int(h), dims[0]), min(c0 + int(w), dims[1])))
    return boxes


# --------------------------------------------------------------------------
# dataset assembly


@dataclass
class DatasetConfig:
    """Synthetic benchmark recipe.

    ``prior_worlds`` feed the prior corpus, ``observation_worlds`` feed the
    partial samples (first ``n_train_worlds`` for training, the rest for
    testing) and ``holdout_worlds`` feed the hold-out prior set. The three seed
    pools must be disjoint. Masks use seeds ``mask_seed + sample_number``.
    """

    prior_worlds: list[WorldSpec]
    observation_worlds: list[WorldSpec]
    holdout_worlds: list[WorldSpec] = field(default_factory=list)
    mask: MaskSpec = field(default_factory=lambda: MaskSpec(seed=0))
    mask_seed: int = 1_000_000
    window: int = 64
    prior_stride: int = 16
    observation_stride: int = 16
    n_train_worlds: int | None = None
    n_train: int = 512
    n_test: int = 128
    n_holdout: int = 256
    split_seed: int = 0

    def validate(self) -> None:
        pools = [{w.seed for w in self.prior_worlds},
                 {w.seed for w in self.observation_worlds},
                 {w.seed for w in self.holdout_worlds}]
        names = ["prior", "observation", "holdout"]
        for a in range(3):
            for b in range(a + 1, 3):
                overlap = pools[a] & pools[b]
                if overlap:
                    raise DataError(f"{names[a]} and {names[b]} world seeds overlap: {sorted(overlap)}")
        if not self.prior_worlds or not self.observation_worlds:
            raise DataError("need at least one prior world and one observation world")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "DatasetConfig":
        data = dict(data)
        for key in ("prior_worlds", "observation_worlds", "holdout_worlds"):
            data[key] = [WorldSpec(**_tuples(w)) for w in data.get(key, [])]
        if "mask" in data:
            data["mask"] = MaskSpec(**_tuples(data["mask"]))
        return cls(**data)


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


@dataclass
class Dataset:
    """In-memory benchmark. Arrays are stacked ``(N, H, W)``.

    ``partial_*`` are ternary codes; ``gt_*`` are the withheld complete layouts
    used only by evaluation; ``prior`` is the unpaired corpus and ``holdout`` the
    unseen prior samples. ``*_sources`` record (world seed, row, col) per sample.
    """

    prior: np.ndarray
    partial_train: np.ndarray
    partial_test: np.ndarray
    gt_train: np.ndarray
    gt_test: np.ndarray
    holdout: np.ndarray
    manifest: dict

    @property
    def train_masks(self) -> np.ndarray:
        return self.partial_train != CODE_UNOBSERVED

    @property
    def test_masks(self) -> np.ndarray:
        return self.partial_test != CODE_UNOBSERVED


def _crops(world: np.ndarray, window: int, stride: int, seed: int):
    offsets = crop_offsets(world.shape, window, window, stride)
    stack = np.stack([world[i:i + window, j:j + window] for i, j in offsets])
    return stack, [(seed, i, j) for i, j in offsets]


def make_dataset(config: DatasetConfig) -> Dataset:
    config.validate()
    win = config.window

    prior, prior_src = [], []
    for spec in config.prior_worlds:
        stack, src = _crops(np.asarray(synth_world(spec)), win, config.prior_stride, spec.seed)
        prior.append(stack)
        prior_src += src

    n_train_worlds = config.n_train_worlds
    if n_train_worlds is None:
        n_train_worlds = max(1, len(config.observation_worlds) - 1) if len(config.observation_worlds) > 1 else 1
    shared = n_train_worlds >= len(config.observation_worlds)
    train_pool, test_pool = [], []
    for k, spec in enumerate(config.observation_worlds):
        stack, src = _crops(np.asarray(synth_world(spec)), win, config.observation_stride, spec.seed)
        items = list(zip(stack, src))
        if shared:
            train_pool += items
        elif k < n_train_worlds:
            train_pool += items
        else:
            test_pool += items

    rng = np.random.default_rng(config.split_seed)
    if shared:
        order = rng.permutation(len(train_pool))
        need = config.n_train + config.n_test
        if need > len(train_pool):
            raise DataError(f"observation worlds give {len(train_pool)} crops, need {need}")
        train_items = [train_pool[i] for i in order[:config.n_train]]
        test_items = [train_pool[i] for i in order[config.n_train:need]]
    else:
        if config.n_train > len(train_pool) or config.n_test > len(test_pool):
            raise DataError(f"observation worlds give {len(train_pool)}/{len(test_pool)} train/test crops, "
                            f"need {config.n_train}/{config.n_test}")
        train_items = [train_pool[i] for i in rng.permutation(len(train_pool))[:config.n_train]]
        test_items = [test_pool[i] for i in rng.permutation(len(test_pool))[:config.n_test]]

    def masked(items, first_mask):
        gts = np.stack([g for g, _ in items]).astype(bool)
        masks = np.stack([np.asarray(synth_mask(_with_seed(config.mask, config.mask_seed + first_mask + n),
                                                (win, win))) for n in range(len(items))])
        return compose_codes(gts, masks), gts, [s for _, s in items]

    partial_train, gt_train, train_src = masked(train_items, 0)
    partial_test, gt_test, test_src = masked(test_items, len(train_items))

    holdout, holdout_src = np.zeros((0, win, win), dtype=bool), []
    if config.holdout_worlds and config.n_holdout > 0:
        pool, src = [], []
        for spec in config.holdout_worlds:
            stack, s = _crops(np.asarray(synth_world(spec)), win, config.prior_stride, spec.seed)
            pool.append(stack)
            src += s
        pool = np.concatenate(pool)
        if config.n_holdout > len(pool):
            raise DataError(f"hold-out worlds give {len(pool)} crops, need {config.n_holdout}")
        pick = np.sort(rng.permutation(len(pool))[:config.n_holdout])
        holdout, holdout_src = pool[pick], [src[i] for i in pick]

    manifest = {
        "format": "hallucigrid-dataset-1",
        "config": config.to_json(),
        "seeds": {
            "prior_worlds": [w.seed for w in config.prior_worlds],
            "observation_worlds": [w.seed for w in config.observation_worlds],
            "holdout_worlds": [w.seed for w in config.holdout_worlds],
        },
        "splits": {
            "prior": [f"prior/{i:06d}" for i in range(sum(len(p) for p in prior))],
            "partial_train": [f"partial_train/{i:06d}" for i in range(len(train_items))],
            "partial_test": [f"partial_test/{i:06d}" for i in range(len(test_items))],
            "holdout": [f"holdout/{i:06d}" for i in range(len(holdout_src))],
        },
        "sources": {
            "prior": prior_src,
            "partial_train": train_src,
            "partial_test": test_src,
            "holdout": holdout_src,
        },
    }
    return Dataset(
        prior=np.concatenate(prior).astype(bool),
        partial_train=partial_train,
        partial_test=partial_test,
        gt_train=gt_train,
        gt_test=gt_test,
        holdout=holdout.astype(bool),
        manifest=manifest,
    )


def _with_seed(spec: MaskSpec, seed: int) -> MaskSpec:
    return MaskSpec(**{**asdict(spec), "seed": seed})


# --------------------------------------------------------------------------
# on-disk layout

_SPLIT_KINDS = {
    "prior": BinaryGrid,
    "partial_train": TernaryGrid,
    "partial_test": TernaryGrid,
    "gt_train": BinaryGrid,
    "gt_test": BinaryGrid,
    "holdout": BinaryGrid,
}


def write_dataset(dataset: Dataset, root) -> Path:
    """Write one HGRD1 file per sample plus ``manifest.json``.

    Ground-truth files mirror the partial sample names under ``gt_train/`` and
    ``gt_test/``; the uncropped observation worlds go to ``worlds/``.
    """
    root = Path(root)
    for split, kind in _SPLIT_KINDS.items():
        (root / split).mkdir(parents=True, exist_ok=True)
        for i, cells in enumerate(getattr(dataset, split)):
            write_grid(kind(cells), root / split / f"{i:06d}.hgrd")
    (root / "worlds").mkdir(exist_ok=True)
    config = DatasetConfig.from_json(dataset.manifest["config"])
    for spec in config.observation_worlds:
        write_grid(synth_world(spec), root / "worlds" / f"observation_{spec.seed}.hgrd")
    (root / "manifest.json").write_text(json.dumps(dataset.manifest, indent=2, sort_keys=True))
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    arrays = {}
    for split, kind in _SPLIT_KINDS.items():
        files = sorted((root / split).glob("*.hgrd"))
        grids = [read_grid(f) for f in files]
        if any(not isinstance(g, kind) for g in grids):
            raise DataError(f"{split}: unexpected grid kind")
        window = manifest["config"]["window"]
        dtype = np.uint8 if kind is TernaryGrid else bool
        arrays[split] = (np.stack([g.cells for g in grids]).astype(dtype) if grids
                         else np.zeros((0, window, window), dtype=dtype))
    for split in ("prior", "partial_train", "partial_test", "holdout"):
        if len(arrays[split]) != len(manifest["splits"][split]):
            raise DataError(f"{split}: manifest lists {len(manifest['splits'][split])} samples, "
                            f"found {len(arrays[split])} files")
    return Dataset(manifest=manifest, **arrays)


def check_disjoint_seeds(a: Sequence[int], b: Sequence[int], what: str = "seed pools") -> None:
    overlap = set(a) & set(b)
    if overlap:
        raise DataError(f"{what} overlap: {sorted(overlap)}")
