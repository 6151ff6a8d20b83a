"""Pre-selection targets: nearest prior samples by observed-pixel mean IoU.

For each partial observation the corpus is scanned for the ``k`` prior samples
that best agree with it on observed cells. Their cellwise average becomes the
target, valid only where all ``k`` samples agree.

The corpus is stored as packed bit rows so that each score costs two
AND + popcount passes over 64-bit words.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .grid import CODE_ROAD, CODE_UNOBSERVED, TernaryGrid

CACHE_MAGIC = b"HPSC1"


class CacheMissError(KeyError):
    pass


def _pack(cells: np.ndarray) -> np.ndarray:
    """Pack (N, H, W) booleans into (N, words) uint64 rows."""
    flat = np.asarray(cells, dtype=bool).reshape(len(cells), -1)
    packed = np.packbits(flat, axis=1, bitorder="little")
    pad = (-packed.shape[1]) % 8
    if pad:
        packed = np.pad(packed, ((0, 0), (0, pad)))
    return np.ascontiguousarray(packed).view(np.uint64)


class PackedCorpus:
    """Immutable prior corpus; row ``i`` is sample index ``i``."""

    def __init__(self, samples: np.ndarray):
        samples = np.asarray(samples, dtype=bool)
        if samples.ndim != 3 or len(samples) == 0:
            raise ValueError("corpus must be a non-empty (N, H, W) stack")
        self.dims = samples.shape[1:]
        self.bits = _pack(samples)
        self.bits.setflags(write=False)
        self._samples = samples.copy()
        self._samples.setflags(write=False)

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def samples(self) -> np.ndarray:
        return self._samples

    def unpack(self, index: int) -> np.ndarray:
        n = self.dims[0] * self.dims[1]
        row = np.unpackbits(self.bits[index].view(np.uint8), bitorder="little")[:n]
        return row.reshape(self.dims).astype(bool)


@dataclass(frozen=True)
class ConsensusTarget:
    counts: np.ndarray  # per-cell number of selected samples that are road
    k: int
    selected: tuple[int, ...]

    @property
    def target(self) -> np.ndarray:
        return self.counts / self.k

    @property
    def valid(self) -> np.ndarray:
        return (self.counts == 0) | (self.counts == self.k)


def _iou_terms(inter_road, union_road, inter_non, union_non):
    """Mean of the per-class IoUs whose union is non-empty."""
    inter_road, union_road = np.asarray(inter_road), np.asarray(union_road)
    inter_non, union_non = np.asarray(inter_non), np.asarray(union_non)
    with np.errstate(divide="ignore", invalid="ignore"):
        road = np.where(union_road > 0, inter_road / union_road, 0.0)
        non = np.where(union_non > 0, inter_non / union_non, 0.0)
    classes = (union_road > 0).astype(int) + (union_non > 0)
    return (road + non) / classes


def observed_mean_iou(partial: TernaryGrid, candidate) -> float:
    codes = np.asarray(partial)
    cand = np.asarray(candidate, dtype=bool)
    if codes.shape != cand.shape:
        raise ValueError(f"dimension mismatch: {codes.shape} vs {cand.shape}")
    observed = codes != CODE_UNOBSERVED
    if not observed.any():
        raise ValueError("partial grid has no observed cells")
    truth = codes == CODE_ROAD
    road_t, road_p = truth & observed, cand & observed
    non_t, non_p = ~truth & observed, ~cand & observed
    return float(_iou_terms((road_t & road_p).sum(), (road_t | road_p).sum(),
                            (non_t & non_p).sum(), (non_t | non_p).sum()))


def packed_scores(partial: TernaryGrid, corpus: PackedCorpus, indices=None) -> np.ndarray:
    """:func:`observed_mean_iou` against many corpus rows at once."""
    codes = np.asarray(partial)
    if codes.shape != corpus.dims:
        raise ValueError(f"dimension mismatch: {codes.shape} vs {corpus.dims}")
    observed = codes != CODE_UNOBSERVED
    n_obs = int(observed.sum())
    if n_obs == 0:
        raise ValueError("partial grid has no observed cells")
    road_obs = codes == CODE_ROAD
    q_obs, q_road = _pack(observed[None])[0], _pack(road_obs[None])[0]
    n_road = int(road_obs.sum())
    n_non = n_obs - n_road

    bits = corpus.bits if indices is None else corpus.bits[indices]
    pred_road = np.bitwise_count(bits & q_obs).sum(axis=1, dtype=np.int64)  # candidate road on observed
    inter_road = np.bitwise_count(bits & q_road).sum(axis=1, dtype=np.int64)
    union_road = n_road + pred_road - inter_road
    # non-road on observed: truth non-road = n_non, candidate non-road = n_obs - pred_road
    inter_non = n_non - (pred_road - inter_road)
    union_non = n_non + (n_obs - pred_road) - inter_non
    return _iou_terms(inter_road, union_road, inter_non, union_non)


def subset_indices(corpus_size: int, subset_size: int, seed: int) -> np.ndarray:
    """The scanned corpus subset; a pure function of ``seed``, shared by all queries."""
    if not 1 <= subset_size <= corpus_size:
        raise ValueError(f"subset_size must lie in [1, {corpus_size}], got {subset_size}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(corpus_size, size=subset_size, replace=False))


def rank(scores: np.ndarray, indices: np.ndarray, k: int) -> list[int]:
    """Top ``k`` indices by (score desc, index asc)."""
    order = np.lexsort((indices, -scores))
    return [int(i) for i in indices[order[:k]]]


def topk_select(partial: TernaryGrid, corpus: PackedCorpus, k: int, subset_size: int | None = None,
                seed: int = 0) -> list[int]:
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if k < 1:
        raise ValueError("k must be >= 1")
    subset_size = len(corpus) if subset_size is None else subset_size
    if k > subset_size:
        raise ValueError(f"k={k} exceeds subset_size={subset_size}")
    indices = subset_indices(len(corpus), subset_size, seed)
    return rank(packed_scores(partial, corpus, indices), indices, k)


def consensus_target(corpus: PackedCorpus, selected: Sequence[int]) -> ConsensusTarget:
    selected = tuple(int(i) for i in selected)
    if not selected:
        raise ValueError("empty selection")
    counts = corpus.samples[list(selected)].sum(axis=0, dtype=np.int64)
    return ConsensusTarget(counts=counts, k=len(selected), selected=selected)


# --------------------------------------------------------------------------
# cache file
#
# layout: magic "HPSC1", u32 LE header length, JSON header, payloads.
# header["index"] maps sample id -> byte offset of its payload (relative to the
# end of the header). Payload: u16 K, H*W u16 road counts (target = count/K),
# H*W u8 valid flags, K u32 selected corpus indices.


class PreselectionCache(Mapping[str, ConsensusTarget]):
    """Consensus targets keyed by partial-sample id."""

    def __init__(self, entries: dict[str, ConsensusTarget], dims: tuple[int, int], meta: dict | None = None):
        self._entries = dict(entries)
        self.dims = tuple(dims)
        self.meta = dict(meta or {})

    def __getitem__(self, sample_id: str) -> ConsensusTarget:
        try:
            return self._entries[sample_id]
        except KeyError:
            raise CacheMissError(f"no pre-selection entry for sample {sample_id!r}") from None

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def batch(self, sample_ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (targets, valid) for a batch of ids."""
        entries = [self[s] for s in sample_ids]
        return (np.stack([e.target for e in entries]), np.stack([e.valid for e in entries]))

    def to_bytes(self) -> bytes:
        H, W = self.dims
        index, chunks, offset = {}, [], 0
        for sample_id, entry in self._entries.items():
            if entry.counts.shape != (H, W):
                raise ValueError(f"{sample_id}: dims {entry.counts.shape} != {self.dims}")
            chunk = b"".join([
                struct.pack("<H", entry.k),
                entry.counts.astype("<u2").tobytes(),
                entry.valid.astype(np.uint8).tobytes(),
                np.asarray(entry.selected, dtype="<u4").tobytes(),
            ])
            index[sample_id] = offset
            chunks.append(chunk)
            offset += len(chunk)
        header = json.dumps({"dims": [H, W], "index": index, "meta": self.meta}, sort_keys=True).encode()
        return CACHE_MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PreselectionCache":
        if data[:5] != CACHE_MAGIC:
            raise ValueError("not a pre-selection cache file")
        (hlen,) = struct.unpack_from("<I", data, 5)
        header = json.loads(data[9:9 + hlen])
        H, W = header["dims"]
        body = memoryview(data)[9 + hlen:]
        entries = {}
        for sample_id, off in header["index"].items():
            (k,) = struct.unpack_from("<H", body, off)
            p = off + 2
            counts = np.frombuffer(body, dtype="<u2", count=H * W, offset=p).reshape(H, W).astype(np.int64)
            p += 2 * H * W
            valid = np.frombuffer(body, dtype=np.uint8, count=H * W, offset=p).reshape(H, W).astype(bool)
            p += H * W
            selected = tuple(int(i) for i in np.frombuffer(body, dtype="<u4", count=k, offset=p))
            entry = ConsensusTarget(counts=counts, k=k, selected=selected)
            if not np.array_equal(entry.valid, valid):
                raise ValueError(f"{sample_id}: stored valid mask disagrees with counts")
            entries[sample_id] = entry
        return cls(entries, (H, W), header.get("meta"))

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read(cls, path) -> "PreselectionCache":
        return cls.from_bytes(Path(path).read_bytes())


def build_preselection_cache(partials: np.ndarray, sample_ids: Sequence[str], corpus: PackedCorpus,
                             k: int = 8, subset_size: int | None = None, seed: int = 0,
                             path=None) -> PreselectionCache:
    """One consensus target per partial sample; optionally written to ``path``."""
    partials = np.asarray(partials)
    if len(partials) != len(sample_ids):
        raise ValueError("one sample id per partial grid required")
    if partials.shape[1:] != corpus.dims:
        raise ValueError(f"dimension mismatch: {partials.shape[1:]} vs {corpus.dims}")
    subset_size = len(corpus) if subset_size is None else subset_size
    indices = subset_indices(len(corpus), subset_size, seed)
    if k < 1 or k > subset_size:
        raise ValueError(f"k must lie in [1, {subset_size}]")
    entries = {}
    for sample_id, codes in zip(sample_ids, partials):
        scores = packed_scores(TernaryGrid(codes), corpus, indices)
        entries[sample_id] = consensus_target(corpus, rank(scores, indices, k))
    cache = PreselectionCache(entries, corpus.dims, {"k": k, "subset_size": subset_size, "seed": seed,
                                                     "corpus_size": len(corpus)})
    if path is not None:
        cache.write(path)
    return cache
