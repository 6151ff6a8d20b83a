"""Grid value types, conversions, and the HGRD1 binary file format.

Three grid kinds share one layout: an ``H x W`` numpy array stored row-major
with the origin at the top-left and row 0 farthest from the ego vehicle.

* :class:`TernaryGrid` holds the partially observed map (road / non-road /
  unobserved). Cells are stored as file codes (0, 1, 2) and exposed as the
  real status values 0.0, 1.0 and 0.5 via :attr:`TernaryGrid.values`.
* :class:`BinaryGrid` holds complete road layouts (``True`` = road).
* :class:`ObservationMask` holds the observed-cell pattern (``True`` = observed).

All three are immutable once constructed; their arrays are made read-only.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"HGRD1"
KIND_TERNARY = 0
KIND_BINARY = 1
KIND_MASK = 2
_HEADER = struct.Struct("<5sBII")

# ternary file codes
CODE_NONROAD = 0
CODE_ROAD = 1
CODE_UNOBSERVED = 2

# code -> status value
_CODE_TO_VALUE = np.array([0.0, 1.0, 0.5])


class GridFormatError(ValueError):
    """Raised for malformed HGRD1 payloads or invalid cell values."""


class CellStatus(enum.Enum):
    NON_ROAD = 0.0
    UNOBSERVED = 0.5
    ROAD = 1.0

    @property
    def code(self) -> int:
        return {CellStatus.NON_ROAD: CODE_NONROAD,
                CellStatus.ROAD: CODE_ROAD,
                CellStatus.UNOBSERVED: CODE_UNOBSERVED}[self]

    @classmethod
    def from_value(cls, value: float) -> "CellStatus":
        try:
            return cls(float(value))
        except ValueError:
            raise GridFormatError(f"{value!r} is not a cell status value") from None


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    if out.ndim != 2:
        raise ValueError(f"grid must be 2-D, got shape {out.shape}")
    if out.shape[0] < 1 or out.shape[1] < 1:
        raise ValueError(f"grid dimensions must be >= 1, got {out.shape}")
    out.setflags(write=False)
    return out


class _Grid:
    cells: np.ndarray

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def __array__(self, dtype=None, copy=None):
        return self.cells if dtype is None else self.cells.astype(dtype)

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and np.array_equal(self.cells, other.cells)

    def __hash__(self) -> int:
        return hash((type(self).__name__, self.cells.shape, self.cells.tobytes()))


@dataclass(frozen=True, eq=False)
class TernaryGrid(_Grid):
    """Partially observed map; ``cells`` holds codes 0=non-road, 1=road, 2=unobserved."""

    cells: np.ndarray

    def __post_init__(self):
        codes = _frozen(self.cells, np.uint8)
        if codes.max() > CODE_UNOBSERVED:
            raise GridFormatError("ternary cell codes must be 0, 1 or 2")
        object.__setattr__(self, "cells", codes)

    @classmethod
    def from_values(cls, values) -> "TernaryGrid":
        """Build from real status values {0.0, 0.5, 1.0}; anything else is an error."""
        return cls(encode_values(values))

    @property
    def values(self) -> np.ndarray:
        return _CODE_TO_VALUE[self.cells]

    @property
    def observed(self) -> np.ndarray:
        return self.cells != CODE_UNOBSERVED


@dataclass(frozen=True, eq=False)
class BinaryGrid(_Grid):
    """Complete road layout, ``True`` = road."""

    cells: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cells", _frozen(self.cells, bool))


@dataclass(frozen=True, eq=False)
class ObservationMask(_Grid):
    """``True`` where the cell was observed."""

    cells: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cells", _frozen(self.cells, bool))


Grid = Union[TernaryGrid, BinaryGrid, ObservationMask]


def encode_values(values) -> np.ndarray:
    """Map status values {0.0, 0.5, 1.0} to file codes; works on any array shape."""
    values = np.asarray(values, dtype=float)
    codes = np.full(values.shape, 255, dtype=np.uint8)
    codes[values == 0.0] = CODE_NONROAD
    codes[values == 1.0] = CODE_ROAD
    codes[values == 0.5] = CODE_UNOBSERVED
    if (codes == 255).any():
        bad = values[codes == 255].flat[0]
        raise GridFormatError(f"{bad!r} is not a cell status value")
    return codes


def decode_codes(codes) -> np.ndarray:
    """Map ternary codes to status values; works on any array shape."""
    codes = np.asarray(codes)
    if codes.size and codes.max() > CODE_UNOBSERVED:
        raise GridFormatError("ternary cell codes must be 0, 1 or 2")
    return _CODE_TO_VALUE[codes]


def compose_partial(truth: BinaryGrid, mask: ObservationMask) -> TernaryGrid:
    truth_cells, mask_cells = np.asarray(truth, dtype=bool), np.asarray(mask, dtype=bool)
    if truth_cells.shape != mask_cells.shape:
        raise ValueError(f"dimension mismatch: {truth_cells.shape} vs {mask_cells.shape}")
    return TernaryGrid(compose_codes(truth_cells, mask_cells))


def compose_codes(truth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Array form of :func:`compose_partial`; broadcasts over leading batch axes."""
    return np.where(mask, truth.astype(np.uint8), np.uint8(CODE_UNOBSERVED)).astype(np.uint8)


def split_partial(partial: TernaryGrid) -> tuple[BinaryGrid, ObservationMask]:
    """Separate observed values from the observation pattern.

    Unobserved cells become non-road in the returned binary grid. That value is
    only a placeholder: always read it through the mask.
    """
    codes = np.asarray(partial)
    return BinaryGrid(codes == CODE_ROAD), ObservationMask(codes != CODE_UNOBSERVED)


def binarize(pred, threshold: float = 0.5) -> BinaryGrid:
    """Road iff ``value >= threshold`` (ties go to road)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    pred = np.asarray(pred, dtype=float)
    if pred.size and (np.isnan(pred).any() or pred.min() < 0.0 or pred.max() > 1.0):
        raise ValueError("prediction values must lie in [0, 1]")
    return BinaryGrid(pred >= threshold)


# --------------------------------------------------------------------------
# HGRD1 serialization


def grid_to_bytes(grid: Grid) -> bytes:
    if isinstance(grid, TernaryGrid):
        kind = KIND_TERNARY
    elif isinstance(grid, BinaryGrid):
        kind = KIND_BINARY
    elif isinstance(grid, ObservationMask):
        kind = KIND_MASK
    else:
        raise TypeError(f"cannot serialize {type(grid).__name__}")
    payload = np.ascontiguousarray(grid.cells, dtype=np.uint8).tobytes()
    return _HEADER.pack(MAGIC, kind, grid.height, grid.width) + payload


def grid_from_bytes(data: bytes) -> Grid:
    if len(data) < _HEADER.size:
        raise GridFormatError("truncated header")
    magic, kind, height, width = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise GridFormatError(f"bad magic {magic!r}")
    if height < 1 or width < 1:
        raise GridFormatError(f"invalid dimensions {height}x{width}")
    n = height * width
    body = data[_HEADER.size:]
    if len(body) < n:
        raise GridFormatError(f"truncated payload: expected {n} bytes, got {len(body)}")
    if len(body) > n:
        raise GridFormatError(f"trailing bytes after payload ({len(body) - n})")
    cells = np.frombuffer(body, dtype=np.uint8).reshape(height, width)
    if kind == KIND_TERNARY:
        if cells.max() > CODE_UNOBSERVED:
            raise GridFormatError(f"invalid cell code {int(cells.max())} in ternary grid")
        return TernaryGrid(cells)
    if kind in (KIND_BINARY, KIND_MASK):
        if cells.max() > 1:
            raise GridFormatError(f"invalid cell code {int(cells.max())} in binary grid")
        return (BinaryGrid if kind == KIND_BINARY else ObservationMask)(cells.astype(bool))
    raise GridFormatError(f"unknown grid kind {kind}")


def write_grid(grid: Grid, path) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def read_grid(path) -> Grid:
    return grid_from_bytes(Path(path).read_bytes())


def write_pgm(grid: Grid, path) -> None:
    """Export for eyeballing: non-road 0, unobserved 128, road 255."""
    if isinstance(grid, TernaryGrid):
        pixels = np.array([0, 255, 128], dtype=np.uint8)[grid.cells]
    else:
        pixels = np.where(grid.cells, 255, 0).astype(np.uint8)
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())
