import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hallucigrid.grid import (
    BinaryGrid,
    CellStatus,
    GridFormatError,
    ObservationMask,
    TernaryGrid,
    binarize,
    compose_partial,
    decode_codes,
    encode_values,
    grid_from_bytes,
    grid_to_bytes,
    read_grid,
    split_partial,
    write_grid,
    write_pgm,
)

R, N, U = 1, 0, 2

shapes = st.tuples(st.integers(1, 12), st.integers(1, 12))
ternary_codes = shapes.flatmap(lambda s: arrays(np.uint8, s, elements=st.integers(0, 2)))


def _reference_bytes(kind, cells):
    """Independent HGRD1 encoder written from the format description."""
    h, w = cells.shape
    out = bytearray(b"HGRD1")
    out.append(kind)
    out += h.to_bytes(4, "little") + w.to_bytes(4, "little")
    for v in cells.ravel():
        out.append(int(v))
    return bytes(out)


# --- cell status -------------------------------------------------------


def test_status_values_and_codes():
    assert [s.value for s in CellStatus] == [0.0, 0.5, 1.0]
    assert CellStatus.ROAD.code == 1 and CellStatus.NON_ROAD.code == 0 and CellStatus.UNOBSERVED.code == 2
    assert CellStatus.from_value(0.5) is CellStatus.UNOBSERVED


@pytest.mark.parametrize("bad", [0.25, -1.0, 2.0, float("nan")])
def test_decoding_other_values_fails(bad):
    with pytest.raises(GridFormatError):
        CellStatus.from_value(bad)
    with pytest.raises(GridFormatError):
        encode_values([[0.0, bad]])


def test_value_code_round_trip():
    values = np.array([[0.0, 0.5], [1.0, 0.0]])
    assert np.array_equal(decode_codes(encode_values(values)), values)
    assert set(np.unique(TernaryGrid.from_values(values).values)) <= {0.0, 0.5, 1.0}


def test_grid_dimension_invariants():
    with pytest.raises(ValueError):
        TernaryGrid(np.zeros((0, 3), np.uint8))
    with pytest.raises(ValueError):
        BinaryGrid(np.zeros(4, bool))
    with pytest.raises(GridFormatError):
        TernaryGrid(np.full((2, 2), 3, np.uint8))
    g = BinaryGrid(np.ones((2, 3), bool))
    assert (g.height, g.width) == (2, 3) and g.cells.size == 6
    with pytest.raises(ValueError):
        g.cells[0, 0] = False


# --- compose / split -----------------------------------------------------


def test_compose_identity_case():
    out = compose_partial(BinaryGrid(np.ones((2, 2))), ObservationMask(np.ones((2, 2))))
    assert np.array_equal(out.cells, np.full((2, 2), R))


def test_compose_fully_masked():
    out = compose_partial(BinaryGrid(np.ones((2, 2))), ObservationMask(np.zeros((2, 2))))
    assert np.array_equal(out.cells, np.full((2, 2), U))


def test_compose_mixed():
    truth = BinaryGrid(np.array([[1, 0], [0, 1]]))
    mask = ObservationMask(np.array([[1, 0], [1, 1]]))
    assert np.array_equal(compose_partial(truth, mask).cells, [[R, U], [N, R]])


def test_compose_dimension_mismatch():
    with pytest.raises(ValueError):
        compose_partial(BinaryGrid(np.ones((2, 2))), ObservationMask(np.ones((2, 3))))


def test_split_all_unobserved():
    truth, mask = split_partial(TernaryGrid(np.full((3, 2), U)))
    assert not truth.cells.any() and not mask.cells.any()


def test_split_mixed():
    truth, mask = split_partial(TernaryGrid(np.array([[R, U], [N, R]])))
    assert np.array_equal(truth.cells, [[True, False], [False, True]])
    assert np.array_equal(mask.cells, [[True, False], [True, True]])


@settings(max_examples=200, deadline=None)
@given(ternary_codes)
def test_compose_split_round_trip(codes):
    partial = TernaryGrid(codes)
    assert compose_partial(*split_partial(partial)) == partial


@settings(max_examples=100, deadline=None)
@given(shapes.flatmap(lambda s: st.tuples(arrays(bool, s), arrays(bool, s))))
def test_split_recovers_observed_region(pair):
    truth, mask = pair
    t, m = split_partial(compose_partial(BinaryGrid(truth), ObservationMask(mask)))
    assert np.array_equal(m.cells, mask)
    assert np.array_equal(t.cells[mask], truth[mask])


# --- binarize -------------------------------------------------------------


def test_binarize_examples():
    assert np.array_equal(binarize(np.array([[0.9, 0.1]])).cells, [[True, False]])
    assert binarize(np.array([[0.5]])).cells[0, 0]


@pytest.mark.parametrize("t", [0.1, 0.3, 0.5, 0.77])
def test_binarize_tie_goes_to_road(t):
    assert binarize(np.array([[t]]), t).cells[0, 0]


def test_binarize_rejects_out_of_range():
    with pytest.raises(ValueError):
        binarize(np.array([[1.2]]))
    with pytest.raises(ValueError):
        binarize(np.array([[-0.1]]))
    with pytest.raises(ValueError):
        binarize(np.array([[0.5]]), 1.0)


def test_binarize_monotone_in_threshold():
    x = np.random.default_rng(0).random((32, 32))
    previous = None
    for t in np.linspace(0.01, 0.99, 50):
        road = binarize(x, t).cells
        assert np.array_equal(road, x >= t)
        if previous is not None:
            assert not (road & ~previous).any()  # raising t never adds road
        previous = road


# --- HGRD1 -----------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_file_round_trip_64(tmp_path, seed):
    codes = np.random.default_rng(seed).integers(0, 3, (64, 64)).astype(np.uint8)
    grid = TernaryGrid(codes)
    path = tmp_path / "g.hgrd"
    write_grid(grid, path)
    assert path.read_bytes() == _reference_bytes(0, codes)
    back = read_grid(path)
    assert back == grid
    write_grid(back, tmp_path / "h.hgrd")
    assert (tmp_path / "h.hgrd").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("cls,kind", [(BinaryGrid, 1), (ObservationMask, 2)])
def test_binary_kinds_round_trip(cls, kind):
    cells = np.random.default_rng(kind).random((5, 7)) > 0.5
    data = grid_to_bytes(cls(cells))
    assert data == _reference_bytes(kind, cells.astype(np.uint8))
    back = grid_from_bytes(data)
    assert type(back) is cls and np.array_equal(back.cells, cells)


@settings(max_examples=100, deadline=None)
@given(ternary_codes)
def test_bytes_round_trip_property(codes):
    data = grid_to_bytes(TernaryGrid(codes))
    assert grid_to_bytes(grid_from_bytes(data)) == data


def test_invalid_cell_code():
    with pytest.raises(GridFormatError, match="invalid cell code"):
        grid_from_bytes(_reference_bytes(0, np.array([[0, 3]], np.uint8)))
    with pytest.raises(GridFormatError, match="invalid cell code"):
        grid_from_bytes(_reference_bytes(1, np.array([[2]], np.uint8)))


def test_zero_dimension_header():
    with pytest.raises(GridFormatError, match="dimensions"):
        grid_from_bytes(b"HGRD1" + struct.pack("<BII", 0, 0, 5))


def test_bad_magic_and_truncation():
    good = _reference_bytes(0, np.zeros((3, 3), np.uint8))
    with pytest.raises(GridFormatError, match="magic"):
        grid_from_bytes(b"XGRD1" + good[5:])
    with pytest.raises(GridFormatError, match="truncated"):
        grid_from_bytes(good[:-1])
    with pytest.raises(GridFormatError, match="truncated"):
        grid_from_bytes(good[:7])
    with pytest.raises(GridFormatError, match="trailing"):
        grid_from_bytes(good + b"\0")
    with pytest.raises(GridFormatError, match="kind"):
        grid_from_bytes(_reference_bytes(7, np.zeros((1, 1), np.uint8)))


def test_pgm_export(tmp_path):
    write_pgm(TernaryGrid(np.array([[N, R, U]])), tmp_path / "g.pgm")
    assert (tmp_path / "g.pgm").read_bytes() == b"P5\n3 1\n255\n" + bytes([0, 255, 128])
