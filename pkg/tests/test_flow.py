import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ksnslide.flow import (
    NEIGHBOURS,
    EmptyDomainError,
    FlowConsistencyError,
    FlowField,
    accumulate,
    contributing_cells,
    d8_flow,
    fill_depressions,
    flow_path_length,
)
from ksnslide.raster import AlignmentError, GridHeader, Raster


def grid(z, cs=30.0):
    z = np.asarray(z, dtype=float)
    return Raster(GridHeader(z.shape[1], z.shape[0], 0.0, 0.0, cs), z)


def route(z, cs=30.0):
    return d8_flow(fill_depressions(grid(z, cs)))


# --- filling ------------------------------------------------------------------


def test_fill_leaves_plane_unchanged():
    yy, xx = np.mgrid[0:6, 0:7]
    plane = grid(3.0 * xx + 0.5 * yy)
    assert fill_depressions(plane) == plane


def test_fill_raises_pit_to_spill_height():
    z = [[5, 5, 5], [5, 1, 4], [5, 5, 5]]
    filled = fill_depressions(grid(z))
    assert filled.data[1, 1] == 4.0
    assert filled.data[1, 2] == 4.0 and filled.data[0, 0] == 5.0


def test_fill_single_cell():
    one = grid([[3.25]])
    assert fill_depressions(one) == one


def test_fill_all_nodata():
    with pytest.raises(EmptyDomainError):
        fill_depressions(grid([[-9999.0, -9999.0]]))


surfaces = arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
                  elements=st.sampled_from([0.0, 1.0, 2.0, 3.0, 5.0, 8.0, -9999.0]))


@settings(max_examples=80, deadline=None)
@given(z=surfaces)
def test_fill_properties(z):
    if not (z != -9999.0).any():
        return
    dem = grid(z)
    filled = fill_depressions(dem)
    v = dem.valid_mask()
    assert np.array_equal(filled.valid_mask(), v)
    assert np.all(filled.data[v] >= dem.data[v])
    assert fill_depressions(filled) == filled


# --- routing ------------------------------------------------------------------------


def test_east_tilted_plane():
    yy, xx = np.mgrid[0:4, 0:5]
    ff = route(10.0 - xx)
    idx = np.arange(20).reshape(4, 5)
    rec = ff.receiver.reshape(4, 5)
    assert np.array_equal(rec[:, :4], idx[:, 1:])
    assert np.array_equal(rec[:, 4], idx[:, 4])


def test_lowest_centre_collects_ring():
    ff = d8_flow(grid([[5, 5, 5], [5, 1, 5], [5, 5, 5]]), allow_pits=True)
    ring = [0, 1, 2, 3, 5, 6, 7, 8]
    assert ff.receiver[ring].tolist() == [4] * 8 and ff.receiver[4] == 4


def test_unfilled_pit_raises():
    with pytest.raises(FlowConsistencyError):
        d8_flow(grid([[5, 5, 5], [5, 1, 5], [5, 5, 5]]))


def test_cardinal_beats_equal_diagonal():
    # unit cells: drop 1 to the east and sqrt(2) to the north-east give identical slopes
    s2 = math.sqrt(2.0)
    z = np.zeros((3, 3))
    z[1, 2] = -1.0
    z[0, 2] = -s2
    ff = d8_flow(grid(z, cs=1.0), allow_pits=True)
    assert (0.0 - (-s2)) / (1.0 * s2) == 1.0
    assert ff.receiver[4] == 5


def test_flat_drains_toward_outlet():
    # a flat shelf draining through one low edge cell
    z = np.full((3, 4), 2.0)
    z[1, 3] = 1.0
    z[0, :] = z[2, :] = 9.0
    z[:, 0] = 9.0
    ff = route(z)
    idx = lambda r, c: r * 4 + c  # noqa: E731
    assert ff.receiver[idx(1, 2)] == idx(1, 3)
    assert ff.receiver[idx(1, 1)] == idx(1, 2)


# --- accumulation -------------------------------------------------------------


def test_chain_accumulates_to_outlet():
    n = 12
    ff = route([np.arange(n, 0, -1.0)])
    acc = accumulate(ff)
    assert acc.data[0, -1] == n * 900.0
    assert acc.data[0, 0] == 900.0


def test_two_chains_join():
    z = np.abs(np.arange(11.0) - 5)[None, :]
    acc = accumulate(route(z))
    assert acc.data[0, 5] == 11 * 900.0


@settings(max_examples=80, deadline=None)
@given(z=surfaces)
def test_mass_conservation_and_monotone(z):
    if not (z != -9999.0).any():
        return
    ff = route(z)
    cells = contributing_cells(ff)
    assert cells[ff.roots()].sum() == ff.valid.sum()
    acc = accumulate(ff).masked().ravel()
    nonroot = ff.valid & (ff.receiver != np.arange(ff.size))
    assert np.all(acc[ff.receiver[nonroot]] >= acc[nonroot])
    # the stack is a topological order: receivers come first
    pos = np.empty(ff.size, dtype=np.int64)
    pos[ff.stack] = np.arange(ff.stack.size)
    assert np.all(pos[ff.receiver[nonroot]] < pos[nonroot])
    assert sorted(ff.stack.tolist()) == np.flatnonzero(ff.valid).tolist()
    # receivers are self or one of the 8 neighbours
    r, c = np.divmod(np.arange(ff.size), z.shape[1])
    rr, rc = np.divmod(ff.receiver, z.shape[1])
    assert np.all((np.abs(rr - r) <= 1) & (np.abs(rc - c) <= 1))


@settings(max_examples=20, deadline=None)
@given(z=surfaces)
def test_routing_is_deterministic(z):
    if not (z != -9999.0).any():
        return
    a, b = route(z), route(z.copy())
    assert np.array_equal(a.receiver, b.receiver) and np.array_equal(a.stack, b.stack)


def test_neighbour_order():
    assert NEIGHBOURS[:4] == ((0, 1), (-1, 0), (0, -1), (1, 0))


# --- path length ----------------------------------------------------------------


def _mask(h, cells):
    m = np.zeros(h.size, dtype=np.int64)
    m[cells] = 1
    return Raster(h, m.reshape(h.shape))


def test_cardinal_path_length():
    ff = route([np.arange(11, 0, -1.0)])
    d = flow_path_length(ff, _mask(ff.header, [10]))
    assert d.data[0, 0] == 300.0 and d.data[0, 10] == 0.0


def test_diagonal_plus_cardinal_length():
    h = GridHeader(3, 3, 0.0, 0.0, 30.0)
    receiver = np.arange(9)
    receiver[0], receiver[4] = 4, 5
    valid = np.zeros(9, dtype=bool)
    valid[[0, 4, 5]] = True
    ff = FlowField(h, receiver, np.array([5, 4, 0]), valid)
    d = flow_path_length(ff, _mask(h, [5]))
    assert d.data[0, 0] == pytest.approx(30.0 * (1.0 + math.sqrt(2.0)), rel=1e-15)


def test_unmasked_outlet_gives_nodata():
    ff = route([np.arange(5, 0, -1.0)])
    d = flow_path_length(ff, _mask(ff.header, []))
    assert not d.valid_mask().any()


def test_path_length_misaligned_mask():
    ff = route([np.arange(5, 0, -1.0)])
    with pytest.raises(AlignmentError):
        flow_path_length(ff, Raster(GridHeader(4, 1, 0, 0, 30.0), np.zeros((1, 4), dtype=np.int64)))
