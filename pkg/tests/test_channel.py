import csv

import numpy as np
import pytest

from ksnslide.channel import (
    EmptyNetworkError,
    delineate_basins,
    donor_channel_index,
    extract_channels,
    fd2ch,
    nearest_channel_node,
    rf2ch,
    write_channel_csv,
)
from ksnslide.flow import accumulate, d8_flow, fill_depressions
from ksnslide.raster import GridHeader, Raster

ND = -9999.0


def network(z, threshold, cs=30.0):
    z = np.asarray(z, dtype=float)
    dem = Raster(GridHeader(z.shape[1], z.shape[0], 0.0, 0.0, cs), z)
    filled = fill_depressions(dem)
    ff = d8_flow(filled)
    acc = accumulate(ff)
    return ff, acc, extract_channels(ff, acc, threshold, dem=filled), dem


# Two headwater chains meeting at J = (2, 1), draining south to the outlet (4, 1);
# the hillslope cell H = (2, 0) drains straight into the junction pixel.
Y = [
    [10.0, ND, 10.0],
    [9.0, ND, 9.0],
    [8.5, 5.0, ND],
    [ND, 4.9, ND],
    [ND, 3.0, ND],
]


def cell(r, c, ncols=3):
    return r * ncols + c


def test_threshold_one_takes_every_cell():
    ff, acc, net, _ = network(Y, 1)
    assert net.n_nodes == int(ff.valid.sum())


def test_y_network_orders_and_junction():
    ff, acc, net, _ = network(Y, 2)
    node = net.node_of_cell
    assert node[cell(0, 0)] == -1  # area 1 < threshold
    j = node[cell(2, 1)]
    assert net.junctions.tolist() == [j]
    assert net.strahler[node[cell(1, 0)]] == 1
    assert net.strahler[j] == 2 and net.strahler[node[cell(4, 1)]] == 2
    assert net.outlets.tolist() == [node[cell(4, 1)]]
    assert net.flow_dist[node[cell(4, 1)]] == 0.0


def test_y_network_three_basins():
    ff, acc, net, _ = network(Y, 2)
    lab = delineate_basins(ff, net).data.ravel()
    assert sorted(set(lab[ff.valid].tolist())) == [1, 2, 3]
    # each tributary head drains into its own basin
    assert lab[cell(0, 0)] == lab[cell(1, 0)]
    assert lab[cell(0, 2)] == lab[cell(1, 2)]
    assert lab[cell(0, 0)] != lab[cell(0, 2)]
    # the junction pixel and the cell draining into it belong to the downstream segment
    assert lab[cell(2, 0)] == lab[cell(2, 1)] == lab[cell(4, 1)]


def test_single_channel_single_basin():
    ff, acc, net, _ = network([np.arange(8, 0, -1.0)], 3)
    lab = delineate_basins(ff, net)
    assert set(lab.data.ravel().tolist()) == {1}


def test_tributary_keeps_trunk_order():
    # two order-1 heads make an order-2 trunk; a third head joins it lower down
    z = np.array([
        [9.0, ND, 9.0, ND, ND],
        [ND, 8.0, ND, ND, ND],
        [ND, 7.0, ND, 9.0, ND],
        [ND, ND, 6.0, ND, ND],
        [ND, ND, 5.0, ND, ND],
    ])
    ff, acc, net, _ = network(z, 1)
    node = net.node_of_cell
    assert net.strahler[node[1 * 5 + 1]] == 2
    assert net.strahler[node[2 * 5 + 3]] == 1
    assert net.strahler[node[3 * 5 + 2]] == 2
    assert net.strahler[node[4 * 5 + 2]] == 2


def test_empty_network():
    ff = d8_flow(Raster(GridHeader(3, 1, 0, 0, 30.0), np.array([[3.0, 2.0, 1.0]])))
    with pytest.raises(EmptyNetworkError):
        extract_channels(ff, accumulate(ff), 10)


def strahler_rule(net):
    orders = [[] for _ in range(net.n_nodes)]
    for k, d in enumerate(net.downstream):
        if d >= 0:
            orders[d].append(net.strahler[k])
    for k, up in enumerate(orders):
        if not up:
            expect = 1
        else:
            top = max(up)
            expect = top + 1 if up.count(top) >= 2 else top
        assert net.strahler[k] == expect


def test_strahler_rule_everywhere(fluvial):
    dem, ff, acc = fluvial
    strahler_rule(extract_channels(ff, acc, 5, dem))


def test_strahler_mirror_invariant(fluvial):
    dem, ff, acc = fluvial
    net = extract_channels(ff, acc, 5, dem)
    mirrored = dem.with_data(dem.data[:, ::-1].copy())
    ffm = d8_flow(mirrored)
    netm = extract_channels(ffm, accumulate(ffm), 5, mirrored)
    a = np.zeros(dem.header.size, dtype=np.int64)
    b = np.zeros(dem.header.size, dtype=np.int64)
    a[net.cells] = net.strahler
    b[netm.cells] = netm.strahler
    assert np.array_equal(a.reshape(dem.header.shape), b.reshape(dem.header.shape)[:, ::-1])


def test_threshold_nesting(fluvial):
    dem, ff, acc = fluvial
    small = extract_channels(ff, acc, 5).channel_mask().data.astype(bool)
    large = extract_channels(ff, acc, 40).channel_mask().data.astype(bool)
    assert np.all(small[large])
    assert large.sum() < small.sum()


def test_flow_distance_grows_upstream(fluvial):
    dem, ff, acc = fluvial
    net = extract_channels(ff, acc, 5, dem)
    up = net.downstream >= 0
    assert np.all(net.flow_dist[up] > net.flow_dist[net.downstream[up]])


# --- distance covariates ------------------------------------------------------


def test_fd2ch_five_steps():
    ff, acc, net, _ = network([np.arange(8, 0, -1.0)], 6)
    d = fd2ch(ff, net)
    assert d.data[0, 0] == pytest.approx(0.15, rel=1e-15)
    assert d.data[0, 5] == 0.0


def test_fd2ch_zero_iff_channel(fluvial):
    dem, ff, acc = fluvial
    net = extract_channels(ff, acc, 5, dem)
    d = fd2ch(ff, net).masked().ravel()
    chan = net.node_of_cell >= 0
    assert np.all(d[chan] == 0.0)
    assert np.all(d[~chan & np.isfinite(d)] > 0.0)


def test_fd2ch_nodata_when_path_misses_channel():
    # the two-cell chain on the right leaves the grid before reaching the threshold
    z = np.array([[1.0, 2.0, 3.0, ND, 3.0, 2.0]])
    ff, acc, net, _ = network(z, 3)
    d = fd2ch(ff, net)
    assert d.valid_mask().tolist() == [[True, True, True, False, False, False]]


def test_rf2ch_relief_km():
    ff, acc, net, dem = network([[1500.0, 1300.0, 1200.0]], 3)
    r = rf2ch(ff, net, dem)
    assert r.data[0, 0] == pytest.approx(0.3, rel=1e-12)
    assert r.data[0, 2] == 0.0


def test_rf2ch_negative_flagged():
    # the pit at (1, 1) is filled to 4 m, but relief is measured on the raw DEM
    z = [[9.0] * 5, [5.0, 1.0, 4.0, 3.0, 2.0], [9.0] * 5]
    ff, acc, _, dem = network(z, 1)
    net = extract_channels(ff, acc, int(acc.data[1, 4] / 900.0))
    assert net.n_nodes == 1
    qa = {}
    r = rf2ch(ff, net, dem, qa)
    assert qa["negative_relief"] == 1
    assert r.data[1, 1] == pytest.approx(-0.001)


def test_donor_index():
    ff, acc, net, _ = network(Y, 2)
    idx = donor_channel_index(ff, net).data.ravel()
    node = net.node_of_cell
    chan = node >= 0
    assert np.array_equal(idx[chan], node[chan])
    assert idx[cell(0, 0)] == node[cell(1, 0)]
    assert idx[cell(0, 2)] == node[cell(1, 2)]
    assert idx[cell(0, 0)] != idx[cell(0, 2)]


def test_basins_partition(fluvial):
    dem, ff, acc = fluvial
    net = extract_channels(ff, acc, 10, dem)
    lab = delineate_basins(ff, net).data.ravel()
    donor = donor_channel_index(ff, net).data.ravel()
    reaches = donor >= 0
    assert np.all(lab[reaches] >= 1) and np.all(lab[~reaches] == 0)
    seg = net.segments()
    assert np.array_equal(lab[reaches], seg[donor[reaches]] + 1)
    assert lab.max() == seg.max() + 1


def test_nearest_channel_node_euclidean():
    ff, acc, net, _ = network(Y, 2)
    node, dist = nearest_channel_node(net, [(45.0, 15.0)])
    assert net.cells[node[0]] == cell(4, 1)
    assert dist[0] == 0.0


def test_channel_csv(tmp_path, fluvial):
    dem, ff, acc = fluvial
    net = extract_channels(ff, acc, 20, dem)
    p = tmp_path / "ch.csv"
    write_channel_csv(net, p)
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["node_id", "x_m", "y_m", "z_m", "area_m2", "strahler",
                       "downstream_id", "flow_dist_m", "chi", "ksn"]
    assert len(rows) == net.n_nodes + 1
