import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ksnslide.channel import ChannelNetwork, donor_channel_index, extract_channels
from ksnslide.raster import GridHeader, Raster
from ksnslide.steepness import (
    FillError,
    KsnParams,
    chi_transform,
    concavity_sweep,
    ksn_estimate,
    ksn_from_slope_area,
    ksn_raster,
    ksn_to_hillslopes,
    masked_nearest_fill,
)


def chain(area, z=None, dx=30.0):
    """An unbranched channel, node 0 at the outlet."""
    n = len(area)
    h = GridHeader(n, 1, 0.0, 0.0, dx)
    down = np.arange(-1, n - 1)
    donors = np.r_[np.ones(n - 1, dtype=np.int64), 0]
    return ChannelNetwork(
        header=h, cells=np.arange(n), z=np.zeros(n) if z is None else np.asarray(z, float),
        area=np.asarray(area, float), strahler=np.ones(n, dtype=np.int64), downstream=down,
        flow_dist=np.arange(n) * dx, n_donors=donors, node_of_cell=np.arange(n), threshold_pixels=1,
    )


def test_chi_equals_distance_at_reference_area():
    net = chain(np.ones(12))
    assert np.array_equal(chi_transform(net, 0.5).chi, net.flow_dist)


def test_chi_half_distance_for_area_four():
    net = chain(np.full(12, 4.0))
    assert np.array_equal(chi_transform(net, 0.5).chi, net.flow_dist / 2)


def test_chi_outlet_zero_and_monotone(fluvial):
    dem, ff, acc = fluvial
    net = extract_channels(ff, acc, 5, dem)
    prof = chi_transform(net, 0.45)
    assert np.all(prof.chi[net.outlets] == 0.0)
    up = net.downstream >= 0
    assert np.all(prof.chi[up] > prof.chi[net.downstream[up]])


def test_chi_theta_zero_is_distance(fluvial):
    dem, ff, acc = fluvial
    net = extract_channels(ff, acc, 5, dem)
    assert np.array_equal(chi_transform(net, 0.0).chi, net.flow_dist)


def test_chi_rejects_nonpositive_area():
    with pytest.raises(ValueError):
        chi_transform(chain([1.0, 0.0, 1.0]), 0.5)


def test_slope_area_spot_check():
    assert ksn_from_slope_area(0.05, 1e6, 0.5) == pytest.approx(50.0, rel=1e-15)


def test_linear_profile_gives_constant_ksn():
    area = np.linspace(5e6, 1e5, 30)
    net = chain(area)
    chi = chi_transform(net, 0.5).chi
    net = chain(area, z=200.0 + 100.0 * chi)
    ksn = ksn_estimate(chi_transform(net, 0.5), KsnParams())
    assert np.allclose(ksn, 100.0, rtol=1e-9)


def test_flat_profile_gives_zero():
    net = chain(np.linspace(5e6, 1e5, 15), z=np.full(15, 42.0))
    assert np.all(ksn_estimate(chi_transform(net, 0.5), KsnParams()) == 0.0)


def test_negative_slopes_floored():
    area = np.linspace(5e6, 1e5, 15)
    chi = chi_transform(chain(area), 0.5).chi
    net = chain(area, z=1000.0 - 50.0 * chi)
    assert np.all(ksn_estimate(chi_transform(net, 0.5), KsnParams()) == 0.0)


def test_degenerate_window_is_nan():
    # a single-node reach has one chi value in its window
    net = chain([1e6])
    assert np.isnan(ksn_estimate(chi_transform(net, 0.5), KsnParams())).all()


@pytest.mark.parametrize("c, exact", [(4.0, True), (3.0, False)])
def test_ksn_scales_with_elevation(fluvial, c, exact):
    dem, ff, acc = fluvial
    p = KsnParams(0.5, 9, 5)
    _, _, k1, _ = ksn_raster(ff, acc, dem, p)
    _, _, k2, _ = ksn_raster(ff, acc, dem.with_data(dem.data * c), p)
    ok = np.isfinite(k1)
    if exact:
        assert np.array_equal(k2[ok], c * k1[ok])
    else:
        assert np.allclose(k2[ok], c * k1[ok], rtol=1e-12, atol=1e-9)


def test_windows_do_not_cross_junctions(fluvial):
    dem, ff, acc = fluvial
    net = extract_channels(ff, acc, 5, dem)
    prof = chi_transform(net, 0.5)
    # raising one reach by a constant must not change estimates on any other reach
    seg = prof.segment
    target = np.bincount(seg).argmax()
    z2 = prof.z.copy()
    z2[seg == target] += 500.0
    base = ksn_estimate(prof, KsnParams())
    moved = ksn_estimate(type(prof)(prof.chi, z2, prof.flow_dist, prof.area, prof.theta, seg), KsnParams())
    other = seg != target
    assert np.array_equal(base[other], moved[other], equal_nan=True)


# --- hillslopes ------------------------------------------------------------------


def test_hillslope_disaggregation(fluvial):
    dem, ff, acc = fluvial
    net, prof, ksn, rast = ksn_raster(ff, acc, dem, KsnParams(0.5, 9, 5))
    donor = donor_channel_index(ff, net).data.ravel()
    vals = rast.masked().ravel()
    chan = net.node_of_cell >= 0
    assert np.array_equal(vals[chan], ksn[net.node_of_cell[chan]], equal_nan=True)
    for d in np.unique(donor[donor >= 0])[:50]:
        group = vals[donor == d]
        assert np.all(group == group[0]) or np.all(np.isnan(group))


def test_hillslope_nodata_donor():
    donor = Raster(GridHeader(3, 1, 0, 0, 1.0, -1), np.array([[0, -1, 1]]))
    out = ksn_to_hillslopes([5.0, np.nan], donor)
    assert out.valid_mask().tolist() == [[True, False, False]]
    assert out.data[0, 0] == 5.0


# --- masked nearest fill ---------------------------------------------------------------


def brute_force_fill(values, masked):
    out = values.copy()
    nr, nc = values.shape
    src = [(r, c) for r in range(nr) for c in range(nc) if not masked[r, c]]
    for r in range(nr):
        for c in range(nc):
            if masked[r, c]:
                best = min(src, key=lambda s: ((s[0] - r) ** 2 + (s[1] - c) ** 2, s[0] * nc + s[1]))
                out[r, c] = values[best]
    return out


def test_fill_empty_mask_is_identity():
    r = Raster(GridHeader(3, 3, 0, 0, 1.0), np.arange(9.0).reshape(3, 3))
    assert masked_nearest_fill(r, Raster(r.header, np.zeros((3, 3), dtype=np.int64))) == r


def test_fill_single_masked_cell():
    r = Raster.from_masked(GridHeader(2, 1, 0, 0, 1.0), np.array([[7.5, np.nan]]))
    assert masked_nearest_fill(r).data.tolist() == [[7.5, 7.5]]


def test_fill_block_in_gradient():
    yy, xx = np.mgrid[0:8, 0:8]
    values = (3.0 * xx + 17.0 * yy).astype(float)
    m = np.zeros((8, 8), dtype=bool)
    m[3:5, 4:6] = True
    h = GridHeader(8, 8, 0, 0, 10.0)
    out = masked_nearest_fill(Raster(h, values), Raster(h, m.astype(np.int64)))
    assert np.array_equal(out.data, brute_force_fill(values, m))


@settings(max_examples=40, deadline=None)
@given(m=arrays(bool, st.tuples(st.integers(1, 7), st.integers(1, 7))))
def test_fill_matches_brute_force(m):
    if m.all():
        return
    rng = np.random.default_rng(m.size)
    values = rng.integers(0, 50, m.shape).astype(float)
    h = GridHeader(m.shape[1], m.shape[0], 0, 0, 1.0)
    out = masked_nearest_fill(Raster(h, values), Raster(h, m.astype(np.int64)))
    assert np.array_equal(out.data, brute_force_fill(values, m))


def test_fill_without_source():
    r = Raster.from_masked(GridHeader(2, 1, 0, 0, 1.0), np.array([[np.nan, np.nan]]))
    with pytest.raises(FillError):
        masked_nearest_fill(r)


# --- sweep ---------------------------------------------------------------------------------


def test_singleton_sweep_matches_default(fluvial):
    dem, ff, acc = fluvial
    res = concavity_sweep(ff, acc, dem, [0.5], [10])
    _, _, _, rast = ksn_raster(ff, acc, dem, KsnParams(0.5, 9, 10))
    assert res.rasters[(0.5, 10)] == rast
    assert res.correlations == []


def test_duplicate_theta(fluvial, tmp_path):
    dem, ff, acc = fluvial
    res = concavity_sweep(ff, acc, dem, [0.5, 0.5, 0.4], [10])
    assert len(res.rasters) == 2
    rows = {(a, b): rho for a, b, _, rho, _ in res.correlations}
    assert rows[(0.5, 0.5)] == 1.0
    res.write_correlations(tmp_path / "c.csv")
    head = next(csv.reader((tmp_path / "c.csv").open()))
    assert head == ["theta_a", "theta_b", "threshold", "spearman_rho", "n_nodes"]


def test_params_validation():
    with pytest.raises(ValueError):
        KsnParams(theta=1.0)
    with pytest.raises(ValueError):
        KsnParams(window_nodes=8)
