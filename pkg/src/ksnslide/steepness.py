"""Chi transform and normalised channel steepness (ksn).

ksn is the local gradient of elevation against chi, estimated by ordinary
least squares over a sliding window of channel nodes that never crosses a
junction. Chi uses a reference drainage area of 1 m^2, so ksn is in metres
when theta = 0.5.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import spearmanr

from .channel import ChannelNetwork, donor_channel_index, extract_channels
from .flow import FlowField
from .raster import AlignmentError, Raster

__all__ = [
    "KsnParams",
    "ChiProfile",
    "FillError",
    "ksn_from_slope_area",
    "chi_transform",
    "ksn_estimate",
    "ksn_to_hillslopes",
    "masked_nearest_fill",
    "concavity_sweep",
    "SweepResult",
]

log = logging.getLogger(__name__)

REFERENCE_AREA = 1.0


class FillError(ValueError):
    """No valid source cell to fill from."""


@dataclass(frozen=True)
class KsnParams:
    theta: float = 0.5
    window_nodes: int = 9
    threshold_pixels: int = 1000

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if self.window_nodes < 3 or self.window_nodes % 2 == 0:
            raise ValueError(f"window_nodes must be an odd integer >= 3, got {self.window_nodes}")
        if self.threshold_pixels < 1:
            raise ValueError("threshold_pixels must be >= 1")


@dataclass(frozen=True)
class ChiProfile:
    chi: np.ndarray
    z: np.ndarray
    flow_dist: np.ndarray
    area: np.ndarray
    theta: float
    segment: np.ndarray


def ksn_from_slope_area(slope, area, theta: float = 0.5):
    """Invert ``S = ksn * A**-theta``."""
    return np.asarray(slope) * np.asarray(area, dtype=float) ** theta


def chi_transform(net: ChannelNetwork, theta: float = 0.5) -> ChiProfile:
    """Integrate ``(A0 / A)**theta`` upstream from each outlet (trapezoidal rule)."""
    area = np.asarray(net.area, dtype=float)
    if np.any(~(area > 0)):
        bad = int(np.flatnonzero(~(area > 0))[0])
        raise ValueError(f"node {bad} has non-positive drainage area {area[bad]}")
    integrand = (REFERENCE_AREA / area) ** theta
    chi = np.zeros(net.n_nodes)
    down = net.downstream
    x = net.flow_dist
    for k in range(net.n_nodes):
        d = down[k]
        if d >= 0:
            chi[k] = chi[d] + 0.5 * (integrand[k] + integrand[d]) * (x[k] - x[d])
    return ChiProfile(chi=chi, z=np.asarray(net.z, dtype=float), flow_dist=x.copy(),
                      area=area.copy(), theta=float(theta), segment=net.segments())


def _segment_paths(seg: np.ndarray) -> list[np.ndarray]:
    """Node lists (downstream to upstream) for every junction-free reach."""
    order = np.argsort(seg, kind="stable")
    bounds = np.flatnonzero(np.diff(seg[order])) + 1
    # nodes are stored downstream-first, and a stable sort keeps that order
    return np.split(order, bounds)


def _window_slopes(chi: np.ndarray, z: np.ndarray, half: int) -> np.ndarray:
    n = chi.size
    out = np.full(n, np.nan)
    for i in range(n):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        c = chi[lo:hi]
        if not c.max() > c.min():
            continue
        cc = c - c.mean()
        out[i] = np.dot(cc, z[lo:hi] - z[lo:hi].mean()) / np.dot(cc, cc)
    return out


def ksn_estimate(profile: ChiProfile, params: KsnParams) -> np.ndarray:
    """Per-node ksn: OLS slope of z on chi over a centred window.

    Windows are truncated at reach ends so they never cross a junction.
    Nodes whose window holds fewer than two distinct chi values are NaN.
    Negative slopes are floored at 0.
    """
    half = params.window_nodes // 2
    ksn = np.full(profile.chi.size, np.nan)
    for path in _segment_paths(profile.segment):
        ksn[path] = _window_slopes(profile.chi[path], profile.z[path], half)
    return np.where(np.isnan(ksn), np.nan, np.maximum(ksn, 0.0))


def ksn_to_hillslopes(ksn_nodes, donor_map: Raster) -> Raster:
    """Give every pixel the ksn of the channel node it drains to."""
    ksn_nodes = np.asarray(ksn_nodes, dtype=float)
    donor = donor_map.data.ravel()
    ok = donor_map.valid_mask().ravel() & (donor >= 0)
    out = np.full(donor.size, np.nan)
    out[ok] = ksn_nodes[donor[ok]]
    return Raster.from_masked(donor_map.header, out)


def masked_nearest_fill(r: Raster, mask: Raster | None = None) -> Raster:
    """Replace masked and nodata cells by the value of the nearest valid unmasked cell.

    Distance is Euclidean between cell centres; equidistant sources resolve
    to the lowest cell index.
    """
    valid = r.valid_mask()
    if mask is None:
        masked = np.zeros_like(valid)
    else:
        if not r.header.aligned(mask.header):
            raise AlignmentError("mask is not aligned with the raster")
        masked = mask.valid_mask() & (mask.data != 0)
    source = valid & ~masked
    target = ~source
    if not target.any():
        return r
    if not source.any():
        raise FillError("no valid unmasked cell to fill from")
    src_idx = np.flatnonzero(source)
    tgt_idx = np.flatnonzero(target)
    ncols = r.header.ncols
    src_rc = np.column_stack(np.divmod(src_idx, ncols)).astype(float)
    tgt_rc = np.column_stack(np.divmod(tgt_idx, ncols)).astype(float)
    tree = cKDTree(src_rc)
    k = min(8, src_idx.size)
    chosen = np.empty(tgt_idx.size, dtype=np.int64)
    pending = np.arange(tgt_idx.size)
    while pending.size:
        dist, nn = tree.query(tgt_rc[pending], k=k)
        dist = dist.reshape(len(pending), -1)
        nn = nn.reshape(len(pending), -1)
        # squared distances between integer offsets are exact integers
        d2 = np.rint(dist**2)
        tied = d2 == d2[:, :1]
        if k < src_idx.size:
            saturated = tied.all(axis=1)
        else:
            saturated = np.zeros(len(pending), dtype=bool)
        cand = np.where(tied, src_idx[np.minimum(nn, src_idx.size - 1)], np.iinfo(np.int64).max)
        chosen[pending[~saturated]] = cand[~saturated].min(axis=1)
        pending = pending[saturated]
        k = min(2 * k, src_idx.size)
    out = r.data.ravel().copy()
    out[tgt_idx] = out[chosen]
    return Raster(r.header, out.reshape(r.header.shape))


@dataclass
class SweepResult:
    """Per-(theta, threshold) ksn rasters plus pairwise rank correlations."""

    rasters: dict
    node_ksn: dict
    correlations: list

    def write_correlations(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["theta_a", "theta_b", "threshold", "spearman_rho", "n_nodes"])
            for row in self.correlations:
                w.writerow([repr(row[0]), repr(row[1]), row[2], repr(row[3]), row[4]])


def ksn_raster(ff: FlowField, acc: Raster, dem: Raster, params: KsnParams):
    """Run extraction, chi and ksn for one parameter set.

    Returns ``(network, profile, node ksn, per-pixel ksn raster)``.
    """
    net = extract_channels(ff, acc, params.threshold_pixels, dem=dem)
    prof = chi_transform(net, params.theta)
    ksn = ksn_estimate(prof, params)
    donors = donor_channel_index(ff, net)
    return net, prof, ksn, ksn_to_hillslopes(ksn, donors)


def concavity_sweep(ff: FlowField, acc: Raster, dem: Raster, thetas, thresholds,
                    window_nodes: int = 9) -> SweepResult:
    """Recompute ksn over a grid of concavities and channel thresholds.

    For each threshold, every pair of distinct theta entries gets the
    Spearman rank correlation of log(ksn + 1) over channel nodes where both
    estimates exist.
    """
    thetas = list(thetas)
    thresholds = list(thresholds)
    if not thetas or not thresholds:
        raise ValueError("thetas and thresholds must be non-empty")
    rasters, node_ksn, rows = {}, {}, []
    for thr in thresholds:
        for th in thetas:
            key = (float(th), int(thr))
            if key in rasters:
                continue
            _, _, ksn, rast = ksn_raster(ff, acc, dem, KsnParams(th, window_nodes, int(thr)))
            rasters[key] = rast
            node_ksn[key] = ksn
        for a, b in itertools.combinations(range(len(thetas)), 2):
            ka, kb = (float(thetas[a]), int(thr)), (float(thetas[b]), int(thr))
            va, vb = node_ksn[ka], node_ksn[kb]
            ok = np.isfinite(va) & np.isfinite(vb)
            n = int(ok.sum())
            rho = float(spearmanr(np.log1p(va[ok]), np.log1p(vb[ok]))[0]) if n >= 3 else float("nan")
            rows.append((ka[0], kb[0], int(thr), rho, n))
    return SweepResult(rasters, node_ksn, rows)
