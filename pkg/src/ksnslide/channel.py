"""Channel extraction, Strahler ordering, junction basins and channel-distance covariates."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .flow import FlowField, flow_path_length
from .raster import AlignmentError, Raster

__all__ = [
    "ChannelNetwork",
    "EmptyNetworkError",
    "extract_channels",
    "delineate_basins",
    "donor_channel_index",
    "fd2ch",
    "rf2ch",
    "nearest_channel_node",
    "write_channel_csv",
]

log = logging.getLogger(__name__)

INT_NODATA = -1


class EmptyNetworkError(ValueError):
    """No cell reaches the channel threshold."""


@dataclass(frozen=True)
class ChannelNetwork:
    """Channel nodes ordered downstream-first (outlets before their donors).

    ``downstream[k]`` is the node index of the receiver, or -1 at outlets.
    ``node_of_cell`` maps every grid cell to its node index (-1 off-network).
    """

    header: object
    cells: np.ndarray
    z: np.ndarray
    area: np.ndarray
    strahler: np.ndarray
    downstream: np.ndarray
    flow_dist: np.ndarray
    n_donors: np.ndarray
    node_of_cell: np.ndarray
    threshold_pixels: int

    @property
    def n_nodes(self) -> int:
        return int(self.cells.size)

    @property
    def junctions(self) -> np.ndarray:
        return np.flatnonzero(self.n_donors >= 2)

    @property
    def outlets(self) -> np.ndarray:
        return np.flatnonzero(self.downstream < 0)

    @property
    def heads(self) -> np.ndarray:
        return np.flatnonzero(self.n_donors == 0)

    def channel_mask(self) -> Raster:
        mask = (self.node_of_cell >= 0).astype(np.int64)
        return Raster(replace(self.header, nodata=INT_NODATA), mask.reshape(self.header.shape))

    def xy(self) -> np.ndarray:
        """Cell-centre coordinates of every node, shape ``(n_nodes, 2)``."""
        h = self.header
        rows, cols = np.divmod(self.cells, h.ncols)
        x = h.x_origin + (cols + 0.5) * h.cell_size
        y = h.y_max - (rows + 0.5) * h.cell_size
        return np.column_stack([x, y])

    def segments(self) -> np.ndarray:
        """Segment id per node for junction-to-junction reaches (dense from 0).

        A segment runs from a channel head, or from a junction pixel, down
        to the pixel just above the next junction (or to the outlet). The
        junction pixel itself heads the downstream segment.
        """
        seg = np.full(self.n_nodes, -1, dtype=np.int64)
        down = self.downstream
        junction = self.n_donors >= 2
        n_seg = 0
        for k in range(self.n_nodes):
            d = down[k]
            if d < 0 or junction[d]:
                seg[k] = n_seg
                n_seg += 1
            else:
                seg[k] = seg[d]
        return seg


def extract_channels(ff: FlowField, acc: Raster, threshold_pixels: int = 1000,
                     dem: Raster | None = None) -> ChannelNetwork:
    """Channel cells are those with drainage area >= ``threshold_pixels`` cells.

    Node order follows the flow stack, so every node comes after its
    downstream neighbour. Flow distance is measured along D8 steps from
    each outlet; ``dem`` supplies node elevations (NaN if omitted).
    """
    if threshold_pixels < 1:
        raise ValueError("threshold_pixels must be >= 1")
    if not ff.header.aligned(acc.header):
        raise AlignmentError("accumulation raster is not aligned with the flow field")
    area = acc.masked().ravel()
    min_area = threshold_pixels * ff.header.cell_area
    is_channel = ff.valid & (np.nan_to_num(area, nan=-1.0) >= min_area)
    order = ff.stack[is_channel[ff.stack]]
    if order.size == 0:
        raise EmptyNetworkError(f"no cell has drainage area >= {threshold_pixels} pixels")

    node_of_cell = np.full(ff.size, -1, dtype=np.int64)
    node_of_cell[order] = np.arange(order.size)
    rec = ff.receiver[order]
    downstream = np.where(rec == order, -1, node_of_cell[rec])
    if np.any((rec != order) & (downstream < 0)):
        raise AssertionError("channel receiver left the channel set")

    n = order.size
    n_donors = np.bincount(downstream[downstream >= 0], minlength=n)

    step = ff.step_length()[order]
    flow_dist = np.zeros(n)
    for k in range(n):
        d = downstream[k]
        if d >= 0:
            flow_dist[k] = flow_dist[d] + step[k]

    # Strahler: upstream-first pass over reversed node order
    strahler = np.zeros(n, dtype=np.int64)
    best = np.zeros(n, dtype=np.int64)
    best_count = np.zeros(n, dtype=np.int64)
    down_list = downstream.tolist()
    for k in range(n - 1, -1, -1):
        if best[k] == 0:
            s = 1
        elif best_count[k] >= 2:
            s = best[k] + 1
        else:
            s = best[k]
        strahler[k] = s
        d = down_list[k]
        if d >= 0:
            if s > best[d]:
                best[d] = s
                best_count[d] = 1
            elif s == best[d]:
                best_count[d] += 1

    z = dem.masked().ravel()[order] if dem is not None else np.full(n, np.nan)
    return ChannelNetwork(
        header=ff.header,
        cells=order,
        z=z,
        area=area[order],
        strahler=strahler,
        downstream=downstream,
        flow_dist=flow_dist,
        n_donors=n_donors,
        node_of_cell=node_of_cell,
        threshold_pixels=int(threshold_pixels),
    )


def _donor_nodes(ff: FlowField, net: ChannelNetwork) -> np.ndarray:
    donor = net.node_of_cell.tolist()
    rec = ff.receiver.tolist()
    for c in ff.stack.tolist():
        if donor[c] < 0 and rec[c] != c:
            donor[c] = donor[rec[c]]
    return np.array(donor, dtype=np.int64)


def donor_channel_index(ff: FlowField, net: ChannelNetwork) -> Raster:
    """Index of the first channel node on each cell's flow path (-1 if none)."""
    donor = _donor_nodes(ff, net)
    donor[~ff.valid] = INT_NODATA
    return Raster(replace(ff.header, nodata=INT_NODATA), donor.reshape(ff.header.shape))


def delineate_basins(ff: FlowField, net: ChannelNetwork) -> Raster:
    """Label each cell with the junction-to-junction segment it first drains into.

    Labels are dense integers from 1 in downstream-first order; cells that
    never reach a channel are nodata (0).
    """
    seg = net.segments()
    donor = _donor_nodes(ff, net)
    labels = np.where(donor >= 0, seg[np.maximum(donor, 0)] + 1, 0)
    return Raster(replace(ff.header, nodata=0), labels.reshape(ff.header.shape))


def fd2ch(ff: FlowField, net: ChannelNetwork) -> Raster:
    """Flow distance to the first channel node, in km."""
    metres = flow_path_length(ff, net.channel_mask())
    return Raster.from_masked(ff.header, metres.masked() / 1000.0)


def rf2ch(ff: FlowField, net: ChannelNetwork, dem: Raster, qa: dict | None = None) -> Raster:
    """Elevation above the first channel node on each cell's flow path, in km.

    Negative values (a cell lower than its channel node, possible on filled
    surfaces) are kept; their count is logged and stored in ``qa`` under
    ``"negative_relief"`` when a dict is given.
    """
    if not ff.header.aligned(dem.header):
        raise AlignmentError("DEM is not aligned with the flow field")
    donor = _donor_nodes(ff, net)
    z = dem.masked().ravel()
    zc = z[net.cells]
    relief = np.where(donor >= 0, z - zc[np.maximum(donor, 0)], np.nan)
    relief[~ff.valid] = np.nan
    n_neg = int(np.sum(relief < 0))
    if n_neg:
        log.warning("rf2ch: %d cell(s) lie below their channel node", n_neg)
    if qa is not None:
        qa["negative_relief"] = n_neg
    return Raster.from_masked(ff.header, relief / 1000.0)


def nearest_channel_node(net: ChannelNetwork, points) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean-nearest channel node per point; returns ``(node index, distance m)``."""
    tree = cKDTree(net.xy())
    dist, node = tree.query(np.asarray(points, dtype=float).reshape(-1, 2))
    return node.astype(np.int64), dist


def write_channel_csv(net: ChannelNetwork, path, chi=None, ksn=None) -> None:
    xy = net.xy()
    chi = np.full(net.n_nodes, np.nan) if chi is None else np.asarray(chi, dtype=float)
    ksn = np.full(net.n_nodes, np.nan) if ksn is None else np.asarray(ksn, dtype=float)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "x_m", "y_m", "z_m", "area_m2", "strahler",
                    "downstream_id", "flow_dist_m", "chi", "ksn"])
        for k in range(net.n_nodes):
            w.writerow([k, repr(float(xy[k, 0])), repr(float(xy[k, 1])), repr(float(net.z[k])),
                        repr(float(net.area[k])), int(net.strahler[k]), int(net.downstream[k]),
                        repr(float(net.flow_dist[k])), repr(float(chi[k])), repr(float(ksn[k]))])
