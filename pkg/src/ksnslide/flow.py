"""Depression filling, D8 routing, topological ordering and drainage area."""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .raster import AlignmentError, GridHeader, Raster

__all__ = [
    "FlowField",
    "EmptyDomainError",
    "FlowConsistencyError",
    "NEIGHBOURS",
    "fill_depressions",
    "d8_flow",
    "accumulate",
    "contributing_cells",
    "flow_path_length",
]

# (drow, dcol) in tie-break order: cardinals E, N, W, S then diagonals NE, NW, SW, SE
NEIGHBOURS = ((0, 1), (-1, 0), (0, -1), (1, 0), (-1, 1), (-1, -1), (1, -1), (1, 1))
_SQRT2 = math.sqrt(2.0)


class EmptyDomainError(ValueError):
    """Raster has no valid cells to route over."""


class FlowConsistencyError(RuntimeError):
    """DEM contains a pit that should have been filled."""


@dataclass(frozen=True)
class FlowField:
    """Per-cell D8 receivers plus a baselevel-first topological order.

    ``receiver[i] == i`` marks outlets, pits and nodata cells. ``stack`` lists
    every valid cell exactly once, each after its receiver; nodata cells are
    not part of the stack.
    """

    header: GridHeader
    receiver: np.ndarray
    stack: np.ndarray
    valid: np.ndarray

    @property
    def size(self) -> int:
        return self.header.size

    def step_length(self) -> np.ndarray:
        """Distance in metres from each cell to its receiver (0 at roots)."""
        ncols = self.header.ncols
        idx = np.arange(self.size)
        dr = np.abs(self.receiver // ncols - idx // ncols)
        dc = np.abs(self.receiver % ncols - idx % ncols)
        steps = np.where((dr + dc) == 2, _SQRT2, (dr + dc).astype(float))
        return steps * self.header.cell_size

    def roots(self) -> np.ndarray:
        idx = np.arange(self.size)
        return idx[self.valid & (self.receiver == idx)]

    def donor_counts(self) -> np.ndarray:
        idx = np.arange(self.size)
        nonroot = self.valid & (self.receiver != idx)
        return np.bincount(self.receiver[nonroot], minlength=self.size)


def _edge_mask(valid: np.ndarray) -> np.ndarray:
    """Valid cells on the grid border or next to a nodata cell."""
    padded = np.pad(valid, 1, constant_values=False)
    nrows, ncols = valid.shape
    edge = np.zeros_like(valid)
    for dr, dc in NEIGHBOURS:
        edge |= ~padded[1 + dr : 1 + dr + nrows, 1 + dc : 1 + dc + ncols]
    return edge & valid


def _priority_flood(z: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Priority-flood fill (epsilon = 0) returning the filled surface and pop order.

    Cells raised to, or already at, the level of the cell that reached them
    go through a FIFO pit queue, so a flat is visited breadth-first from its
    spill point.
    """
    nrows, ncols = z.shape
    # one-cell closed border so the inner loop needs no bounds checks
    width = ncols + 2
    fl = np.pad(z.astype(float), 1).ravel().tolist()
    cl = (~np.pad(valid, 1, constant_values=False)).ravel().tolist()
    edge = np.pad(_edge_mask(valid), 1, constant_values=False).ravel()
    heap: list[tuple[float, int, int]] = []
    counter = 0
    for i in np.flatnonzero(edge).tolist():
        heap.append((fl[i], counter, i))
        counter += 1
        cl[i] = True
    heapq.heapify(heap)
    pit: deque[int] = deque()
    order: list[int] = []
    deltas = [dr * width + dc for dr, dc in NEIGHBOURS]
    push = heapq.heappush
    pop = heapq.heappop
    while heap or pit:
        c = pit.popleft() if pit else pop(heap)[2]
        order.append(c)
        zc = fl[c]
        for d in deltas:
            n = c + d
            if cl[n]:
                continue
            cl[n] = True
            if fl[n] <= zc:
                fl[n] = zc
                pit.append(n)
            else:
                push(heap, (fl[n], counter, n))
                counter += 1
    filled = np.array(fl).reshape(nrows + 2, width)[1:-1, 1:-1]
    o = np.array(order, dtype=np.int64)
    o = (o // width - 1) * ncols + (o % width - 1)
    return filled.copy(), o


def fill_depressions(dem: Raster) -> Raster:
    """Fill every closed depression so that all cells drain to the grid edge."""
    valid = dem.valid_mask()
    if not valid.any():
        raise EmptyDomainError("DEM has no valid cells")
    filled, _ = _priority_flood(dem.data, valid)
    out = np.where(valid, filled, dem.header.nodata)
    return Raster(dem.header, out.astype(float))


def _shifted(a: np.ndarray, dr: int, dc: int, fill) -> np.ndarray:
    """``out[r, c] = a[r + dr, c + dc]`` with ``fill`` outside the grid."""
    nrows, ncols = a.shape
    out = np.full_like(a, fill)
    r0, r1 = max(0, -dr), min(nrows, nrows - dr)
    c0, c1 = max(0, -dc), min(ncols, ncols - dc)
    out[r0:r1, c0:c1] = a[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
    return out


def _build_stack(receiver: np.ndarray, valid: np.ndarray) -> np.ndarray:
    n = receiver.size
    idx = np.arange(n)
    is_root = valid & (receiver == idx)
    nonroot = valid & ~is_root
    donors_sorted = idx[nonroot][np.argsort(receiver[nonroot], kind="stable")]
    counts = np.bincount(receiver[nonroot], minlength=n)
    offsets = np.concatenate([[0], np.cumsum(counts)]).tolist()
    donors = donors_sorted.tolist()
    stack: list[int] = []
    todo: list[int] = []
    for root in np.flatnonzero(is_root).tolist():
        todo.append(root)
        while todo:
            c = todo.pop()
            stack.append(c)
            todo.extend(donors[offsets[c] : offsets[c + 1]])
    out = np.array(stack, dtype=np.int64)
    if out.size != int(valid.sum()):
        raise FlowConsistencyError("receiver graph contains a cycle")
    return out


def d8_flow(filled_dem: Raster, allow_pits: bool = False) -> FlowField:
    """Steepest-descent D8 receivers for a depression-filled DEM.

    Slopes use ``cell_size`` for cardinal and ``cell_size * sqrt(2)`` for
    diagonal neighbours. Ties go to the first neighbour in ``NEIGHBOURS``
    order, which puts cardinals ahead of diagonals. Cells on a flat (no lower
    neighbour) drain to the equal-height neighbour reached first by a priority
    flood; grid-edge cells without a lower neighbour are outlets.

    Parameters
    ----------
    filled_dem : Raster
        Output of :func:`fill_depressions` (or any pit-free surface).
    allow_pits : bool
        If True, interior cells with no lower or equal neighbour become
        self-receiving pits instead of raising :class:`FlowConsistencyError`.
    """
    h = filled_dem.header
    valid = filled_dem.valid_mask()
    if not valid.any():
        raise EmptyDomainError("DEM has no valid cells")
    z = np.where(valid, filled_dem.data.astype(float), np.nan)
    nrows, ncols = h.shape
    idx = np.arange(h.size).reshape(h.shape)

    slopes = np.empty((8, nrows, ncols))
    targets = np.empty((8, nrows, ncols), dtype=np.int64)
    for k, (dr, dc) in enumerate(NEIGHBOURS):
        dist = h.cell_size * (_SQRT2 if dr and dc else 1.0)
        zn = _shifted(z, dr, dc, np.nan)
        s = (z - zn) / dist
        slopes[k] = np.where(np.isnan(s), -np.inf, s)
        targets[k] = _shifted(idx, dr, dc, -1)
    best = np.argmax(slopes, axis=0)
    best_slope = np.take_along_axis(slopes, best[None], axis=0)[0]
    best_target = np.take_along_axis(targets, best[None], axis=0)[0]
    receiver = np.where(valid & (best_slope > 0), best_target, idx)

    edge = _edge_mask(valid)
    unresolved = valid & ~(best_slope > 0) & ~edge
    if unresolved.any():
        _, order = _priority_flood(z, valid)
        rank = np.full(h.size, np.iinfo(np.int64).max, dtype=np.int64)
        rank[order] = np.arange(order.size)
        rank2 = rank.reshape(h.shape)
        best_rank = np.full(h.shape, np.iinfo(np.int64).max, dtype=np.int64)
        flat_target = idx.copy()
        for k, (dr, dc) in enumerate(NEIGHBOURS):
            zn = _shifted(z, dr, dc, np.nan)
            rn = _shifted(rank2, dr, dc, np.iinfo(np.int64).max)
            ok = unresolved & (zn == z) & (rn < rank2) & (rn < best_rank)
            best_rank = np.where(ok, rn, best_rank)
            flat_target = np.where(ok, targets[k], flat_target)
        receiver = np.where(unresolved, flat_target, receiver)
        pits = unresolved & (flat_target == idx)
        if pits.any() and not allow_pits:
            r, c = np.argwhere(pits)[0]
            raise FlowConsistencyError(
                f"{int(pits.sum())} unfilled pit cell(s); first at row {r}, col {c} (z={z[r, c]})"
            )

    receiver = receiver.ravel().astype(np.int64)
    stack = _build_stack(receiver, valid.ravel())
    return FlowField(h, receiver, stack, valid.ravel().copy())


def contributing_cells(ff: FlowField) -> np.ndarray:
    """Number of cells (including itself) draining through each cell; 0 on nodata."""
    counts = ff.valid.astype(np.int64)
    rec = ff.receiver.tolist()
    acc = counts.tolist()
    for c in ff.stack[::-1].tolist():
        r = rec[c]
        if r != c:
            acc[r] += acc[c]
    return np.array(acc, dtype=np.int64)


def accumulate(ff: FlowField) -> Raster:
    """Drainage area in m^2 (cell count times cell area); nodata off-domain."""
    counts = contributing_cells(ff)
    area = counts * ff.header.cell_area
    area = np.where(ff.valid, area, ff.header.nodata)
    return Raster(ff.header, area.astype(float).reshape(ff.header.shape))


def flow_path_length(ff: FlowField, stop_mask: Raster) -> Raster:
    """Along-flow distance (m) from each cell to the first ``stop_mask`` cell.

    Masked cells are 0. Cells whose path ends at an unmasked outlet are
    nodata.
    """
    if not ff.header.aligned(stop_mask.header):
        raise AlignmentError("stop mask is not aligned with the flow field")
    stop = (stop_mask.data.astype(bool) & stop_mask.valid_mask()).ravel()
    step = ff.step_length().tolist()
    stop = stop.tolist()
    rec = ff.receiver.tolist()
    nan = float("nan")
    dist = [nan] * ff.size
    for c in ff.stack.tolist():
        if stop[c]:
            dist[c] = 0.0
        elif rec[c] != c:
            dist[c] = dist[rec[c]] + step[c]
    return Raster.from_masked(ff.header, np.array(dist))
