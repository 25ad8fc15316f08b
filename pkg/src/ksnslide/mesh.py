"""Structured triangular mesh over a study region and its centroid quadrature.

The lattice has horizontal rows of vertices with alternate rows shifted by
half an edge (the hexagonal motif); half-width triangles close each row at
the bounding-box sides so the lattice tiles the box exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import Polygon, box

from .raster import Raster

__all__ = ["TriMesh", "Quadrature", "DegenerateRegionError", "build_mesh", "quadrature_of",
           "write_mesh_csv"]


class DegenerateRegionError(ValueError):
    """Region is empty or smaller than one triangle."""


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    region: object

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)


@dataclass(frozen=True)
class Quadrature:
    points: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return int(self.weights.size)

    def subset(self, keep) -> "Quadrature":
        return Quadrature(self.points[keep], self.weights[keep])

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def _region_info(region):
    """Return (kind, geometry/mask, bounds, area)."""
    if isinstance(region, Raster):
        inside = region.valid_mask() & (region.data != 0)
        if not inside.any():
            raise DegenerateRegionError("region mask has no cells")
        h = region.header
        rows, cols = np.nonzero(inside)
        x0 = h.x_origin + cols.min() * h.cell_size
        x1 = h.x_origin + (cols.max() + 1) * h.cell_size
        y1 = h.y_max - rows.min() * h.cell_size
        y0 = h.y_max - (rows.max() + 1) * h.cell_size
        return "raster", inside, (x0, y0, x1, y1), float(inside.sum()) * h.cell_area
    geom = region if hasattr(region, "area") else Polygon(region)
    if geom.is_empty or geom.area <= 0:
        raise DegenerateRegionError("region polygon is empty")
    return "polygon", geom, geom.bounds, float(geom.area)


def _lattice(bounds, target_tri_area):
    x0, y0, x1, y1 = bounds
    width, height = x1 - x0, y1 - y0
    edge = math.sqrt(4.0 * target_tri_area / math.sqrt(3.0))
    nx = max(1, round(width / edge))
    ny = max(1, round(height / (edge * math.sqrt(3.0) / 2.0)))
    a = width / nx
    dy = height / ny
    verts: list[tuple[float, float]] = []
    row_ids: list[list[int]] = []
    for j in range(ny + 1):
        y = y0 + j * dy
        if j % 2 == 0:
            xs = [x0 + i * a for i in range(nx + 1)]
        else:
            xs = [x0] + [x0 + (i + 0.5) * a for i in range(nx)] + [x1]
        ids = []
        for x in xs:
            ids.append(len(verts))
            verts.append((x, y))
        row_ids.append(ids)
    tris: list[tuple[int, int, int]] = []
    for j in range(ny):
        lo, hi = row_ids[j], row_ids[j + 1]
        vl = np.array([verts[k][0] for k in lo])
        vh = np.array([verts[k][0] for k in hi])
        # zipper the two rows left to right; every triangle is counter-clockwise
        p = q = 0
        while p < len(lo) - 1 or q < len(hi) - 1:
            advance_low = q == len(hi) - 1 or (p < len(lo) - 1 and vl[p + 1] < vh[q + 1])
            if advance_low:
                tris.append((lo[p], lo[p + 1], hi[q]))
                p += 1
            else:
                tris.append((lo[p], hi[q + 1], hi[q]))
                q += 1
    return np.array(verts, dtype=float), np.array(tris, dtype=np.int64)


def build_mesh(region, target_tri_area: float = 1e5) -> TriMesh:
    """Triangulate ``region`` with triangles of roughly ``target_tri_area`` m^2.

    ``region`` is a mask raster (non-zero valid cells are inside) or a
    polygon (shapely geometry or vertex list). Triangles that do not
    overlap the region are dropped.
    """
    if not target_tri_area > 0:
        raise ValueError("target_tri_area must be positive")
    kind, geom, bounds, area = _region_info(region)
    if area < target_tri_area * (1 - 1e-9):
        raise DegenerateRegionError(
            f"region area {area:.6g} m^2 is smaller than one triangle ({target_tri_area:.6g} m^2)"
        )
    verts, tris = _lattice(bounds, target_tri_area)
    if kind == "polygon":
        polys = shapely.polygons(verts[tris])
        keep = shapely.area(shapely.intersection(polys, geom)) > 0
    else:
        keep = _raster_assignment(verts, tris, region)[1] > 0
    tris = tris[keep]
    used = np.unique(tris)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return TriMesh(verts[used], remap[tris], region)


def _raster_assignment(verts, tris, region: Raster):
    """Assign each inside cell centre to the first triangle containing it.

    Returns ``(owner per inside cell, cell count per triangle, cell centres)``.
    """
    h = region.header
    inside = region.valid_mask() & (region.data != 0)
    xc, yc = h.cell_centers()
    pts = np.column_stack([xc[inside], yc[inside]])
    owner = np.full(len(pts), -1, dtype=np.int64)
    p = verts[tris]
    xmin, xmax = p[:, :, 0].min(axis=1), p[:, :, 0].max(axis=1)
    ymin, ymax = p[:, :, 1].min(axis=1), p[:, :, 1].max(axis=1)
    order = np.argsort(pts[:, 0], kind="stable")
    xs = pts[order, 0]
    eps = 1e-9 * max(h.cell_size, 1.0)
    for t in range(len(tris)):
        lo = np.searchsorted(xs, xmin[t] - eps, side="left")
        hi = np.searchsorted(xs, xmax[t] + eps, side="right")
        cand = order[lo:hi]
        cand = cand[(owner[cand] < 0) & (pts[cand, 1] >= ymin[t] - eps) & (pts[cand, 1] <= ymax[t] + eps)]
        if cand.size == 0:
            continue
        a, b, c = p[t]
        q = pts[cand]
        d1 = (b[0] - a[0]) * (q[:, 1] - a[1]) - (b[1] - a[1]) * (q[:, 0] - a[0])
        d2 = (c[0] - b[0]) * (q[:, 1] - b[1]) - (c[1] - b[1]) * (q[:, 0] - b[0])
        d3 = (a[0] - c[0]) * (q[:, 1] - c[1]) - (a[1] - c[1]) * (q[:, 0] - c[0])
        scale = eps * max(abs(b[0] - a[0]) + abs(c[1] - a[1]), 1.0)
        hit = (d1 >= -scale) & (d2 >= -scale) & (d3 >= -scale)
        owner[cand[hit]] = t
    counts = np.bincount(owner[owner >= 0], minlength=len(tris))
    return owner, counts, pts


def quadrature_of(mesh: TriMesh) -> Quadrature:
    """One integration point per triangle, weighted by its area inside the region.

    The point is the triangle centroid when that lies inside the region;
    otherwise a point of the clipped piece (polygon regions) or the inside
    cell centre nearest the centroid (raster regions). Triangles with no
    inside area are skipped.
    """
    if mesh.n_triangles == 0:
        return Quadrature(np.zeros((0, 2)), np.zeros(0))
    cent = mesh.centroids()
    region = mesh.region
    if isinstance(region, Raster):
        owner, counts, pts = _raster_assignment(mesh.vertices, mesh.triangles, region)
        weights = counts * region.header.cell_area
        inside = region.valid_mask() & (region.data != 0)
        row, col, ok = region.header.index_of(cent[:, 0], cent[:, 1])
        cent_in = ok.copy()
        cent_in[ok] = inside[row[ok], col[ok]]
        points = cent.copy()
        for t in np.flatnonzero(~cent_in & (counts > 0)):
            mine = pts[owner == t]
            points[t] = mine[np.argmin(((mine - cent[t]) ** 2).sum(axis=1))]
    else:
        geom = region if hasattr(region, "area") else Polygon(region)
        polys = shapely.polygons(mesh.vertices[mesh.triangles])
        clipped = shapely.intersection(polys, geom)
        weights = shapely.area(clipped)
        cent_in = shapely.contains_xy(geom, cent[:, 0], cent[:, 1])
        points = cent.copy()
        for t in np.flatnonzero(~cent_in & (weights > 0)):
            rp = clipped[t].representative_point()
            points[t] = (rp.x, rp.y)
    keep = weights > 0
    return Quadrature(points[keep], np.asarray(weights, dtype=float)[keep])


def rectangle(x0: float, y0: float, x1: float, y1: float):
    return box(x0, y0, x1, y1)


def write_mesh_csv(mesh: TriMesh, vertices_path, triangles_path) -> None:
    with Path(vertices_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vid", "x", "y"])
        for i, (x, y) in enumerate(mesh.vertices):
            w.writerow([i, repr(float(x)), repr(float(y))])
    with Path(triangles_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tid", "v0", "v1", "v2"])
        for i, (a, b, c) in enumerate(mesh.triangles):
            w.writerow([i, int(a), int(b), int(c)])
