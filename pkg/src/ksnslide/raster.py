"""Regular-grid rasters, ESRI ASCII grid I/O, resampling and point sampling.

Storage is row-major with row 0 the northernmost row; all coordinate math
goes through the lower-left origin of the grid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "GridHeader",
    "Raster",
    "RasterFormatError",
    "TruncationError",
    "AlignmentError",
    "read_ascii_grid",
    "write_ascii_grid",
    "resample",
    "sample_at",
    "pointwise",
    "read_points_csv",
    "write_points_csv",
]

DEFAULT_NODATA = -9999.0

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class RasterFormatError(ValueError):
    """Malformed ASCII grid header."""


class TruncationError(ValueError):
    """Cell count in an ASCII grid disagrees with its header."""


class AlignmentError(ValueError):
    """Two rasters that must share a geometry do not."""


@dataclass(frozen=True)
class GridHeader:
    ncols: int
    nrows: int
    x_origin: float
    y_origin: float
    cell_size: float
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise ValueError(f"grid must have at least one cell, got {self.nrows}x{self.ncols}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def size(self) -> int:
        return self.nrows * self.ncols

    @property
    def x_max(self) -> float:
        return self.x_origin + self.ncols * self.cell_size

    @property
    def y_max(self) -> float:
        return self.y_origin + self.nrows * self.cell_size

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    def aligned(self, other: "GridHeader") -> bool:
        return (
            self.ncols == other.ncols
            and self.nrows == other.nrows
            and self.x_origin == other.x_origin
            and self.y_origin == other.y_origin
            and self.cell_size == other.cell_size
        )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (x, y) arrays of shape ``(nrows, ncols)`` of cell centres."""
        cs = self.cell_size
        xs = self.x_origin + (np.arange(self.ncols) + 0.5) * cs
        ys = self.y_max - (np.arange(self.nrows) + 0.5) * cs
        return np.meshgrid(xs, ys)

    def index_of(self, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Map coordinates to ``(row, col, inside)``.

        Column is ``floor((x - x_origin) / cell_size)``, so a point on a cell
        boundary belongs to the higher-index cell. Rows count from the north.
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        col = np.floor((x - self.x_origin) / self.cell_size).astype(np.int64)
        row_from_south = np.floor((y - self.y_origin) / self.cell_size).astype(np.int64)
        inside = (col >= 0) & (col < self.ncols) & (row_from_south >= 0) & (row_from_south < self.nrows)
        row = self.nrows - 1 - row_from_south
        return row, col, inside


@dataclass(frozen=True)
class Raster:
    """A grid of values with a nodata sentinel.

    ``data`` has shape ``(nrows, ncols)``; integer dtypes hold category codes.
    """

    header: GridHeader
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 1:
            if data.size != self.header.size:
                raise TruncationError(f"expected {self.header.size} cells, got {data.size}")
            data = data.reshape(self.header.shape)
        if data.shape != self.header.shape:
            raise TruncationError(f"expected shape {self.header.shape}, got {data.shape}")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def cells(self) -> np.ndarray:
        return self.data.ravel()

    @property
    def is_categorical(self) -> bool:
        return np.issubdtype(self.data.dtype, np.integer)

    @property
    def nodata(self) -> float:
        return self.header.nodata

    def valid_mask(self) -> np.ndarray:
        if self.is_categorical:
            return self.data != self.header.nodata
        return np.isfinite(self.data) & (self.data != self.header.nodata)

    def masked(self) -> np.ndarray:
        """Float copy of the data with nodata replaced by NaN."""
        out = self.data.astype(float)
        out[~self.valid_mask()] = np.nan
        return out

    def with_data(self, data: np.ndarray) -> "Raster":
        return Raster(self.header, data)

    @classmethod
    def from_masked(cls, header: GridHeader, values: np.ndarray, dtype=float) -> "Raster":
        """Build a raster from an array where NaN (or a masked entry) marks nodata."""
        values = np.asarray(values, dtype=float).reshape(header.shape)
        out = np.where(np.isfinite(values), values, header.nodata).astype(dtype)
        return cls(header, out)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.header == other.header
            and self.data.dtype.kind == other.data.dtype.kind
            and np.array_equal(self.data, other.data, equal_nan=self.data.dtype.kind == "f")
        )

    __hash__ = None


def _require_aligned(*rasters: Raster) -> None:
    first = rasters[0].header
    for r in rasters[1:]:
        if not first.aligned(r.header):
            raise AlignmentError(f"rasters are not aligned: {first} vs {r.header}")


def pointwise(func, *rasters: Raster, nodata: float | None = None) -> Raster:
    """Apply ``func`` cellwise; any nodata input (or non-finite result) gives nodata."""
    _require_aligned(*rasters)
    header = rasters[0].header
    if nodata is not None:
        header = replace(header, nodata=nodata)
    valid = np.logical_and.reduce([r.valid_mask() for r in rasters])
    with np.errstate(all="ignore"):
        values = np.asarray(func(*[r.data.astype(float) for r in rasters]), dtype=float)
    values = np.where(valid & np.isfinite(values), values, np.nan)
    return Raster.from_masked(header, values)


# --------------------------------------------------------------------------
# ESRI ASCII grid
# --------------------------------------------------------------------------


def _is_float_token(tok: str) -> bool:
    t = tok.lower()
    return "." in t or "e" in t or "n" in t


def read_ascii_grid(path) -> Raster:
    path = Path(path)
    with path.open() as fh:
        text = fh.read()
    lines = text.splitlines()
    header: dict[str, str] = {}
    i = 0
    while i < len(lines) and len(header) < len(_HEADER_KEYS):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key in ("xllcenter", "yllcenter"):
            key = key.replace("center", "corner") + "@center"
        base = key.split("@")[0]
        if base not in _HEADER_KEYS:
            break
        if len(parts) != 2:
            raise RasterFormatError(f"malformed header line for key {parts[0].upper()}: {lines[i]!r}")
        header[key] = parts[1]
        i += 1

    def _get(key, conv):
        for k in (key, key + "@center"):
            if k in header:
                try:
                    return conv(header[k]), k.endswith("@center")
                except ValueError:
                    raise RasterFormatError(f"bad value for {key.upper()}: {header[k]!r}") from None
        if key == "nodata_value":
            return None, False
        raise RasterFormatError(f"missing header key {key.upper()}")

    ncols, _ = _get("ncols", int)
    nrows, _ = _get("nrows", int)
    xll, xc = _get("xllcorner", float)
    yll, yc = _get("yllcorner", float)
    cs, _ = _get("cellsize", float)
    nd_raw = header.get("nodata_value")
    if ncols < 1:
        raise RasterFormatError(f"NCOLS must be positive, got {ncols}")
    if nrows < 1:
        raise RasterFormatError(f"NROWS must be positive, got {nrows}")
    if not cs > 0:
        raise RasterFormatError(f"CELLSIZE must be positive, got {cs}")
    if xc:
        xll -= cs / 2
    if yc:
        yll -= cs / 2

    rows = [ln.split() for ln in lines[i:] if ln.strip()]
    if len(rows) != nrows:
        raise TruncationError(f"header NROWS {nrows} but {len(rows)} data rows")
    for r, toks in enumerate(rows):
        if len(toks) != ncols:
            raise TruncationError(f"header NCOLS {ncols} but row {r} has {len(toks)} values")
    tokens = [t for toks in rows for t in toks]
    is_float = any(_is_float_token(t) for t in tokens) or (nd_raw is not None and _is_float_token(nd_raw))
    if is_float:
        values = np.array([float(t) for t in tokens], dtype=np.float64)
        nodata = float(nd_raw) if nd_raw is not None else DEFAULT_NODATA
    else:
        values = np.array([int(t) for t in tokens], dtype=np.int64)
        nodata = int(nd_raw) if nd_raw is not None else int(DEFAULT_NODATA)
    hdr = GridHeader(ncols, nrows, xll, yll, cs, nodata)
    return Raster(hdr, values.reshape(nrows, ncols))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(int(v))


def write_ascii_grid(r: Raster, path) -> None:
    if not str(path):
        raise OSError("empty output path")
    h = r.header
    categorical = r.is_categorical
    nodata = int(h.nodata) if categorical else float(h.nodata)
    data = r.data if categorical else np.where(r.valid_mask(), r.data, nodata)
    lines = [
        f"NCOLS {h.ncols}",
        f"NROWS {h.nrows}",
        f"XLLCORNER {_fmt(float(h.x_origin))}",
        f"YLLCORNER {_fmt(float(h.y_origin))}",
        f"CELLSIZE {_fmt(float(h.cell_size))}",
        f"NODATA_VALUE {_fmt(nodata)}",
    ]
    if categorical:
        lines.extend(" ".join(str(int(v)) for v in row) for row in data)
    else:
        lines.extend(" ".join(repr(float(v)) for v in row) for row in data)
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# Resampling and sampling
# --------------------------------------------------------------------------


def sample_at(r: Raster, points) -> np.ndarray:
    """Nearest-cell value at each ``(x, y)``; points outside the extent get nodata."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    row, col, inside = r.header.index_of(pts[:, 0], pts[:, 1])
    out = np.full(len(pts), r.header.nodata, dtype=r.data.dtype)
    out[inside] = r.data[row[inside], col[inside]]
    return out


def resample(src: Raster, target: GridHeader, method: str = "nearest") -> Raster:
    """Resample ``src`` onto ``target`` (nearest or bilinear).

    Bilinear interpolation uses the four source cell centres enclosing each
    target centre, clamping to the edge centres inside the outermost
    half-cell. Target centres outside the source extent get nodata.
    """
    if method not in ("nearest", "bilinear"):
        raise ValueError(f"unknown resampling method {method!r}")
    target = replace(target, nodata=src.header.nodata)
    if method == "nearest" and src.header.aligned(target):
        return Raster(target, src.data)
    xc, yc = target.cell_centers()
    if method == "nearest":
        return Raster(target, sample_at(src, np.column_stack([xc.ravel(), yc.ravel()])).reshape(target.shape))
    if src.is_categorical:
        raise TypeError("bilinear resampling is undefined for categorical rasters")

    h = src.header
    fx = (xc.ravel() - h.x_origin) / h.cell_size - 0.5
    fy = (h.y_max - yc.ravel()) / h.cell_size - 0.5
    inside = (fx >= -0.5) & (fx <= h.ncols - 0.5) & (fy >= -0.5) & (fy <= h.nrows - 0.5)
    fx = np.clip(fx, 0, h.ncols - 1)
    fy = np.clip(fy, 0, h.nrows - 1)
    c0 = np.minimum(np.floor(fx).astype(np.int64), max(h.ncols - 2, 0))
    r0 = np.minimum(np.floor(fy).astype(np.int64), max(h.nrows - 2, 0))
    c1 = np.minimum(c0 + 1, h.ncols - 1)
    r1 = np.minimum(r0 + 1, h.nrows - 1)
    tx = fx - c0
    ty = fy - r0
    vals = src.masked()
    # nested lerps reproduce equal neighbours exactly
    top = vals[r0, c0] + tx * (vals[r0, c1] - vals[r0, c0])
    bottom = vals[r1, c0] + tx * (vals[r1, c1] - vals[r1, c0])
    out = top + ty * (bottom - top)
    out[~inside] = np.nan
    return Raster.from_masked(target, out)


# --------------------------------------------------------------------------
# Point tables
# --------------------------------------------------------------------------


def read_points_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read an ``x,y[,value]`` table; returns ``(xy, values or None)``."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        head = [c.strip().lower() for c in next(reader)]
        if head[:2] != ["x", "y"]:
            raise RasterFormatError(f"point table header must start with x,y; got {head}")
        rows = [r for r in reader if r]
    xy = np.array([[float(r[0]), float(r[1])] for r in rows], dtype=float).reshape(-1, 2)
    values = None
    if len(head) >= 3:
        values = np.array([float(r[2]) for r in rows], dtype=float)
    return xy, values


def write_points_csv(path, xy, values=None, value_name: str = "value") -> None:
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"] + ([value_name] if values is not None else []))
        for i, (x, y) in enumerate(xy):
            row = [repr(float(x)), repr(float(y))]
            if values is not None:
                row.append(repr(float(values[i])))
            w.writerow(row)


def header_for_extent(x_min: float, y_min: float, x_max: float, y_max: float, cell_size: float,
                      nodata: float = DEFAULT_NODATA) -> GridHeader:
    """Smallest grid anchored at ``(x_min, y_min)`` covering the extent."""
    ncols = max(1, math.ceil((x_max - x_min) / cell_size - 1e-9))
    nrows = max(1, math.ceil((y_max - y_min) / cell_size - 1e-9))
    return GridHeader(ncols, nrows, x_min, y_min, cell_size, nodata)
