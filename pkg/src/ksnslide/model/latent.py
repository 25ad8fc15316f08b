"""Latent Gaussian model construction: design matrices, priors and constraints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from ..mesh import Quadrature
from ..raster import Raster, sample_at
from .formula import ConfigError, ModelSpec, Term, apply_transform

__all__ = [
    "PointData",
    "Block",
    "LatentModel",
    "rw2_structure",
    "build_design",
    "covariate_values",
    "design_rows",
]

log = logging.getLogger(__name__)

M2_PER_KM2 = 1e6
FIXED_PRECISION = 1e-3
INTERCEPT_PRECISION = 0.0
# keeps rw2 blocks factorisable; the constrained direction is projected out
RW2_RIDGE = 1e-6
HYPER_PRIOR_SHAPE = 1.0
HYPER_PRIOR_RATE = 5e-5


@dataclass(frozen=True)
class PointData:
    points: np.ndarray
    marks: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        if self.marks is not None:
            marks = np.asarray(self.marks, dtype=float).ravel()
            if marks.size != len(pts):
                raise ValueError(f"{marks.size} marks for {len(pts)} points")
            if not np.all(np.isfinite(marks)):
                raise ValueError("marks must be finite")
            object.__setattr__(self, "marks", marks)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, keep) -> "PointData":
        return PointData(self.points[keep], None if self.marks is None else self.marks[keep])


@dataclass(frozen=True)
class Block:
    """A contiguous slice of the latent vector belonging to one model term."""

    label: str
    kind: str  # intercept | linear | iid | rw2
    start: int
    size: int
    term: Term | None = None
    levels: np.ndarray | None = None  # iid category codes
    edges: np.ndarray | None = None  # rw2 bin edges

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.size)

    @property
    def has_hyper(self) -> bool:
        return self.kind in ("iid", "rw2")

    def level_labels(self) -> list[str]:
        if self.kind == "iid":
            return [str(int(v)) for v in self.levels]
        if self.kind == "rw2":
            centres = 0.5 * (self.edges[:-1] + self.edges[1:])
            return [repr(float(c)) for c in centres]
        return [""]


def rw2_structure(n_bins: int) -> sp.csr_matrix:
    """Second-order random-walk structure matrix ``D2' D2`` (rank ``n_bins - 2``)."""
    if n_bins < 5:
        raise ConfigError(f"rw2 needs at least 5 bins, got {n_bins}")
    d2 = sp.diags([np.ones(n_bins - 2), -2 * np.ones(n_bins - 2), np.ones(n_bins - 2)],
                  [0, 1, 2], shape=(n_bins - 2, n_bins), dtype=float)
    return (d2.T @ d2).tocsr()


@dataclass
class LatentModel:
    """Everything the inference engine needs for one response.

    For ``poisson_pp`` the log-likelihood is
    ``sum(A_obs @ x) - sum(w * exp(A_quad @ x))`` with ``w`` in km^2, so the
    linear predictor is a log intensity per km^2. For ``gaussian`` it is a
    normal likelihood of ``y`` given ``A_obs @ x`` with one noise precision.
    """

    spec: ModelSpec
    likelihood: str
    blocks: list
    A_obs: sp.csr_matrix
    A_quad: sp.csr_matrix | None = None
    w_quad: np.ndarray | None = None
    y: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def n_latent(self) -> int:
        last = self.blocks[-1]
        return last.start + last.size

    def hyper_names(self) -> list[str]:
        names = [f"log_prec[{b.label}]" for b in self.blocks if b.has_hyper]
        if self.likelihood == "gaussian":
            names.append("log_prec[noise]")
        return names

    def fixed_precision(self) -> np.ndarray:
        q = np.zeros(self.n_latent)
        for b in self.blocks:
            if b.kind == "intercept":
                q[b.slice] = INTERCEPT_PRECISION
            elif b.kind == "linear":
                q[b.slice] = FIXED_PRECISION
        return q

    def prior_precision(self, log_prec) -> np.ndarray:
        """Dense prior precision for latent-block log-precisions ``log_prec``."""
        Q = np.diag(self.fixed_precision())
        k = 0
        for b in self.blocks:
            if not b.has_hyper:
                continue
            tau = float(np.exp(log_prec[k]))
            k += 1
            if b.kind == "iid":
                Q[b.slice, b.slice] += tau * np.eye(b.size)
            else:
                Q[b.slice, b.slice] += tau * rw2_structure(b.size).toarray() + RW2_RIDGE * np.eye(b.size)
        return Q

    def prior_ranks(self) -> list[int]:
        return [b.size - 1 if b.kind == "iid" else b.size - 2 for b in self.blocks if b.has_hyper]

    def constraints(self) -> np.ndarray:
        rows = []
        for b in self.blocks:
            if b.has_hyper:
                r = np.zeros(self.n_latent)
                r[b.slice] = 1.0
                rows.append(r)
        return np.array(rows).reshape(len(rows), self.n_latent)

    def block(self, label: str) -> Block:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)


def covariate_values(spec: ModelSpec, covariates: dict, points) -> dict:
    """Sample and transform each term's covariate at ``points`` (NaN where invalid)."""
    out = {}
    for t in spec.terms:
        if t.covariate not in covariates:
            raise ConfigError(f"model {spec.name} needs covariate {t.covariate!r}")
        r: Raster = covariates[t.covariate]
        raw = sample_at(r, points)
        valid = raw != r.header.nodata
        if not r.is_categorical:
            valid &= np.isfinite(raw)
        vals = np.where(valid, raw.astype(float), np.nan)
        if t.kind == "iid":
            out[t.label] = vals
        else:
            out[t.label] = apply_transform(t.transform, vals)
    return out


def _make_blocks(spec: ModelSpec, values: dict) -> list[Block]:
    blocks: list[Block] = []
    start = 0
    if spec.intercept:
        blocks.append(Block("intercept", "intercept", start, 1))
        start += 1
    for t in spec.terms:
        v = values[t.label]
        v = v[np.isfinite(v)]
        if v.size == 0:
            raise ConfigError(f"covariate for term {t.label} has no valid values")
        if t.kind == "linear":
            blocks.append(Block(t.label, "linear", start, 1, term=t))
            start += 1
        elif t.kind == "iid":
            levels = np.unique(v.astype(np.int64))
            blocks.append(Block(t.label, "iid", start, levels.size, term=t, levels=levels))
            start += levels.size
        else:
            lo, hi = float(v.min()), float(v.max())
            if hi <= lo:
                hi = lo + 1.0
            edges = np.linspace(lo, hi, t.n_bins + 1)
            blocks.append(Block(t.label, "rw2", start, t.n_bins, term=t, edges=edges))
            start += t.n_bins
    if not blocks:
        raise ConfigError(f"model {spec.name} has no latent components")
    return blocks


def design_rows(blocks: list, values: dict, n_rows: int, n_latent: int,
                unseen: dict | None = None) -> sp.csr_matrix:
    """Sparse design for rows with (already transformed) covariate ``values``.

    rw2 values outside the training range clamp to the edge bins; iid
    levels absent from training contribute nothing and are tallied in
    ``unseen``.
    """
    rows, cols, data = [], [], []
    idx = np.arange(n_rows)
    for b in blocks:
        if b.kind == "intercept":
            rows.append(idx)
            cols.append(np.full(n_rows, b.start))
            data.append(np.ones(n_rows))
            continue
        v = values[b.label]
        if b.kind == "linear":
            rows.append(idx)
            cols.append(np.full(n_rows, b.start))
            data.append(v)
        elif b.kind == "iid":
            codes = v.astype(np.int64)
            pos = np.searchsorted(b.levels, codes)
            pos_c = np.minimum(pos, b.size - 1)
            known = b.levels[pos_c] == codes
            if unseen is not None and (~known).any():
                for code, n in zip(*np.unique(codes[~known], return_counts=True)):
                    key = (b.label, int(code))
                    unseen[key] = unseen.get(key, 0) + int(n)
            rows.append(idx[known])
            cols.append(b.start + pos_c[known])
            data.append(np.ones(int(known.sum())))
        else:
            width = (b.edges[-1] - b.edges[0]) / b.size
            k = np.clip(np.floor((v - b.edges[0]) / width), 0, b.size - 1).astype(np.int64)
            rows.append(idx)
            cols.append(b.start + k)
            data.append(np.ones(n_rows))
    A = sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rows, n_latent),
    )
    A.sum_duplicates()
    return A


def _valid_rows(values: dict) -> np.ndarray:
    ok = None
    for v in values.values():
        ok = np.isfinite(v) if ok is None else ok & np.isfinite(v)
    return ok


def _augment(q_xy, q_w, pts_xy):
    """Each point joins the tile of its nearest node; the tile weight is
    split equally among the node and its points. Returns (point, node) weights."""
    if len(pts_xy) == 0:
        return np.zeros(0), q_w
    tile = cKDTree(q_xy).query(pts_xy)[1]
    share = q_w / (1.0 + np.bincount(tile, minlength=q_w.size))
    return share[tile], share


def _unsupported(A_obs, A_quad) -> np.ndarray:
    seen = np.asarray(A_obs.astype(bool).sum(axis=0)).ravel() > 0
    covered = np.asarray(A_quad.astype(bool).sum(axis=0)).ravel() > 0
    return seen & ~covered


def build_design(spec: ModelSpec, data: PointData, covariates: dict,
                 quad: Quadrature | None = None, augment: bool = True) -> LatentModel:
    """Assemble the latent model for ``spec`` on observed points (and quadrature).

    Points or quadrature nodes with any invalid covariate are dropped; the
    counts and lost quadrature weight are logged and kept in ``info``.

    A bin or level that holds points but no quadrature node would make the
    likelihood unbounded. With ``augment`` the points in such columns join
    the quadrature (Berman-Turner), sharing the weight of their nearest
    node's tile; the total weight is unchanged.
    """
    info: dict = {}
    pts_vals = covariate_values(spec, covariates, data.points)
    ok_pts = _valid_rows(pts_vals) if spec.terms else np.ones(len(data), dtype=bool)
    info["dropped_points"] = int((~ok_pts).sum())
    if info["dropped_points"]:
        log.warning("%s: dropped %d point(s) with nodata covariates", spec.name, info["dropped_points"])
    pts_vals = {k: v[ok_pts] for k, v in pts_vals.items()}
    n_obs = int(ok_pts.sum())

    if spec.response == "centroids":
        if quad is None:
            raise ConfigError("the centroid model needs a quadrature")
        q_vals = covariate_values(spec, covariates, quad.points)
        ok_q = _valid_rows(q_vals) if spec.terms else np.ones(len(quad), dtype=bool)
        lost = float(quad.weights[~ok_q].sum())
        info["dropped_quadrature"] = int((~ok_q).sum())
        info["dropped_weight_m2"] = lost
        if lost:
            log.warning("%s: dropped %d quadrature node(s), %.6g m^2 of weight",
                        spec.name, info["dropped_quadrature"], lost)
        q_vals = {k: v[ok_q] for k, v in q_vals.items()}
        w = quad.weights[ok_q] / M2_PER_KM2
        if w.size == 0:
            raise ConfigError("no quadrature node has valid covariates")
        combined = {k: np.concatenate([pts_vals[k], q_vals[k]]) for k in pts_vals}
        blocks = _make_blocks(spec, combined) if spec.terms else _make_blocks(spec, {})
        p = blocks[-1].start + blocks[-1].size
        A_obs = design_rows(blocks, pts_vals, n_obs, p)
        A_quad = design_rows(blocks, q_vals, w.size, p)
        bad = _unsupported(A_obs, A_quad)
        info["augmented_points"] = 0
        if augment and bad.any():
            need = np.asarray(A_obs[:, bad].astype(bool).sum(axis=1)).ravel() > 0
            w_pts, w = _augment(quad.points[ok_q], w, data.points[ok_pts][need])
            A_quad = sp.vstack([A_quad, A_obs[need]]).tocsr()
            w = np.concatenate([w, w_pts])
            info["augmented_points"] = int(need.sum())
            log.info("%s: %d point(s) added to the quadrature", spec.name, info["augmented_points"])
            bad = _unsupported(A_obs, A_quad)
        info["unsupported_columns"] = int(bad.sum())
        if bad.any():
            log.warning("%s: %d level(s)/bin(s) contain points but no quadrature node; "
                        "refine the mesh or coarsen the term", spec.name, info["unsupported_columns"])
        return LatentModel(spec, "poisson_pp", blocks, A_obs, A_quad, w, info=info)

    if data.marks is None:
        raise ConfigError("the log-size model needs marks")
    y = data.marks[ok_pts]
    blocks = _make_blocks(spec, pts_vals)
    p = blocks[-1].start + blocks[-1].size
    A_obs = design_rows(blocks, pts_vals, n_obs, p)
    return LatentModel(spec, "gaussian", blocks, A_obs, y=y, info=info)
