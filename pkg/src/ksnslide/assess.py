"""Cross-validation splits and proper scoring of count and log-size predictions.

Count predictions are Poisson mixtures over posterior intensity draws;
size predictions are normal mixtures. All scores are negatively oriented.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy
from scipy.stats import norm

from .mesh import Quadrature
from .model.inference import Posterior, sample_posterior
from .model.latent import PointData
from .model.predict import linear_predictor
from .raster import GridHeader, Raster, header_for_extent

__all__ = [
    "SplitError",
    "JoinError",
    "thinning_assignment",
    "thinning_split",
    "CheckerGrid",
    "chequerboard_split",
    "GridCounts",
    "predictive_counts",
    "poisson_mixture_moments",
    "poisson_mixture_scores",
    "gaussian_mixture_scores",
    "ScoreTable",
    "score_counts",
    "score_gaussian",
    "ECDF",
    "ecdf",
    "score_difference_map",
    "summarise",
    "write_summary",
    "LS_SENTINEL",
]

log = logging.getLogger(__name__)

LS_SENTINEL = 700.0
_PMF_FLOOR = 1e-300
# numpy's Poisson sampler rejects larger rates
_LAMBDA_MAX = 1e15


class SplitError(ValueError):
    pass


class JoinError(ValueError):
    pass


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


def thinning_assignment(n: int, seed: int) -> np.ndarray:
    """Boolean train mask: a seeded permutation's first ``ceil(n/2)`` entries."""
    if n < 2:
        raise SplitError(f"thinning needs at least 2 points, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    train = np.zeros(n, dtype=bool)
    train[perm[: (n + 1) // 2]] = True
    return train


def thinning_split(points: PointData, seed: int) -> tuple[PointData, PointData]:
    train = thinning_assignment(len(points), seed)
    return points.subset(train), points.subset(~train)


@dataclass(frozen=True)
class CheckerGrid:
    """Square lattice anchored at the region's lower-left corner.

    Cell ``(i, j)`` counts columns from the west and rows from the south;
    its id is ``j * ncols + i``. In the white fold even-parity cells train.
    """

    lattice: GridHeader
    fold: str = "white"

    def __post_init__(self):
        if self.fold not in ("white", "black"):
            raise ValueError(f"fold must be 'white' or 'black', got {self.fold!r}")

    @property
    def n_cells(self) -> int:
        return self.lattice.size

    def cell_ij(self, cell_id) -> tuple[np.ndarray, np.ndarray]:
        j, i = np.divmod(np.asarray(cell_id), self.lattice.ncols)
        return i, j

    def cell_of(self, points) -> np.ndarray:
        """Cell id per point (-1 outside the lattice)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        h = self.lattice
        i = np.floor((pts[:, 0] - h.x_origin) / h.cell_size).astype(np.int64)
        j = np.floor((pts[:, 1] - h.y_origin) / h.cell_size).astype(np.int64)
        ok = (i >= 0) & (i < h.ncols) & (j >= 0) & (j < h.nrows)
        return np.where(ok, j * h.ncols + i, -1)

    def is_train_cell(self, cell_id) -> np.ndarray:
        i, j = self.cell_ij(cell_id)
        even = (i + j) % 2 == 0
        return even if self.fold == "white" else ~even

    def train_cells(self) -> np.ndarray:
        return np.flatnonzero(self.is_train_cell(np.arange(self.n_cells)))

    def test_cells(self) -> np.ndarray:
        return np.flatnonzero(~self.is_train_cell(np.arange(self.n_cells)))

    def point_is_train(self, points) -> np.ndarray:
        cid = self.cell_of(points)
        return (cid >= 0) & self.is_train_cell(np.maximum(cid, 0))

    def swapped(self) -> "CheckerGrid":
        return CheckerGrid(self.lattice, "black" if self.fold == "white" else "white")

    def polygons(self) -> list[tuple[int, tuple[float, float, float, float], bool]]:
        """``(cell id, (x0, y0, x1, y1), is_train)`` for every lattice cell."""
        h = self.lattice
        out = []
        for cid in range(self.n_cells):
            i, j = int(cid % h.ncols), int(cid // h.ncols)
            x0 = h.x_origin + i * h.cell_size
            y0 = h.y_origin + j * h.cell_size
            out.append((cid, (x0, y0, x0 + h.cell_size, y0 + h.cell_size),
                        bool(self.is_train_cell(cid))))
        return out

    def to_raster(self, values_by_cell: dict) -> Raster:
        """Lattice raster (row 0 north) holding ``values_by_cell[cell id]``."""
        h = self.lattice
        out = np.full(h.shape, np.nan)
        for cid, v in values_by_cell.items():
            i, j = int(cid % h.ncols), int(cid // h.ncols)
            out[h.nrows - 1 - j, i] = v
        return Raster.from_masked(h, out)


def chequerboard_split(region: GridHeader, grid_size: float = 3000.0, fold: str = "white") -> CheckerGrid:
    if not grid_size > 0:
        raise ValueError("grid_size must be positive")
    lattice = header_for_extent(region.x_origin, region.y_origin, region.x_max, region.y_max, grid_size)
    if lattice.size == 1:
        log.warning("grid size %.6g m covers the whole region in a single cell", grid_size)
    return CheckerGrid(lattice, fold)


# --------------------------------------------------------------------------
# Predictive counts
# --------------------------------------------------------------------------


@dataclass
class GridCounts:
    """Observed counts and posterior-predictive draws per evaluation cell.

    ``intensity[c, s]`` is the expected count in cell ``c`` under sample
    ``s``; ``counts`` holds one Poisson draw per sample.
    """

    cell_ids: np.ndarray
    y_obs: np.ndarray
    intensity: np.ndarray
    counts: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.intensity.shape[1])


def predictive_counts(post: Posterior, covariates: dict, quad: Quadrature, grid: CheckerGrid,
                      cell_ids, observed: PointData, n_samples: int = 1000, seed: int = 0,
                      scale: float = 1.0, samples: np.ndarray | None = None) -> GridCounts:
    """Integrate sampled intensities over each evaluation cell.

    ``scale`` multiplies every integrated intensity (``n_test / n_train``
    for thinning folds). Cells without quadrature weight are skipped.
    """
    cell_ids = np.asarray(cell_ids, dtype=np.int64)
    if samples is None:
        samples = sample_posterior(post, n_samples, seed)
    eta, valid = linear_predictor(post, covariates, quad.points, samples)
    q_cell = grid.cell_of(quad.points)
    w_km2 = quad.weights / 1e6
    lookup = {int(c): k for k, c in enumerate(cell_ids)}
    Lam = np.zeros((cell_ids.size, samples.shape[0]))
    wsum = np.zeros(cell_ids.size)
    with np.errstate(over="ignore"):
        contrib = w_km2[:, None] * np.exp(eta)
    for k in np.flatnonzero(valid):
        pos = lookup.get(int(q_cell[k]))
        if pos is not None:
            Lam[pos] += contrib[k]
            wsum[pos] += w_km2[k]
    keep = wsum > 0
    if (~keep).any():
        log.warning("%d evaluation cell(s) have no quadrature weight and are skipped", int((~keep).sum()))
    Lam = Lam[keep] * scale
    if not np.all(np.isfinite(Lam)) or Lam.max(initial=0.0) > _LAMBDA_MAX:
        raise ArithmeticError(f"predicted cell intensity overflow (max {Lam.max():.3g}) for {post.model.spec.name}")
    kept = cell_ids[keep]
    obs_cell = grid.cell_of(observed.points)
    y = np.array([(obs_cell == c).sum() for c in kept], dtype=np.int64)
    rng = np.random.default_rng(seed + 1)
    draws = rng.poisson(Lam)
    return GridCounts(kept, y, Lam, draws)


# --------------------------------------------------------------------------
# Scores
# --------------------------------------------------------------------------


def poisson_mixture_moments(lam) -> tuple[float, float]:
    """Mean and variance of an equal-weight Poisson mixture with rates ``lam``."""
    lam = np.asarray(lam, dtype=float).ravel()
    mean = float(lam.mean())
    d = lam - lam[0]
    return mean, mean + max(float(np.mean(d * d) - np.mean(d) ** 2), 0.0)


def poisson_mixture_scores(lam, y: int) -> tuple[float, float, float, float, bool]:
    """SE, DS, LS and CRPS of an equal-weight Poisson mixture at count ``y``.

    Returns ``(se, ds, ls, crps, ls_flag)``; ``ls_flag`` marks an LS that
    underflowed and was replaced by :data:`LS_SENTINEL`.
    """
    lam = np.asarray(lam, dtype=float).ravel()
    y = int(y)
    mean, var = poisson_mixture_moments(lam)
    se = (y - mean) ** 2
    if var > 0:
        ds = se / var + math.log(var)
    else:
        ds = math.inf if se > 0 else -math.inf

    lam_max = float(lam.max())
    k_max = int(max(y, math.ceil(lam_max)) + math.ceil(40.0 * math.sqrt(lam_max)) + 40)
    k = np.arange(k_max + 1)
    # log pmf of every component on 0..k_max; xlogy keeps 0 * log(0) = 0
    logpmf = xlogy(k[None, :], lam[:, None]) - lam[:, None] - gammaln(k + 1.0)[None, :]

    logp = logpmf[:, y]
    flag = bool(np.max(logp) < math.log(_PMF_FLOOR))
    ls = LS_SENTINEL if flag else float(-(logsumexp(logp) - math.log(lam.size)))

    cdf = np.minimum(np.cumsum(np.exp(logpmf).mean(axis=0)), 1.0)
    crps = float(np.sum((cdf - (y <= k)) ** 2))
    return se, ds, ls, crps, flag


def gaussian_mixture_scores(mu, sigma2, y: float) -> tuple[float, float, float]:
    """SE, DS and LS of an equal-weight normal mixture at ``y``."""
    mu = np.asarray(mu, dtype=float).ravel()
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), mu.shape)
    if np.any(sigma2 <= 0):
        raise ValueError("mixture component variances must be positive")
    mean = float(mu.mean())
    d = mu - mu[0]
    var = float(sigma2.mean()) + max(float(np.mean(d * d) - np.mean(d) ** 2), 0.0)
    se = (y - mean) ** 2
    ds = se / var + math.log(var)
    logp = norm.logpdf(y, mu, np.sqrt(sigma2))
    ls = float(-(logsumexp(logp) - math.log(mu.size)))
    return se, ds, ls


@dataclass
class ScoreTable:
    """Per-unit scores for one fold and model.

    ``kind`` is ``"counts"`` (units are grid cells, CRPS present) or
    ``"sizes"`` (units are test points, CRPS absent).
    """

    kind: str
    fold: str
    model: str
    unit_ids: np.ndarray
    y_obs: np.ndarray
    se: np.ndarray
    ds: np.ndarray
    ls: np.ndarray
    crps: np.ndarray | None = None
    ls_flag: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.unit_ids.size)

    def score(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def rows(self):
        for k in range(len(self)):
            row = [self.fold, self.model, int(self.unit_ids[k]), _num(self.y_obs[k]),
                   _num(self.se[k]), _num(self.ds[k]), _num(self.ls[k])]
            if self.kind == "counts":
                row.append(_num(self.crps[k]))
            yield row

    def header(self) -> list[str]:
        if self.kind == "counts":
            return ["fold", "model", "cell_id", "y_obs", "se", "ds", "ls", "crps"]
        return ["fold", "model", "point_id", "y_obs", "se", "ds", "ls"]

    def write_csv(self, path, append: bool = False) -> None:
        mode = "a" if append else "w"
        with Path(path).open(mode, newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if not append:
                w.writerow(self.header())
            w.writerows(self.rows())


def _num(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def score_counts(gc: GridCounts, fold: str = "", model: str = "") -> ScoreTable:
    out = np.array([poisson_mixture_scores(gc.intensity[c], gc.y_obs[c]) for c in range(len(gc.cell_ids))],
                   dtype=float).reshape(-1, 5)
    n_flag = int(out[:, 4].sum())
    if n_flag:
        log.warning("%s/%s: %d cell(s) hit the LS underflow sentinel", fold, model, n_flag)
    return ScoreTable("counts", fold, model, gc.cell_ids.copy(), gc.y_obs.copy(),
                      out[:, 0], out[:, 1], out[:, 2], out[:, 3], out[:, 4].astype(bool))


def score_gaussian(post: Posterior, covariates: dict, test: PointData, n_samples: int = 1000,
                   seed: int = 0, fold: str = "", model: str = "",
                   samples: np.ndarray | None = None, point_ids=None) -> ScoreTable:
    """Score held-out log sizes against the normal-mixture predictive.

    ``point_ids`` labels the rows (default: position within ``test``).
    """
    if test.marks is None:
        raise ValueError("test points carry no marks")
    tau = post.noise_precision
    if tau is None or not tau > 0:
        raise ValueError("posterior has no positive noise precision")
    if samples is None:
        samples = sample_posterior(post, n_samples, seed)
    eta, valid = linear_predictor(post, covariates, test.points, samples)
    idx = np.flatnonzero(valid)
    if (~valid).any():
        log.warning("%s/%s: %d test point(s) with nodata covariates skipped", fold, model, int((~valid).sum()))
    res = np.array([gaussian_mixture_scores(eta[i], 1.0 / tau, test.marks[i]) for i in idx],
                   dtype=float).reshape(-1, 3)
    ids = idx if point_ids is None else np.asarray(point_ids, dtype=np.int64)[idx]
    return ScoreTable("sizes", fold, model, ids, test.marks[idx], res[:, 0], res[:, 1], res[:, 2])


# --------------------------------------------------------------------------
# Summaries and comparisons
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ECDF:
    """Empirical CDF with strict inequality: ``F(s) = #{S_i < s} / n``."""

    sorted_scores: np.ndarray

    def __call__(self, s):
        return np.searchsorted(self.sorted_scores, s, side="left") / self.sorted_scores.size

    def steps(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct score values and F just above each (``#{S_i <= v} / n``)."""
        vals = np.unique(self.sorted_scores)
        return vals, np.searchsorted(self.sorted_scores, vals, side="right") / self.sorted_scores.size

    def write_csv(self, path) -> None:
        vals, F = self.steps()
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delta", "F"])
            for v, f in zip(vals, F):
                w.writerow([repr(float(v)), repr(float(f))])


def ecdf(scores) -> ECDF:
    s = np.sort(np.asarray(scores, dtype=float).ravel())
    if s.size == 0:
        raise ValueError("ECDF of an empty score list")
    return ECDF(s)


@dataclass
class ScoreDifference:
    """``other - base`` per unit and score; negative means ``other`` is better."""

    fold: str
    unit_ids: np.ndarray
    deltas: dict
    ecdfs: dict = field(default_factory=dict)

    def raster(self, grid: CheckerGrid, score: str) -> Raster:
        return grid.to_raster(dict(zip(self.unit_ids.tolist(), self.deltas[score].tolist())))


def score_difference_map(base: ScoreTable, other: ScoreTable) -> ScoreDifference:
    if base.fold != other.fold or base.kind != other.kind:
        raise JoinError(f"cannot compare fold {base.fold}/{base.kind} with {other.fold}/{other.kind}")
    if base.unit_ids.shape != other.unit_ids.shape or not np.array_equal(
        np.sort(base.unit_ids), np.sort(other.unit_ids)
    ):
        raise JoinError("score tables cover different evaluation units")
    ob = np.argsort(base.unit_ids, kind="stable")
    oo = np.argsort(other.unit_ids, kind="stable")
    names = ["se", "ds", "ls"] + (["crps"] if base.kind == "counts" else [])
    deltas = {n: other.score(n)[oo] - base.score(n)[ob] for n in names}
    ecdfs = {n: ecdf(d) for n, d in deltas.items() if d.size}
    return ScoreDifference(base.fold, base.unit_ids[ob], deltas, ecdfs)


def summarise(tables) -> list[tuple]:
    """``(fold, model, rmse, ds, ls, crps)`` per table; crps is NaN for sizes."""
    rows = []
    for t in tables:
        crps = float(np.mean(t.crps)) if t.kind == "counts" and len(t) else math.nan
        if len(t):
            rows.append((t.fold, t.model, math.sqrt(float(np.mean(t.se))), float(np.mean(t.ds)),
                         float(np.mean(t.ls)), crps))
        else:
            rows.append((t.fold, t.model, math.nan, math.nan, math.nan, math.nan))
    return rows


def write_summary(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "model", "rmse", "ds", "ls", "crps"])
        for fold, model, *vals in rows:
            w.writerow([fold, model] + [repr(float(v)) for v in vals])
