"""Prediction surfaces, coefficient-of-variation maps and posterior summaries."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from ..raster import GridHeader, Raster
from .inference import Posterior, sample_posterior
from .latent import covariate_values, design_rows

__all__ = ["Prediction", "linear_predictor", "predict_raster", "population_cv",
           "posterior_summary", "write_posterior_summary"]

log = logging.getLogger(__name__)

_CHUNK = 4096


def linear_predictor(post: Posterior, covariates: dict, points, samples: np.ndarray,
                     unseen: dict | None = None):
    """Linear predictor per point and sample, shape ``(n_points, n_samples)``.

    Returns ``(eta, valid)``; rows with invalid covariates are NaN.
    """
    lm = post.model
    vals = covariate_values(lm.spec, covariates, points)
    n = len(np.asarray(points).reshape(-1, 2))
    valid = np.ones(n, dtype=bool)
    for v in vals.values():
        valid &= np.isfinite(v)
    A = design_rows(lm.blocks, {k: v[valid] for k, v in vals.items()}, int(valid.sum()),
                    lm.n_latent, unseen)
    eta = np.full((n, samples.shape[0]), np.nan)
    eta[valid] = A @ samples.T
    return eta, valid


def population_cv(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """std / mean with population variance, computed on shifted data.

    Shifting by the first sample makes identical samples give exactly 0.
    """
    v = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    d = v - v[..., :1]
    var = np.maximum(np.mean(d * d, axis=-1) - np.mean(d, axis=-1) ** 2, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(var) / np.mean(v, axis=-1)


@dataclass
class Prediction:
    """Posterior summary surfaces on a grid.

    ``mean`` is the mean intensity per km^2 (centroid models) or the mean
    log-size (size models); ``cv`` is the coefficient of variation of
    ``exp(eta)``; ``effects`` maps term label to its mean contribution.
    """

    mean: Raster
    cv: Raster
    effects: dict
    unseen_levels: dict = field(default_factory=dict)
    samples: np.ndarray | None = None


def predict_raster(post: Posterior, covariates: dict, target: GridHeader, n_samples: int = 100,
                   seed: int | None = None, samples: np.ndarray | None = None,
                   keep_samples: bool = False) -> Prediction:
    """Evaluate the fitted model at every cell centre of ``target``."""
    lm = post.model
    if samples is None:
        samples = sample_posterior(post, n_samples, seed)
    xc, yc = target.cell_centers()
    pts = np.column_stack([xc.ravel(), yc.ravel()])
    n = len(pts)
    mean = np.full(n, np.nan)
    cv = np.full(n, np.nan)
    effects = {b.label: np.full(n, np.nan) for b in lm.blocks}
    per_sample = np.full((n, samples.shape[0]), np.nan) if keep_samples else None
    unseen: dict = {}
    centroids = lm.spec.response == "centroids"
    for lo in range(0, n, _CHUNK):
        chunk = pts[lo : lo + _CHUNK]
        eta, valid = linear_predictor(post, covariates, chunk, samples, unseen)
        sl = slice(lo, lo + len(chunk))
        with np.errstate(over="ignore"):
            e = np.exp(eta)
        mean[sl] = e.mean(axis=1) if centroids else eta.mean(axis=1)
        cv[sl] = population_cv(e, axis=1)
        if keep_samples:
            per_sample[sl] = eta
        vals = covariate_values(lm.spec, covariates, chunk)
        for b in lm.blocks:
            sub = [b]
            A = design_rows(sub, {k: v[valid] for k, v in vals.items()}, int(valid.sum()),
                            lm.n_latent)
            contrib = np.full(len(chunk), np.nan)
            contrib[valid] = A @ samples.T.mean(axis=1)
            effects[b.label][sl] = contrib
    for (label, code), count in unseen.items():
        log.warning("%s: level %d of %s unseen in training at %d cell(s); effect set to 0",
                    lm.spec.name, code, label, count)
    hdr = target
    return Prediction(
        mean=Raster.from_masked(hdr, mean),
        cv=Raster.from_masked(hdr, cv),
        effects={k: Raster.from_masked(hdr, v) for k, v in effects.items()},
        unseen_levels=unseen,
        samples=per_sample,
    )


def posterior_summary(post: Posterior) -> list[tuple]:
    """Rows ``(term, level_or_bin, mean, sd, q025, q975)`` of the latent marginals."""
    sd = post.sd()
    z = norm.ppf(0.975)
    rows = []
    for b in post.model.blocks:
        for k, lab in enumerate(b.level_labels()):
            i = b.start + k
            m = float(post.mode[i])
            rows.append((b.label, lab, m, float(sd[i]), m - z * sd[i], m + z * sd[i]))
    return rows


def write_posterior_summary(post: Posterior, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "level_or_bin", "mean", "sd", "q025", "q975"])
        for term, lab, m, s, lo, hi in posterior_summary(post):
            w.writerow([term, lab, repr(m), repr(float(s)), repr(float(lo)), repr(float(hi))])
