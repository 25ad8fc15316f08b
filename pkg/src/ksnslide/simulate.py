"""Synthetic terrain, covariates and landslide inventories with known truth.

Used by the acceptance tests and the ``simulate`` subcommand.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .flow import FlowField, contributing_cells, d8_flow, fill_depressions
from .raster import GridHeader, Raster, write_ascii_grid, write_points_csv

__all__ = [
    "steady_state_dem",
    "smooth_field",
    "categorical_field",
    "simulate_poisson_points",
    "SyntheticStudy",
    "write_synthetic_study",
]

log = logging.getLogger(__name__)


def _integrate_profile(ff: FlowField, ksn: np.ndarray, theta: float, base: np.ndarray) -> np.ndarray:
    area = contributing_cells(ff).astype(float) * ff.header.cell_area
    integrand = (1.0 / area) ** theta
    step = ff.step_length()
    rec = ff.receiver.tolist()
    z = base.copy()
    zl = z.tolist()
    integ = integrand.tolist()
    st = step.tolist()
    k = ksn.tolist()
    for c in ff.stack.tolist():
        r = rec[c]
        if r != c:
            zl[c] = zl[r] + k[c] * 0.5 * (integ[c] + integ[r]) * st[c]
    return np.asarray(zl)


def steady_state_dem(nrows: int, ncols: int, cell_size: float = 30.0, ksn=100.0, theta: float = 0.5,
                     seed: int = 0, max_iter: int = 300) -> Raster:
    """Topography whose every channel obeys ``dz/dchi = ksn`` exactly.

    Starts from a south-draining surface with regularly spaced valleys and
    repeatedly re-integrates elevations up the D8 flow network,
    ``z_c = z_r + ksn_c * ((1/A_c)^theta + (1/A_r)^theta) / 2 * dx``, until
    the receivers stop changing. Outlets sit at z = 0. ``ksn`` may be a
    scalar or a per-cell array.

    Raises
    ------
    RuntimeError
        If routing has not settled after ``max_iter`` iterations.
    """
    h = GridHeader(ncols, nrows, 0.0, 0.0, float(cell_size))
    rng = np.random.default_rng(seed)
    k = np.broadcast_to(np.asarray(ksn, dtype=float), (nrows, ncols)).ravel().copy()
    if np.any(k <= 0):
        raise ValueError("ksn must be positive")
    yy, xx = np.mgrid[0:nrows, 0:ncols]
    period = max(ncols / 4.0, 5.0)
    z = (nrows - 1 - yy) * 1.0 + 30.0 * np.abs(np.sin(np.pi * xx / period)) + 0.5 * rng.random((nrows, ncols))
    base = np.zeros(h.size)
    prev = None
    for it in range(max_iter):
        dem = Raster(h, z)
        ff = d8_flow(fill_depressions(dem) if it == 0 else dem)
        rec = ff.receiver
        if prev is not None and np.array_equal(prev, rec):
            break
        prev = rec.copy()
        z = _integrate_profile(ff, k, theta, base).reshape(nrows, ncols)
    else:
        raise RuntimeError(f"steady-state routing did not settle in {max_iter} iterations")
    log.debug("steady state reached after %d iterations", it)
    return Raster(h, z)


def smooth_field(header: GridHeader, seed: int, length_scale: float = 1000.0,
                 standardise: bool = True) -> Raster:
    """Gaussian-filtered white noise on ``header`` (zero mean, unit sd)."""
    rng = np.random.default_rng(seed)
    sigma = max(length_scale / header.cell_size, 0.5)
    f = gaussian_filter(rng.standard_normal(header.shape), sigma, mode="wrap")
    if standardise:
        sd = f.std()
        f = (f - f.mean()) / (sd if sd > 0 else 1.0)
    return Raster(header, f)


def categorical_field(header: GridHeader, n_levels: int, seed: int, length_scale: float = 1500.0,
                      first_code: int = 1) -> Raster:
    """Patchy integer classes from quantiles of a smooth field."""
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    f = smooth_field(header, seed, length_scale).data
    cuts = np.quantile(f, np.linspace(0, 1, n_levels + 1)[1:-1])
    codes = np.searchsorted(cuts, f).astype(np.int64) + first_code
    return Raster(header, codes)


def simulate_poisson_points(log_intensity: Raster, seed: int) -> np.ndarray:
    """Points from the cell-wise constant intensity ``exp(log_intensity)`` per km^2.

    Cells with nodata get intensity 0. Positions are uniform within cells.
    """
    h = log_intensity.header
    rng = np.random.default_rng(seed)
    eta = log_intensity.masked().ravel()
    lam = np.where(np.isfinite(eta), np.exp(np.nan_to_num(eta, nan=-np.inf)), 0.0) * h.cell_area / 1e6
    n = rng.poisson(lam)
    cells = np.repeat(np.arange(h.size), n)
    xc, yc = h.cell_centers()
    u = rng.random((cells.size, 2)) - 0.5
    return np.column_stack([xc.ravel()[cells] + u[:, 0] * h.cell_size,
                            yc.ravel()[cells] + u[:, 1] * h.cell_size])


@dataclass
class SyntheticStudy:
    """Paths and truth of a simulated study area."""

    config_path: Path
    n_points: int
    truth: dict


def write_synthetic_study(out_dir, seed: int = 0, nrows: int = 100, ncols: int = 100,
                          cell_size: float = 100.0, threshold_pixels: int = 20,
                          expected_points: float = 1500.0) -> SyntheticStudy:
    """Write DEM, covariates, an inventory and a run config to ``out_dir``.

    Centroids follow a fit6a-form truth: a smooth PGA effect, a log1p(ksn)
    effect, an ``exp(-fd2ch)`` effect and class effects. Marks (log sizes)
    are normal around a linear log-PGA and log1p(ksn) predictor.
    """
    from .channel import extract_channels, fd2ch as _fd2ch
    from .flow import accumulate
    from .steepness import KsnParams, ksn_raster, masked_nearest_fill

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    s_dem, s_pga, s_lc, s_geo, s_pts, s_mark, s_ksn = (int(s.generate_state(1)[0]) for s in ss.spawn(7))

    h = GridHeader(ncols, nrows, 0.0, 0.0, float(cell_size))
    ksn_true = 60.0 + 40.0 * np.exp(smooth_field(h, s_ksn, 20 * cell_size).data)
    dem = steady_state_dem(nrows, ncols, cell_size, ksn_true, 0.5, s_dem)
    valid = dem.valid_mask()
    pga = smooth_field(h, s_pga, 25 * cell_size).data
    pga = 0.35 + 0.1 * pga
    pga = np.clip(pga, 0.05, None)
    lc = categorical_field(h, 4, s_lc)
    geo = categorical_field(h, 3, s_geo)

    ff = d8_flow(dem)
    acc = accumulate(ff)
    _, _, _, ksn = ksn_raster(ff, acc, dem, KsnParams(0.5, 9, threshold_pixels))
    ksn = masked_nearest_fill(ksn)
    net = extract_channels(ff, acc, threshold_pixels)
    fd = _fd2ch(ff, net)

    lc_eff = {1: 0.3, 2: -0.1, 3: 0.0, 4: -0.2}
    geo_eff = {1: 0.2, 2: -0.2, 3: 0.0}
    beta = {"pga": 3.0, "log1p_ksn": 0.5, "exp_neg_fd2ch": 1.0}
    lin = (beta["pga"] * (pga - 0.35) + beta["log1p_ksn"] * np.log1p(ksn.masked())
           + beta["exp_neg_fd2ch"] * np.exp(-fd.masked())
           + np.vectorize(lc_eff.get)(lc.data) + np.vectorize(geo_eff.get)(geo.data))
    lin = np.where(valid, lin, np.nan)
    area_km2 = valid.sum() * h.cell_area / 1e6
    beta0 = float(np.log(expected_points / area_km2) - np.log(np.nanmean(np.exp(lin))))
    eta = Raster.from_masked(h, beta0 + lin)
    pts = simulate_poisson_points(eta, s_pts)
    rng = np.random.default_rng(s_mark)
    rr, cc, _ = h.index_of(pts[:, 0], pts[:, 1])
    mark_mean = 6.0 + 0.8 * np.log(pga[rr, cc]) + 0.2 * np.log1p(ksn.data[rr, cc])
    marks = mark_mean + 0.5 * rng.standard_normal(len(pts))

    write_ascii_grid(dem, out / "dem.asc")
    write_ascii_grid(Raster.from_masked(h, np.where(valid, pga, np.nan)), out / "pga.asc")
    write_ascii_grid(Raster(h, np.where(valid, lc.data, -9999)), out / "landcover.asc")
    write_ascii_grid(Raster(h, np.where(valid, geo.data, -9999)), out / "geology.asc")
    write_points_csv(out / "points.csv", pts, marks, "log_size")
    cfg = out / "run.cfg"
    cfg.write_text(
        "\n".join(
            [
                "# synthetic study written by `ksnslide simulate`",
                "dem = dem.asc",
                "pga = pga.asc",
                "landcover = landcover.asc",
                "geology = geology.asc",
                "points = points.csv",
                "out_dir = run",
                f"threshold_pixels = {threshold_pixels}",
                "theta = 0.5",
                "window_nodes = 9",
                # half-pixel triangles: every cell centre gets its own quadrature node.
                # The synthetic covariates are rough at the pixel scale and the inventory
                # is dense, so coarser meshes alias the fd2ch channel lines and can leave
                # level/bin combinations with points but no quadrature.
                f"target_tri_area = {h.cell_area / 2!r}",
                "grid_size = 3000",
                "n_samples = 200",
                "n_map_samples = 100",
                "split_seed = 1",
                "sample_seed = 2",
                f"sim_seed = {seed}",
                "presets = fit1a,fit6a,fit1b",
            ]
        )
        + "\n"
    )
    truth = {"beta0": beta0, **beta, "landcover": lc_eff, "geology": geo_eff}
    return SyntheticStudy(cfg, len(pts), truth)
