"""Stage runners behind the command line: terrain, mesh, fit, cv and sweep.

One flat ``key = value`` file configures a whole run. Every stage reads its
inputs from the config and writes into ``out_dir``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import assess
from .channel import fd2ch, rf2ch, write_channel_csv
from .flow import accumulate, contributing_cells, d8_flow, fill_depressions
from .mesh import Quadrature, build_mesh, quadrature_of, write_mesh_csv
from .model import (
    ConfigError,
    PointData,
    build_design,
    fit,
    predict_raster,
    preset,
    write_posterior_summary,
)
from .raster import Raster, read_ascii_grid, read_points_csv, resample, write_ascii_grid
from .steepness import KsnParams, concavity_sweep, ksn_raster, masked_nearest_fill

__all__ = ["PipelineConfig", "load_config", "run_terrain", "run_mesh", "run_fit", "run_cv", "run_sweep",
           "StageError"]

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """Wraps a failure with the name of the stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _names(s: str) -> tuple:
    return tuple(v.strip() for v in s.split(",") if v.strip())


@dataclass
class PipelineConfig:
    dem: Path | None = None
    pga: Path | None = None
    landcover: Path | None = None
    geology: Path | None = None
    points: Path | None = None
    glacial_mask: Path | None = None
    out_dir: Path = Path("ksnslide_out")
    threshold_pixels: int = 1000
    theta: float = 0.5
    window_nodes: int = 9
    target_tri_area: float = 1e5
    grid_size: float = 3000.0
    n_samples: int = 1000
    n_map_samples: int = 100
    split_seed: int = 0
    sample_seed: int = 0
    sim_seed: int = 0
    presets: tuple = ("fit1a", "fit2a", "fit3a", "fit4a", "fit5a", "fit6a",
                      "fit1b", "fit2b", "fit3b", "fit4b", "fit5b", "fit6b")
    reference: str = "fit1a"
    cv_kinds: tuple = ("thinning", "grid")
    sweep_thetas: tuple = (0.4, 0.45, 0.5, 0.55, 0.6)
    sweep_thresholds: tuple = (500, 1000, 2000)
    base_dir: Path = field(default=Path("."), repr=False)

    _PATHS = ("dem", "pga", "landcover", "geology", "points", "glacial_mask", "out_dir")
    _PARSERS = {
        "threshold_pixels": int, "theta": float, "window_nodes": int, "target_tri_area": float,
        "grid_size": float, "n_samples": int, "n_map_samples": int, "split_seed": int,
        "sample_seed": int, "sim_seed": int, "presets": _names, "reference": str,
        "cv_kinds": _names, "sweep_thetas": _floats, "sweep_thresholds": _ints,
    }

    def validate(self, need=("dem",)) -> "PipelineConfig":
        for key in need:
            p = getattr(self, key)
            if p is None:
                raise ConfigError(f"config key {key!r} is required for this command")
            if not Path(p).is_file():
                raise ConfigError(f"{key} file not found: {p}")
        if self.glacial_mask is not None and not Path(self.glacial_mask).is_file():
            raise ConfigError(f"glacial_mask file not found: {self.glacial_mask}")
        if self.threshold_pixels < 1:
            raise ConfigError("threshold_pixels must be >= 1")
        if not 0.0 < self.theta < 1.0:
            raise ConfigError("theta must lie in (0, 1)")
        if self.window_nodes < 3 or self.window_nodes % 2 == 0:
            raise ConfigError("window_nodes must be odd and >= 3")
        if not self.target_tri_area > 0 or not self.grid_size > 0:
            raise ConfigError("target_tri_area and grid_size must be positive")
        if self.n_samples < 2 or self.n_map_samples < 2:
            raise ConfigError("n_samples and n_map_samples must be >= 2")
        for name in self.presets + (self.reference,):
            preset(name)
        for k in self.cv_kinds:
            if k not in ("thinning", "grid"):
                raise ConfigError(f"unknown cv kind {k!r}; choose thinning, grid")
        return self

    @property
    def terrain_dir(self) -> Path:
        return Path(self.out_dir) / "terrain"


def load_config(source, overrides: dict | None = None) -> PipelineConfig:
    """Parse a flat config file (``#`` comments allowed); relative paths
    resolve against the file's directory."""
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        raw[k] = v
    raw.update(overrides or {})
    cfg = PipelineConfig(base_dir=path.parent)
    known = {f.name for f in fields(PipelineConfig)} - {"base_dir"}
    for k, v in raw.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        if k in PipelineConfig._PATHS:
            p = Path(v)
            setattr(cfg, k, p if p.is_absolute() else path.parent / p)
        else:
            try:
                setattr(cfg, k, PipelineConfig._PARSERS[k](v))
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from None
    return cfg


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (ConfigError, StageError):
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


# --------------------------------------------------------------------------
# terrain
# --------------------------------------------------------------------------


@_stage("terrain")
def run_terrain(cfg: PipelineConfig) -> dict:
    """Fill, route, extract channels and compute ksn, Fd2Ch and Rf2Ch.

    Returns the written paths plus a ``mass_balance`` QA flag.
    """
    cfg.validate(("dem",))
    out = cfg.terrain_dir
    out.mkdir(parents=True, exist_ok=True)
    dem = read_ascii_grid(cfg.dem)
    filled = fill_depressions(dem)
    ff = d8_flow(filled)
    cells = contributing_cells(ff)
    acc = accumulate(ff)
    roots = ff.roots()
    balanced = int(cells[roots].sum()) == int(ff.valid.sum())
    if not balanced:
        raise ArithmeticError("outlet accumulation does not match the valid cell count")
    params = KsnParams(cfg.theta, cfg.window_nodes, cfg.threshold_pixels)
    net, prof, node_ksn, ksn = ksn_raster(ff, acc, filled, params)
    mask = None
    if cfg.glacial_mask is not None:
        mask = read_ascii_grid(cfg.glacial_mask)
        if not mask.header.aligned(dem.header):
            mask = resample(mask, dem.header, "nearest")
    ksn = masked_nearest_fill(ksn, mask)
    valid = filled.valid_mask()
    ksn = Raster.from_masked(dem.header, np.where(valid, ksn.masked(), np.nan))
    qa: dict = {}
    paths = {
        "filled_dem": out / "filled_dem.asc",
        "accumulation": out / "accumulation.asc",
        "ksn": out / "ksn.asc",
        "fd2ch": out / "fd2ch.asc",
        "rf2ch": out / "rf2ch.asc",
        "channels": out / "channels.csv",
    }
    write_ascii_grid(filled, paths["filled_dem"])
    write_ascii_grid(acc, paths["accumulation"])
    write_ascii_grid(ksn, paths["ksn"])
    write_ascii_grid(fd2ch(ff, net), paths["fd2ch"])
    write_ascii_grid(rf2ch(ff, net, filled, qa), paths["rf2ch"])
    write_channel_csv(net, paths["channels"], prof.chi, node_ksn)
    log.info("terrain: %d channel nodes, %d outlets", net.n_nodes, roots.size)
    return {"paths": paths, "mass_balance": balanced, "n_channel_nodes": net.n_nodes, **qa}


# --------------------------------------------------------------------------
# inputs shared by mesh / fit / cv
# --------------------------------------------------------------------------


def _load_covariates(cfg: PipelineConfig) -> dict:
    t = cfg.terrain_dir
    needed = {k: t / f"{k}.asc" for k in ("ksn", "fd2ch", "rf2ch")}
    needed["dem"] = t / "filled_dem.asc"
    for k, p in needed.items():
        if not p.is_file():
            raise ConfigError(f"terrain output {p} missing; run `terrain` first")
    cov = {k: read_ascii_grid(p) for k, p in needed.items()}
    target = cov["dem"].header
    for key, method in (("pga", "bilinear"), ("landcover", "nearest"), ("geology", "nearest")):
        r = read_ascii_grid(getattr(cfg, key))
        cov[key] = r if r.header.aligned(target) else resample(r, target, method)
    return cov


def _region(cov: dict) -> Raster:
    dem = cov["dem"]
    return dem.with_data(np.where(dem.valid_mask(), 1, 0).astype(np.int64))


def _load_points(cfg: PipelineConfig) -> PointData:
    xy, marks = read_points_csv(cfg.points)
    if len(xy) == 0:
        raise ValueError("point table is empty")
    return PointData(xy, marks)


def _quadrature(cfg: PipelineConfig, cov: dict) -> Quadrature:
    return quadrature_of(build_mesh(_region(cov), cfg.target_tri_area))


@_stage("mesh")
def run_mesh(cfg: PipelineConfig) -> dict:
    cfg.validate(("dem",))
    dem = read_ascii_grid(cfg.terrain_dir / "filled_dem.asc") if (cfg.terrain_dir / "filled_dem.asc").is_file() \
        else read_ascii_grid(cfg.dem)
    region = dem.with_data(np.where(dem.valid_mask(), 1, 0).astype(np.int64))
    mesh = build_mesh(region, cfg.target_tri_area)
    quad = quadrature_of(mesh)
    out = Path(cfg.out_dir) / "mesh"
    out.mkdir(parents=True, exist_ok=True)
    write_mesh_csv(mesh, out / "vertices.csv", out / "triangles.csv")
    with (out / "quadrature.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "weight_m2"])
        for (x, y), wt in zip(quad.points, quad.weights):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(wt))])
    return {"n_triangles": mesh.n_triangles, "n_quadrature": len(quad), "total_weight_m2": quad.total}


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------


@_stage("fit")
def run_fit(cfg: PipelineConfig, preset_name: str) -> dict:
    """Fit one preset on all points and write summary and prediction rasters."""
    spec = preset(preset_name)
    cfg.validate(("dem", "pga", "landcover", "geology", "points"))
    cov = _load_covariates(cfg)
    pts = _load_points(cfg)
    quad = _quadrature(cfg, cov) if spec.response == "centroids" else None
    lm = build_design(spec, pts, cov, quad)
    post = fit(lm, seed=cfg.sample_seed)
    out = Path(cfg.out_dir) / "fit" / spec.name
    out.mkdir(parents=True, exist_ok=True)
    write_posterior_summary(post, out / "posterior_summary.csv")
    pred = predict_raster(post, cov, cov["dem"].header, cfg.n_map_samples, cfg.sample_seed)
    write_ascii_grid(pred.mean, out / "mean.asc")
    write_ascii_grid(pred.cv, out / "cv.asc")
    for label, r in pred.effects.items():
        write_ascii_grid(r, out / f"effect_{_safe(label)}.asc")
    with (out / "hyper.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "value"])
        for k, v in post.hyper.items():
            w.writerow([k, repr(v)])
        w.writerow(["log_marginal", repr(post.log_marginal)])
    return {"posterior": post, "out_dir": out}


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label).strip("_")


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------


@dataclass
class _Fold:
    name: str
    train: np.ndarray  # boolean over points
    eval_cells: np.ndarray
    quad_train: np.ndarray  # boolean over quadrature nodes
    scale: float


def _folds(cfg: PipelineConfig, pts: PointData, quad: Quadrature, grid: assess.CheckerGrid) -> list[_Fold]:
    folds = []
    all_cells = np.arange(grid.n_cells)
    if "thinning" in cfg.cv_kinds:
        a = assess.thinning_assignment(len(pts), cfg.split_seed)
        for name, train in (("thinning_A", a), ("thinning_B", ~a)):
            n_tr, n_te = int(train.sum()), int((~train).sum())
            folds.append(_Fold(name, train, all_cells, np.ones(len(quad), dtype=bool), n_te / n_tr))
    if "grid" in cfg.cv_kinds:
        for fold in ("white", "black"):
            g = assess.CheckerGrid(grid.lattice, fold)
            folds.append(_Fold(f"grid_{fold}", g.point_is_train(pts.points), g.test_cells(),
                               g.point_is_train(quad.points), 1.0))
    return folds


@_stage("cv")
def run_cv(cfg: PipelineConfig, presets=None) -> dict:
    """All folds x all presets; writes score tables, summaries, ECDFs and maps."""
    cfg.validate(("dem", "pga", "landcover", "geology", "points"))
    names = tuple(presets) if presets else cfg.presets
    specs = [preset(n) for n in names]
    cov = _load_covariates(cfg)
    pts = _load_points(cfg)
    quad = _quadrature(cfg, cov)
    grid = assess.chequerboard_split(cov["dem"].header, cfg.grid_size, "white")
    if pts.marks is None and any(s.response == "log_sizes" for s in specs):
        raise ConfigError("log-size presets need a value column (log size) in the point table")
    out = Path(cfg.out_dir) / "cv"
    out.mkdir(parents=True, exist_ok=True)
    point_ids = np.arange(len(pts))
    tables: dict = {}
    for fold in _folds(cfg, pts, quad, grid):
        train_pts = pts.subset(fold.train)
        test_pts = pts.subset(~fold.train)
        for spec in specs:
            log.info("cv: fold %s, model %s", fold.name, spec.name)
            if spec.response == "centroids":
                q = quad.subset(fold.quad_train)
                post = fit(build_design(spec, train_pts, cov, q), seed=cfg.sample_seed)
                gc = assess.predictive_counts(post, cov, quad, grid, fold.eval_cells, test_pts,
                                              cfg.n_samples, cfg.sample_seed, fold.scale)
                tables[(fold.name, spec.name)] = assess.score_counts(gc, fold.name, spec.name)
            else:
                post = fit(build_design(spec, train_pts, cov), seed=cfg.sample_seed)
                tables[(fold.name, spec.name)] = assess.score_gaussian(
                    post, cov, test_pts, cfg.n_samples, cfg.sample_seed, fold.name, spec.name,
                    point_ids=point_ids[~fold.train])
    written = _write_cv_outputs(cfg, out, tables, grid)
    return {"tables": tables, "paths": written}


def _write_cv_outputs(cfg, out: Path, tables: dict, grid: assess.CheckerGrid) -> dict:
    paths = {}
    for kind in ("counts", "sizes"):
        group = [t for t in tables.values() if t.kind == kind]
        if not group:
            continue
        tag = "centroids" if kind == "counts" else "sizes"
        p = out / f"scores_{tag}.csv"
        for i, t in enumerate(group):
            t.write_csv(p, append=i > 0)
        s = out / f"summary_{tag}.csv"
        assess.write_summary(assess.summarise(group), s)
        paths[f"scores_{tag}"], paths[f"summary_{tag}"] = p, s

    # differences against the reference model of the same response
    ref_a = cfg.reference
    ref_b = ref_a[:-1] + "b" if ref_a.endswith("a") else ref_a
    folds = sorted({f for f, _ in tables})
    for fold in folds:
        for (f, model), t in sorted(tables.items()):
            if f != fold:
                continue
            ref = ref_a if t.kind == "counts" else ref_b
            if model == ref or (fold, ref) not in tables:
                continue
            diff = assess.score_difference_map(tables[(fold, ref)], t)
            for score, e in diff.ecdfs.items():
                e.write_csv(out / f"ecdf_{fold}_{model}_{score}.csv")
                if t.kind == "counts":
                    g = assess.CheckerGrid(grid.lattice, "white")
                    write_ascii_grid(diff.raster(g, score), out / f"delta_{fold}_{model}_{score}.asc")
    return paths


# --------------------------------------------------------------------------
# concavity sweep
# --------------------------------------------------------------------------


@_stage("sweep")
def run_sweep(cfg: PipelineConfig) -> dict:
    cfg.validate(("dem",))
    dem = read_ascii_grid(cfg.dem)
    filled = fill_depressions(dem)
    ff = d8_flow(filled)
    acc = accumulate(ff)
    thetas = list(cfg.sweep_thetas)
    if cfg.theta not in thetas:
        thetas.insert(0, cfg.theta)
    res = concavity_sweep(ff, acc, filled, thetas, cfg.sweep_thresholds, cfg.window_nodes)
    out = Path(cfg.out_dir) / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    res.write_correlations(out / "correlations.csv")
    for (th, thr), r in sorted(res.rasters.items()):
        write_ascii_grid(r, out / f"ksn_theta{th:g}_thr{thr}.asc")
    return {"result": res, "out_dir": out}
