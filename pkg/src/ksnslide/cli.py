"""Command-line entry point: ``ksnslide <command> --config run.cfg``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical
failure (1 for anything unexpected). Failures print a single line
``error code=<n> stage=<stage> type=<exception> msg=<json string>`` to
stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys

import numpy as np

from . import __version__
from .flow import FlowConsistencyError
from .model import ConfigError, DivergenceError, preset

log = logging.getLogger("ksnslide")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3, 4


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DivergenceError, FlowConsistencyError, ArithmeticError, np.linalg.LinAlgError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (ValueError, OSError, KeyError, IndexError)):
        return EXIT_DATA
    return EXIT_INTERNAL


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ksnslide", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", "-c", required=True, help="flat key = value run file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        return sp

    with_config("terrain", "fill, route, channels, ksn, fd2ch, rf2ch")
    with_config("mesh", "triangulate the DEM footprint and write quadrature")
    sp = with_config("fit", "fit one preset on all points; write summary and maps")
    sp.add_argument("--preset", required=True)
    sp = with_config("cv", "thinning and chequerboard cross-validation of presets")
    sp.add_argument("--presets", default=None, help="comma-separated presets (default: config)")
    with_config("sweep", "ksn sensitivity to concavity and channel threshold")
    sp = sub.add_parser("simulate", help="write a synthetic study area with known truth")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=100, help="grid rows and columns")
    sp.add_argument("--cell-size", type=float, default=100.0)
    return p


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run(args) -> None:
    from . import pipeline

    if args.command == "simulate":
        from .simulate import write_synthetic_study

        if args.size < 20:
            raise ConfigError("--size must be >= 20")
        study = write_synthetic_study(args.out, args.seed, args.size, args.size, args.cell_size)
        print(f"wrote {study.n_points} points; config {study.config_path}")
        return
    cfg = pipeline.load_config(args.config, _overrides(args.set))
    if args.command == "terrain":
        res = pipeline.run_terrain(cfg)
        print(f"terrain ok: {res['n_channel_nodes']} channel nodes, mass balance {res['mass_balance']}")
    elif args.command == "mesh":
        res = pipeline.run_mesh(cfg)
        print(f"mesh ok: {res['n_triangles']} triangles, {res['n_quadrature']} quadrature nodes")
    elif args.command == "fit":
        preset(args.preset)
        res = pipeline.run_fit(cfg, args.preset)
        print(f"fit ok: {res['out_dir']}")
    elif args.command == "cv":
        presets = None
        if args.presets:
            presets = [s.strip() for s in args.presets.split(",") if s.strip()]
            for name in presets:
                preset(name)
        res = pipeline.run_cv(cfg, presets)
        print(f"cv ok: {len(res['tables'])} fold/model tables")
    elif args.command == "sweep":
        res = pipeline.run_sweep(cfg)
        print(f"sweep ok: {len(res['result'].correlations)} correlations")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the config code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import StageError

    try:
        with _threads(args.threads):
            _run(args)
    except Exception as exc:
        stage = exc.stage if isinstance(exc, StageError) else args.command
        cause = exc.cause if isinstance(exc, StageError) else exc
        code = _exit_code(cause)
        msg = json.dumps(str(cause))
        print(f"error code={code} stage={stage} type={type(cause).__name__} msg={msg}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            log.debug("unexpected failure", exc_info=True)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
