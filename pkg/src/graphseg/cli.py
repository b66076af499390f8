"""Command-line entry points: `graphseg segment` and `graphseg simulate`."""

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import List, Optional

from graphseg import __version__
from graphseg.errors import GraphsegError, NumericalError, SelectionError, ValidationError
from graphseg.io import (
    FLOAT_FORMAT,
    RunConfig,
    fit_problem,
    load_mapping,
    load_problem,
    polygon_features,
    write_bundle,
    write_feature_collection,
)
from graphseg.segment import ArConfig
from graphseg.select import Criterion
from graphseg.sim import ExperimentSpec, grid_polygons, run_experiment
from graphseg.sparse import EXACT_TRACE_LIMIT, TraceMode, default_threads

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3


def configure_logging(verbose: int = 0, quiet: bool = False) -> None:
    level = logging.WARNING if quiet else (logging.DEBUG if verbose else logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _add_solver_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epsilon", type=float, help="Weight-update epsilon (default: 1e-6)")
    parser.add_argument("--tol", type=float, help="Convergence tolerance on delta (default: 1e-8)")
    parser.add_argument("--cutoff", type=float, help="Delta cutoff for cut edges (default: 0.99)")
    parser.add_argument("--max-iter", type=int, dest="max_iter", help="Iteration cap per penalty (default: 10000)")
    parser.add_argument("--lambda-min", type=float, dest="lambda_min", help="Smallest penalty of the grid")
    parser.add_argument("--lambda-max", type=float, dest="lambda_max", help="Largest penalty of the grid")
    parser.add_argument("--lambda-count", type=int, dest="lambda_count", help="Number of penalties (default: 50)")
    parser.add_argument("--trace", choices=[m.value for m in TraceMode],
                        help="Effective dimension mode (default: exact)")
    parser.add_argument("--probes", type=int, help="Hutchinson probes in stochastic mode (default: 64)")
    parser.add_argument("--threads", type=int, help="Worker threads (default: $GRAPHSEG_THREADS or min(4, cpus))")
    parser.add_argument("--seed", type=int, help="Seed for stochastic traces and simulations (default: 0)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="count", help="Debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="Only warnings and errors")

    parser = argparse.ArgumentParser(
        prog="graphseg",
        description="Segment graph signals into constant zones with the graph-fused adaptive ridge",
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    seg = commands.add_parser(
        "segment", parents=[common], argument_default=argparse.SUPPRESS,
        help="Fit a penalty path and extract zones",
    )
    seg.add_argument("--config", metavar="FILE", help="JSON or YAML config; flags override its values")
    source = seg.add_mutually_exclusive_group()
    source.add_argument("--graph", metavar="CSV", help="Edge list with columns src,dst")
    source.add_argument("--geojson", metavar="FILE", help="Polygon FeatureCollection (rook contiguity)")
    seg.add_argument("--values", metavar="CSV", help="Signal with columns id,value")
    seg.add_argument("--precision", metavar="MTX", help="Matrix Market noise precision (default: identity)")
    seg.add_argument("--centroids", metavar="CSV", help="Centroids with columns id,x,y for bridging")
    seg.add_argument("--bridge", action="store_true", help="Join disconnected components by closest centroids")
    seg.add_argument("--lambdas", type=float, nargs="+", metavar="LAMBDA", help="Explicit ascending penalties")
    seg.add_argument("--criterion", choices=[c.value for c in Criterion], help="Selection criterion (default: aic)")
    seg.add_argument("--refit", action="store_true", help="Report per-zone generalized means instead of shrinkage")
    seg.add_argument("--no-warm-start", action="store_false", dest="warm_start", help="Cold start every penalty")
    seg.add_argument("--rook-tol", type=float, dest="rook_tol", help="Coordinate quantum for shared borders")
    seg.add_argument("--out", metavar="DIR", help="Write the result bundle here")
    _add_solver_flags(seg)

    sim = commands.add_parser(
        "simulate", parents=[common], argument_default=argparse.SUPPRESS,
        help="Run the grid simulation study",
    )
    sim.add_argument("--spec", metavar="FILE", help="Scenario spec (JSON or YAML); default 20x20 grid, 4 zones")
    sim.add_argument("--sigmas", type=float, nargs="+", help="Override the noise levels")
    sim.add_argument("--out", metavar="DIR", help="Output directory (default: current directory)")
    _add_solver_flags(sim)
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    data = load_mapping(args.config) if "config" in args else {}
    data = {key.replace("-", "_"): value for key, value in data.items()}
    names = {f.name for f in fields(RunConfig)}
    data.update({k: v for k, v in vars(args).items() if k in names})
    return RunConfig.from_dict(data)


def _ar_overrides(args: argparse.Namespace) -> dict:
    mapping = {"epsilon": "epsilon_num", "tol": "tol", "cutoff": "cutoff", "max_iter": "max_iter",
               "threads": "threads", "seed": "seed", "trace": "trace_mode", "probes": "probes"}
    return {target: getattr(args, name) for name, target in mapping.items() if name in args}


def _print_curves(path, selected: Optional[int]) -> None:
    """Curves with the selected penalty starred."""
    frame = path.curves().drop(columns=["wall_time"])
    frame.insert(0, "sel", ["*" if i == selected else "" for i in range(len(frame))])
    print(frame.to_string(index=False, float_format=lambda v: FLOAT_FORMAT % v))


def cmd_segment(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    ar = cfg.ar_config()
    # validates GRAPHSEG_THREADS before any input is read
    default_threads()
    problem = load_problem(cfg)
    p = problem.graph.n_vertices
    if ar.trace_mode is TraceMode.EXACT and p > EXACT_TRACE_LIMIT:
        logger.warning(f"exact trace on p={p} is slow; consider --trace stochastic")

    fit = fit_problem(problem, cfg)
    if cfg.out is not None:
        write_bundle(cfg.out, problem, fit)

    print(f"criterion: {cfg.criterion}")
    if problem.per_component:
        print(f"components: {len(fit.parts)} (fitted separately)")
    for number, part in enumerate(fit.parts):
        prefix = f"component {number}: " if problem.per_component else ""
        record = part.record
        print(f"{prefix}selected lambda: {record.lam:.10g} (index {part.selected} of {len(part.path)})")
        print(f"{prefix}effective dimension: {record.effective_dim:.10g}")
    print(f"zones: {fit.segmentation.zone_count}")
    if fit.partial:
        print("warning: some penalties failed; see the error column")
    for number, part in enumerate(fit.parts):
        if problem.per_component:
            print(f"\ncomponent {number} ({part.graph.n_vertices} vertices)")
        _print_curves(part.path, part.selected)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    spec = ExperimentSpec.from_file(args.spec) if "spec" in args else ExperimentSpec()
    data = spec.to_dict()
    if "seed" in args:
        data["seed"] = args.seed
    if "sigmas" in args:
        data["sigmas"] = args.sigmas
    grid = {key: getattr(args, f"lambda_{key}") for key in ("min", "max", "count") if f"lambda_{key}" in args}
    if grid:
        data["lambda"] = {**(data["lambda"] or {}), **grid}
    spec = ExperimentSpec.from_dict(data)
    ar = ArConfig(**{k: v for k, v in _ar_overrides(args).items() if k != "seed"})
    max_workers = ar.threads if ar.threads is not None else default_threads()

    result = run_experiment(spec, cfg=ar, max_workers=max_workers)
    table = result.table()
    out = Path(getattr(args, "out", "."))
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "experiment.csv", index=False, float_format=FLOAT_FORMAT)
    polygons = grid_polygons(spec.rows, spec.cols)
    for run in result.runs:
        features = polygon_features(polygons, run.map_frame(spec.criteria))
        write_feature_collection(out / f"map_sigma_{run.sigma:g}.geojson", features)
        if run.path is not None:
            run.curve_frame().to_csv(out / f"curves_sigma_{run.sigma:g}.csv", index=False,
                                     float_format=FLOAT_FORMAT)
    print(table.drop(columns=["seconds"]).to_string(index=False, float_format=lambda v: FLOAT_FORMAT % v))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the command, map failures to exit codes."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(getattr(args, "verbose", 0), getattr(args, "quiet", False))
    handler = cmd_segment if args.command == "segment" else cmd_simulate
    try:
        return handler(args)
    except ValidationError as err:
        print(f"graphseg: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, SelectionError) as err:
        print(f"graphseg: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as err:
        print(f"graphseg: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except GraphsegError as err:
        print(f"graphseg: error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


def segment_main(argv: Optional[List[str]] = None) -> int:
    """The `segment` script: same as `graphseg segment`."""
    return main(["segment", *(sys.argv[1:] if argv is None else argv)])


if __name__ == "__main__":
    sys.exit(main())
