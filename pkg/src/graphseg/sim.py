"""
Synthetic zone-constant signals on lattices, and scoring of segmentations.

Zone levels are iid Poisson(10); observations add Gaussian noise with
standard deviation sigma. Scores are RMSE and the (adjusted) Rand index,
computed against both the drawn zones and their effective coarsening, in
which adjacent zones that drew the same level are merged. Every penalty of a
path is scored, so the criteria can be compared with the lowest-RMSE penalty.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from shapely.geometry import box

from graphseg.errors import GraphsegError, ValidationError
from graphseg.graph import Graph, PolygonSet, components
from graphseg.io import default_lambda_grid, lambda_grid, load_mapping
from graphseg.segment import ArConfig, PathFit, Segmentation, extract_zones, run_path
from graphseg.select import Criterion
from graphseg.sparse import SparseSym, default_threads

logger = logging.getLogger(__name__)

POISSON_MEAN = 10.0

TABLE_COLUMNS = [
    "sigma", "criterion", "lambda", "rmse", "rand", "ari", "zones_est", "zones_true",
    "model_dim", "iters", "seconds", "rand_drawn", "ari_drawn", "zones_drawn", "status",
]
CURVE_COLUMNS = [
    "lambda", "effective_dim", "zones_est", "rmse", "rand", "ari", "cost2", "aic", "bic", "gcv", "converged",
]
# table row for the penalty with the lowest RMSE on the path
BEST_ROW = "min_rmse"


@dataclass(frozen=True, eq=False)
class Scenario:
    """A graph, its true zones and zone-constant signal, and the noise level."""
    graph: Graph
    true_zones: np.ndarray
    theta_true: np.ndarray
    sigma: float
    seed: Optional[int] = None
    shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        p = self.graph.n_vertices
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")
        if self.true_zones.shape != (p,) or self.theta_true.shape != (p,):
            raise ValidationError(f"zones and theta must have length {p}")
        zone_count = int(self.true_zones.max()) + 1
        if set(np.unique(self.true_zones).tolist()) != set(range(zone_count)):
            raise ValidationError("zone ids must be contiguous from 0")
        j, k = self.graph.edges[:, 0], self.graph.edges[:, 1]
        inside = self.true_zones[j] == self.true_zones[k]
        if components(self.graph, inside).component_count != zone_count:
            raise ValidationError("every true zone must be a connected subgraph")
        lo = np.full(zone_count, np.inf)
        hi = np.full(zone_count, -np.inf)
        np.minimum.at(lo, self.true_zones, self.theta_true)
        np.maximum.at(hi, self.true_zones, self.theta_true)
        if np.any(lo != hi):
            raise ValidationError("theta_true must be constant within each zone")

    @property
    def zone_count(self) -> int:
        return int(self.true_zones.max()) + 1

    def effective_zones(self) -> np.ndarray:
        return effective_zones(self.graph, self.theta_true)


class RandScores(NamedTuple):
    rand: float
    adjusted_rand: float


@dataclass
class ScoreReport:
    """Scores of one segmentation against a scenario."""
    rmse: float
    rand: float
    adjusted_rand: float
    zone_count_true: int
    zone_count_est: int
    model_dim: float
    rand_drawn: float = math.nan
    adjusted_rand_drawn: float = math.nan
    zone_count_drawn: int = 0


def lattice_graph(rows: int, cols: int) -> Graph:
    """Rook lattice; vertex r*cols + c sits at row r, column c."""
    if rows < 1 or cols < 1:
        raise ValidationError(f"grid dimensions must be positive, got {rows}x{cols}")
    index = np.arange(rows * cols).reshape(rows, cols)
    horizontal = np.column_stack([index[:, :-1].ravel(), index[:, 1:].ravel()])
    vertical = np.column_stack([index[:-1, :].ravel(), index[1:, :].ravel()])
    return Graph.from_edges(rows * cols, np.vstack([horizontal, vertical]))


def grid_polygons(rows: int, cols: int) -> PolygonSet:
    """Unit squares matching lattice_graph's vertex order."""
    rings = tuple(
        (np.asarray(box(c, r, c + 1, r + 1).exterior.coords),)
        for r in range(rows) for c in range(cols)
    )
    return PolygonSet(ids=tuple(range(rows * cols)), rings=rings)


def generate_scenario(graph: Graph, zones, sigma: float,
                      seed: Union[int, np.random.SeedSequence, None] = None,
                      shape: Optional[Tuple[int, int]] = None) -> Tuple[Scenario, np.ndarray]:
    """Draw zone levels and noisy observations for a given zone partition."""
    zones = np.asarray(zones, dtype=np.int64)
    if zones.shape != (graph.n_vertices,):
        raise ValidationError(f"expected one zone id per vertex ({graph.n_vertices})")
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    levels = rng.poisson(POISSON_MEAN, size=int(zones.max()) + 1).astype(np.float64)
    theta = levels[zones]
    x = theta + rng.normal(0.0, sigma, size=graph.n_vertices)
    seed_value = seed if isinstance(seed, int) else None
    return Scenario(graph, zones, theta, float(sigma), seed_value, shape), x


def generate_grid_scenario(rows: int, cols: int, zone_rows: int, zone_cols: int, sigma: float,
                           seed: Union[int, np.random.SeedSequence, None] = None) -> Tuple[Scenario, np.ndarray]:
    """Rook grid split into zone_rows x zone_cols rectangular zones."""
    if zone_rows < 1 or zone_cols < 1 or rows % zone_rows or cols % zone_cols:
        raise ValidationError(
            f"zone blocks {zone_rows}x{zone_cols} must evenly divide the {rows}x{cols} grid"
        )
    graph = lattice_graph(rows, cols)
    r, c = np.divmod(np.arange(rows * cols), cols)
    zones = (r // zone_rows) * (cols // zone_cols) + c // zone_cols
    return generate_scenario(graph, zones, sigma, seed, shape=(rows, cols))


def effective_zones(graph: Graph, theta_true) -> np.ndarray:
    """Merge adjacent zones whose levels coincide."""
    theta_true = np.asarray(theta_true)
    same = theta_true[graph.edges[:, 0]] == theta_true[graph.edges[:, 1]]
    return components(graph, same).component_id


def rmse(theta_hat, theta_true) -> float:
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    theta_true = np.asarray(theta_true, dtype=np.float64)
    if theta_hat.shape != theta_true.shape:
        raise ValidationError(f"length mismatch: {theta_hat.shape} vs {theta_true.shape}")
    return float(np.sqrt(np.mean((theta_hat - theta_true) ** 2)))


def rand_index(labels_a, labels_b) -> RandScores:
    """Pair-counting Rand index and its chance-adjusted version."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"partitions must be 1-d with equal length, got {a.shape} and {b.shape}")
    n = len(a)
    if n == 0:
        raise ValidationError("cannot score empty partitions")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def pairs(counts):
        counts = counts.astype(np.float64)
        return float(np.sum(counts * (counts - 1) / 2))

    total = n * (n - 1) / 2
    joint = pairs(table)
    rows = pairs(table.sum(axis=1))
    cols = pairs(table.sum(axis=0))
    if total == 0:
        return RandScores(1.0, 1.0)
    rand = (total + 2 * joint - rows - cols) / total
    expected = rows * cols / total
    maximum = (rows + cols) / 2
    if maximum == expected:
        return RandScores(rand, 1.0)
    return RandScores(rand, (joint - expected) / (maximum - expected))


def score(scenario: Scenario, segmentation: Segmentation, model_dim: float) -> ScoreReport:
    effective = scenario.effective_zones()
    against_effective = rand_index(effective, segmentation.zone_id)
    against_drawn = rand_index(scenario.true_zones, segmentation.zone_id)
    return ScoreReport(
        rmse=rmse(segmentation.theta_hat, scenario.theta_true),
        rand=against_effective.rand,
        adjusted_rand=against_effective.adjusted_rand,
        zone_count_true=int(effective.max()) + 1,
        zone_count_est=segmentation.zone_count,
        model_dim=float(model_dim),
        rand_drawn=against_drawn.rand,
        adjusted_rand_drawn=against_drawn.adjusted_rand,
        zone_count_drawn=scenario.zone_count,
    )


@dataclass
class ExperimentSpec:
    """
    Grid simulation study, one path per noise level.

    The fit uses identity precision; `known_variance` switches to the true
    precision sigma^-2 I.
    """
    rows: int = 20
    cols: int = 20
    zone_rows: int = 10
    zone_cols: int = 10
    sigmas: List[float] = field(default_factory=lambda: [0.1, 0.5, 1.0])
    seed: int = 0
    grid: Optional[Dict[str, float]] = None
    known_variance: bool = False
    criteria: List[str] = field(default_factory=lambda: [c.value for c in Criterion])

    def __post_init__(self):
        for name in ("rows", "cols", "zone_rows", "zone_cols"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        if self.rows % self.zone_rows or self.cols % self.zone_cols:
            raise ValidationError("zone blocks must evenly divide the grid")
        if not self.sigmas:
            raise ValidationError("at least one sigma is required")
        self.sigmas = [float(s) for s in self.sigmas]
        if any(not (math.isfinite(s) and s > 0) for s in self.sigmas):
            raise ValidationError(f"sigmas must be positive, got {self.sigmas}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ValidationError(f"seed must be a non-negative integer, got {self.seed!r}")
        try:
            self.criteria = [Criterion(c).value for c in self.criteria]
        except ValueError as err:
            raise ValidationError(str(err)) from None
        if self.grid is not None:
            if not isinstance(self.grid, dict) or set(self.grid) != {"min", "max", "count"}:
                raise ValidationError("lambda must be a mapping with keys min, max and count")
            # validates the bounds
            lambda_grid(self.grid["min"], self.grid["max"], self.grid["count"])

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        if not isinstance(data, dict):
            raise ValidationError("scenario spec must be a mapping")
        data = dict(data)
        if "lambda" in data:
            data["grid"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown scenario keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentSpec":
        return cls.from_dict(load_mapping(path))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["lambda"] = data.pop("grid")
        return data


@dataclass
class SigmaRun:
    """One noise level: scenario, path, per-penalty scores and per-criterion segmentations."""
    index: int
    sigma: float
    scenario: Scenario
    x: np.ndarray
    path: Optional[PathFit] = None
    segmentations: Dict[str, Segmentation] = field(default_factory=dict)
    reports: Dict[str, ScoreReport] = field(default_factory=dict)
    seconds: float = 0.0
    path_reports: List[Optional[ScoreReport]] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def best_index(self) -> Optional[int]:
        """Penalty with the lowest RMSE against the truth; ties go to the smaller penalty."""
        errors = [math.inf if r is None else r.rmse for r in self.path_reports]
        if not errors or math.isinf(min(errors)):
            return None
        return int(np.argmin(errors))

    def curve_frame(self) -> pd.DataFrame:
        """Scores at every penalty of the path."""
        rows = []
        if self.path is not None:
            for record, report in zip(self.path.records, self.path_reports):
                rows.append({
                    "lambda": record.lam,
                    "effective_dim": record.effective_dim,
                    "zones_est": report.zone_count_est if report else 0,
                    "rmse": report.rmse if report else math.nan,
                    "rand": report.rand if report else math.nan,
                    "ari": report.adjusted_rand if report else math.nan,
                    "cost2": record.cost2,
                    "aic": record.aic,
                    "bic": record.bic,
                    "gcv": record.gcv,
                    "converged": record.converged,
                })
        return pd.DataFrame(rows, columns=CURVE_COLUMNS)

    def map_frame(self, criteria: Sequence[str]) -> pd.DataFrame:
        """Per-vertex truth, observations and the selected segmentation per criterion."""
        frame = pd.DataFrame({
            "id": np.arange(len(self.x)),
            "x": self.x,
            "theta_true": self.scenario.theta_true,
            "zone_true": self.scenario.true_zones,
        })
        for name in criteria:
            segmentation = self.segmentations.get(name)
            if segmentation is None:
                frame[f"zone_{name}"] = -1
                frame[f"theta_{name}"] = math.nan
            else:
                frame[f"zone_{name}"] = segmentation.zone_id
                frame[f"theta_{name}"] = segmentation.theta_hat
        return frame


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    runs: List[SigmaRun]

    def table(self) -> pd.DataFrame:
        """One row per sigma and criterion, then the lowest-RMSE penalty of each path."""
        rows = []
        for run in self.runs:
            for name in self.spec.criteria:
                index = run.path.selected.get(name) if run.path is not None else None
                rows.append(_table_row(run, name, index, run.reports.get(name)))
            best = run.best_index
            rows.append(_table_row(run, BEST_ROW, best, run.path_reports[best] if best is not None else None))
        return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def _table_row(run: SigmaRun, name: str, index: Optional[int], report: Optional[ScoreReport]) -> dict:
    row = {
        "sigma": run.sigma,
        "criterion": name,
        "lambda": run.path.lambda_grid[index] if index is not None else math.nan,
        "iters": run.path.total_iterations if run.path is not None else 0,
        "seconds": run.seconds,
    }
    if report is None:
        status = run.error or f"{name} degenerate on this path"
        row.update(rmse=math.nan, rand=math.nan, ari=math.nan, zones_est=0,
                   zones_true=int(run.scenario.effective_zones().max()) + 1,
                   model_dim=math.nan, rand_drawn=math.nan, ari_drawn=math.nan,
                   zones_drawn=run.scenario.zone_count, status=f"error: {status}")
    else:
        row.update(rmse=report.rmse, rand=report.rand, ari=report.adjusted_rand,
                   zones_est=report.zone_count_est, zones_true=report.zone_count_true,
                   model_dim=report.model_dim, rand_drawn=report.rand_drawn,
                   ari_drawn=report.adjusted_rand_drawn,
                   zones_drawn=report.zone_count_drawn, status="ok")
    return row


def _score_path(scenario: Scenario, path: PathFit, cfg: ArConfig) -> Tuple[list, list]:
    """Segmentation and scores at every penalty; None where the fit failed."""
    segmentations: List[Optional[Segmentation]] = []
    reports: List[Optional[ScoreReport]] = []
    for record in path.records:
        if not record.ok:
            segmentations.append(None)
            reports.append(None)
            continue
        segmentation = extract_zones(scenario.graph, record.state(), cfg)
        segmentations.append(segmentation)
        reports.append(score(scenario, segmentation, record.effective_dim))
    return segmentations, reports


def _run_sigma(spec: ExperimentSpec, index: int, sigma: float, lambdas: Optional[np.ndarray],
               cfg: ArConfig) -> SigmaRun:
    seed = np.random.SeedSequence([spec.seed, index])
    scenario, x = generate_grid_scenario(spec.rows, spec.cols, spec.zone_rows, spec.zone_cols, sigma, seed)
    p = scenario.graph.n_vertices
    prec = SparseSym.identity(p, 1.0 / sigma**2 if spec.known_variance else 1.0)
    if lambdas is None:
        lambdas = (lambda_grid(spec.grid["min"], spec.grid["max"], spec.grid["count"])
                   if spec.grid is not None else default_lambda_grid(prec))
    run = SigmaRun(index, sigma, scenario, x)
    start = time.perf_counter()
    try:
        run.path = run_path(x, prec, scenario.graph, lambdas, cfg)
        segmentations, run.path_reports = _score_path(scenario, run.path, cfg)
        for name in spec.criteria:
            selected = run.path.selected.get(name)
            if selected is None:
                continue
            run.segmentations[name] = segmentations[selected]
            run.reports[name] = run.path_reports[selected]
    except GraphsegError as err:
        logger.warning(f"sigma={sigma:g}: {err}")
        run.error = str(err)
    run.seconds = time.perf_counter() - start
    logger.info(f"sigma={sigma:g} finished in {run.seconds:.2f}s")
    return run


def run_experiment(spec: ExperimentSpec, lambdas: Optional[Sequence[float]] = None,
                   cfg: Optional[ArConfig] = None, max_workers: Optional[int] = None) -> ExperimentResult:
    """Simulate, fit and score every noise level of the scenario; rows are independent."""
    cfg = cfg or ArConfig()
    grid = None if lambdas is None else np.asarray(lambdas, dtype=np.float64)
    cap = default_threads()
    workers = min(max_workers or cap, cap, len(spec.sigmas))
    logger.info(f"Running {len(spec.sigmas)} noise levels on a {spec.rows}x{spec.cols} grid "
                f"with {workers} workers")
    if workers <= 1:
        runs = [_run_sigma(spec, i, s, grid, cfg) for i, s in enumerate(spec.sigmas)]
    else:
        inner = replace(cfg, threads=1)
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(_run_sigma, spec, i, s, grid, inner) for i, s in enumerate(spec.sigmas)]
            runs = [future.result() for future in futures]
    return ExperimentResult(spec, runs)
