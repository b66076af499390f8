"""
Adaptive ridge segmentation of a graph signal.

Each iteration solves the weighted ridge system (G + lambda*K) theta = r,
where K is the Laplacian of the current edge weights, then refreshes the
weights v = 1/((theta_j - theta_k)^2 + eps). The fused-edge diagnostic
delta = v*(theta_j - theta_k)^2 drives both the stopping rule and the final
zone extraction.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp

from graphseg.errors import NumericalError, SelectionError, ValidationError
from graphseg.graph import Graph, LaplacianAssembler, components
from graphseg.select import Criterion, criteria, select_lambda
from graphseg.sparse import (
    Factorization,
    SparseSym,
    StructuralUnion,
    TraceMode,
    factor_numeric,
    factor_symbolic,
    trace_product_inverse,
)

logger = logging.getLogger(__name__)

IterationCallback = Callable[[int, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class ArConfig:
    """Adaptive ridge settings."""
    epsilon_num: float = 1e-6
    tol: float = 1e-8
    cutoff: float = 0.99
    max_iter: int = 10_000
    trace_mode: TraceMode = TraceMode.EXACT
    probes: int = 64
    seed: int = 0
    refine_steps: int = 2
    warm_start: bool = True
    threads: Optional[int] = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "trace_mode", TraceMode(self.trace_mode))
        except ValueError:
            raise ValidationError(f"unknown trace mode {self.trace_mode!r}") from None
        if not self.epsilon_num > 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon_num}")
        if not self.tol > 0:
            raise ValidationError(f"tolerance must be positive, got {self.tol}")
        if not 0 < self.cutoff < 1:
            raise ValidationError(f"cutoff must lie in (0, 1), got {self.cutoff}")
        if self.max_iter < 1:
            raise ValidationError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.trace_mode is TraceMode.STOCHASTIC and self.probes < 1:
            raise ValidationError("stochastic trace needs at least one probe")
        if self.refine_steps < 0:
            raise ValidationError("refine_steps cannot be negative")


@dataclass
class FitState:
    """Result of the adaptive ridge iteration at one penalty."""
    lam: float
    theta: np.ndarray
    edge_weights: np.ndarray
    deltas: np.ndarray
    iterations: int
    converged: bool
    objective_trace: List[float] = field(default_factory=list)
    factor: Optional[Factorization] = field(default=None, repr=False, compare=False)


def cost(x, theta, prec: SparseSym) -> float:
    """Sum-of-squares cost 1/2 (x - theta)' P (x - theta)."""
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if x.shape != (prec.dim,) or theta.shape != (prec.dim,):
        raise ValidationError(f"x {x.shape} and theta {theta.shape} must both have length {prec.dim}")
    return 0.5 * prec.quadratic_form(x - theta)


def edge_differences(g: Graph, theta: np.ndarray) -> np.ndarray:
    return theta[g.edges[:, 0]] - theta[g.edges[:, 1]]


def penalty_gradient(g: Graph, theta: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """K theta assembled edge by edge."""
    flow = weights * edge_differences(g, theta)
    return (np.bincount(g.edges[:, 0], flow, minlength=g.n_vertices)
            - np.bincount(g.edges[:, 1], flow, minlength=g.n_vertices))


class RidgeSystem:
    """
    Normal equations (G + lambda*K) theta = r for a fixed graph.

    The structural union of G and the Laplacian pattern and the symbolic
    factor are built once and shared by every penalty and iteration.
    """

    def __init__(self, g: Graph, gram: SparseSym, rhs: np.ndarray,
                 data_residual: Callable[[np.ndarray], np.ndarray],
                 data_cost2: Callable[[np.ndarray], float],
                 unpenalized: Optional[np.ndarray] = None):
        if gram.dim != g.n_vertices:
            raise ValidationError(f"system dimension {gram.dim} does not match {g.n_vertices} vertices")
        self.graph = g
        self.gram = gram
        self.rhs = rhs
        self.unpenalized = unpenalized
        self._data_residual = data_residual
        self._data_cost2 = data_cost2
        self.assembler = LaplacianAssembler(g)
        self.union = StructuralUnion(gram, self.assembler.template)
        self.symbolic = factor_symbolic(self.union.combine(gram, self.assembler.template, 0.0))

    @property
    def dim(self) -> int:
        return self.gram.dim

    @classmethod
    def denoising(cls, x, prec: SparseSym, g: Graph) -> "RidgeSystem":
        x = _as_signal(x, prec.dim)
        return cls(
            g, prec, prec.matvec(x),
            data_residual=lambda theta: prec.matvec(x - theta),
            data_cost2=lambda theta: prec.quadratic_form(x - theta),
            unpenalized=x,
        )

    @classmethod
    def regression(cls, x, design, prec: SparseSym, g: Graph) -> "RidgeSystem":
        x = _as_signal(x, prec.dim)
        X = sp.csc_matrix(design, dtype=np.float64)
        if X.shape != (prec.dim, g.n_vertices):
            raise ValidationError(f"design must have shape ({prec.dim}, {g.n_vertices}), got {X.shape}")
        P = prec.to_scipy()
        gram = SparseSym.from_scipy(X.T @ P @ X)
        return cls(
            g, gram, X.T @ (P @ x),
            data_residual=lambda theta: X.T @ (P @ (x - X @ theta)),
            data_cost2=lambda theta: prec.quadratic_form(x - X @ theta),
        )

    def factor(self, lam: float, weights: np.ndarray) -> Factorization:
        matrix = self.union.combine(self.gram, self.assembler(weights), lam)
        return factor_numeric(self.symbolic, matrix)

    def solve(self, lam: float, weights: np.ndarray, refine_steps: int = 2):
        """Solve at the given weights; returns (theta, factorization)."""
        factor = self.factor(lam, weights)
        theta = factor.solve(self.rhs)
        for _ in range(refine_steps):
            residual = self._data_residual(theta) - lam * penalty_gradient(self.graph, theta, weights)
            if not np.all(np.isfinite(residual)):
                break
            step = factor.solve(residual)
            theta = theta + step
            if np.max(np.abs(step), initial=0.0) <= 1e-15 * max(np.max(np.abs(theta), initial=0.0), 1e-300):
                break
        return theta, factor

    def cost2(self, theta: np.ndarray) -> float:
        return float(self._data_cost2(theta))

    def objective(self, lam: float, theta: np.ndarray, eps: float) -> float:
        """Log-penalized objective that the reweighting descends."""
        squared = edge_differences(self.graph, theta) ** 2
        return 0.5 * self.cost2(theta) + 0.5 * lam * float(np.sum(np.log(squared + eps)))


def _as_signal(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise ValidationError(f"signal must have length {dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("signal contains non-finite values")
    return x


def _initial_weights(g: Graph, init_weights) -> np.ndarray:
    if init_weights is None:
        return np.ones(g.n_edges)
    w = np.asarray(init_weights, dtype=np.float64)
    if w.shape != (g.n_edges,):
        raise ValidationError(f"expected {g.n_edges} initial weights, got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValidationError("initial weights must be finite and positive")
    return w.copy()


def _reweight(g: Graph, theta: np.ndarray, eps: float):
    squared = edge_differences(g, theta) ** 2
    return 1.0 / (squared + eps), squared / (squared + eps)


def _iterate(system: RidgeSystem, lam: float, cfg: ArConfig, init_weights=None,
             callback: Optional[IterationCallback] = None) -> FitState:
    g = system.graph
    if not (np.isfinite(lam) and lam >= 0):
        raise ValidationError(f"penalty must be finite and >= 0, got {lam}")
    eps = cfg.epsilon_num
    weights = _initial_weights(g, init_weights)
    # delta = 1 - eps*v holds for any weight produced by the update
    deltas = np.clip(1.0 - eps * weights, 0.0, None)

    if g.n_edges == 0 or lam == 0:
        theta, factor = system.solve(lam, weights, cfg.refine_steps)
        if system.unpenalized is not None:
            theta = system.unpenalized.copy()
        if callback is not None:
            callback(1, theta, weights)
        new_weights, new_deltas = _reweight(g, theta, eps)
        return FitState(
            lam=float(lam), theta=theta, edge_weights=new_weights, deltas=new_deltas,
            iterations=0 if g.n_vertices == 1 else 1, converged=True,
            objective_trace=[system.objective(lam, theta, eps)], factor=factor,
        )

    trace: List[float] = []
    converged = False
    theta = factor = None
    iteration = 0
    for iteration in range(1, cfg.max_iter + 1):
        theta, factor = system.solve(lam, weights, cfg.refine_steps)
        bad = np.flatnonzero(~np.isfinite(theta))
        if len(bad):
            raise NumericalError(
                f"non-finite estimate at iteration {iteration}, vertex {int(bad[0])}",
                iteration=iteration, index=int(bad[0]),
            )
        if callback is not None:
            callback(iteration, theta, weights)
        new_weights, new_deltas = _reweight(g, theta, eps)
        change = float(np.max(np.abs(new_deltas - deltas)))
        weights, deltas = new_weights, new_deltas
        trace.append(system.objective(lam, theta, eps))
        logger.debug(f"lambda={lam:.6g} iteration {iteration}: max delta change {change:.3e}")
        if change <= cfg.tol:
            converged = True
            break
    if not converged:
        logger.warning(f"lambda={lam:.6g}: no convergence after {cfg.max_iter} iterations")
    return FitState(
        lam=float(lam), theta=theta, edge_weights=weights, deltas=deltas,
        iterations=iteration, converged=converged, objective_trace=trace, factor=factor,
    )


def ar_iterate(x, prec: SparseSym, g: Graph, lam: float, init_weights=None,
               cfg: Optional[ArConfig] = None, *, callback: Optional[IterationCallback] = None,
               system: Optional[RidgeSystem] = None) -> FitState:
    """Adaptive ridge at one penalty; cold start uses unit weights."""
    cfg = cfg or ArConfig()
    system = system or RidgeSystem.denoising(x, prec, g)
    return _iterate(system, lam, cfg, init_weights, callback)


def ar_iterate_regression(x, design, prec: SparseSym, g: Graph, lam: float,
                          cfg: Optional[ArConfig] = None, init_weights=None, *,
                          callback: Optional[IterationCallback] = None) -> FitState:
    """Adaptive ridge for x = X theta + noise, one coefficient per vertex."""
    cfg = cfg or ArConfig()
    return _iterate(RidgeSystem.regression(x, design, prec, g), lam, cfg, init_weights, callback)


@dataclass
class PathRecord:
    """Summary of one penalty on the path; NaN fields when the fit failed."""
    lam: float
    theta: Optional[np.ndarray] = field(default=None, repr=False)
    edge_weights: Optional[np.ndarray] = field(default=None, repr=False)
    deltas: Optional[np.ndarray] = field(default=None, repr=False)
    effective_dim: float = math.nan
    effective_dim_stderr: float = math.nan
    cost2: float = math.nan
    aic: float = math.nan
    bic: float = math.nan
    gcv: float = math.nan
    gcv_defined: bool = False
    iterations: int = 0
    converged: bool = False
    wall_time: float = 0.0
    zone_count: int = 0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def state(self) -> FitState:
        if not self.ok:
            raise ValidationError(f"no fit at lambda={self.lam:.6g}: {self.error}")
        return FitState(self.lam, self.theta, self.edge_weights, self.deltas, self.iterations, self.converged)


@dataclass
class PathFit:
    """Warm-started fits over an ascending penalty grid."""
    lambda_grid: np.ndarray
    records: List[PathRecord]
    n_vertices: int
    partial: bool = False
    selected: Dict[str, Optional[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def criterion_values(self, criterion: Union[Criterion, str]) -> np.ndarray:
        name = Criterion(criterion).value
        return np.array([getattr(r, name) if r.ok else math.nan for r in self.records])

    @property
    def total_iterations(self) -> int:
        return sum(r.iterations for r in self.records)

    def curves(self) -> pd.DataFrame:
        """Criterion curves, one row per penalty."""
        return pd.DataFrame({
            "lambda": self.lambda_grid,
            "effective_dim": [r.effective_dim for r in self.records],
            "cost2": [r.cost2 for r in self.records],
            "aic": [r.aic for r in self.records],
            "bic": [r.bic for r in self.records],
            "gcv": [r.gcv for r in self.records],
            "zones": [r.zone_count for r in self.records],
            "iterations": [r.iterations for r in self.records],
            "converged": [r.converged for r in self.records],
            "wall_time": [r.wall_time for r in self.records],
            "error": [r.error or "" for r in self.records],
        })


def _validate_grid(lambdas) -> np.ndarray:
    grid = np.atleast_1d(np.asarray(lambdas, dtype=np.float64))
    if grid.ndim != 1 or len(grid) == 0:
        raise ValidationError("penalty grid must be a non-empty list")
    if not np.all(np.isfinite(grid)) or np.any(grid < 0):
        raise ValidationError("penalties must be finite and >= 0")
    if np.any(np.diff(grid) <= 0):
        raise ValidationError("penalty grid must be strictly ascending")
    return grid


def run_path(x, prec: SparseSym, g: Graph, lambdas, cfg: Optional[ArConfig] = None,
             *, design=None) -> PathFit:
    """Fit every penalty in turn, recycling converged weights as the next start."""
    cfg = cfg or ArConfig()
    grid = _validate_grid(lambdas)
    if design is None:
        system = RidgeSystem.denoising(x, prec, g)
    else:
        system = RidgeSystem.regression(x, design, prec, g)
    p = g.n_vertices
    logger.info(f"Penalty path: {len(grid)} values on p={p}, {g.n_edges} edges, "
                f"warm start {'on' if cfg.warm_start else 'off'}")

    records: List[PathRecord] = []
    weights = None
    for lam in grid:
        start = time.perf_counter()
        try:
            state = _iterate(system, lam, cfg, weights if cfg.warm_start else None)
            estimate = trace_product_inverse(state.factor, system.gram, cfg.trace_mode,
                                             cfg.probes, cfg.seed, threads=cfg.threads)
            e = float(np.clip(estimate.value, 1e-12, p))
            cost2 = max(system.cost2(state.theta), 0.0)
            values = criteria(cost2, e, p)
            zones = extract_zones(g, state, cfg).zone_count
        except NumericalError as err:
            logger.warning(f"lambda={lam:.6g} failed: {err}")
            records.append(PathRecord(lam=float(lam), wall_time=time.perf_counter() - start, error=str(err)))
            continue
        weights = state.edge_weights
        record = PathRecord(
            lam=float(lam), theta=state.theta, edge_weights=state.edge_weights, deltas=state.deltas,
            effective_dim=e, effective_dim_stderr=estimate.stderr, cost2=cost2,
            aic=values.aic, bic=values.bic, gcv=values.gcv, gcv_defined=values.gcv_defined,
            iterations=state.iterations, converged=state.converged,
            wall_time=time.perf_counter() - start, zone_count=zones,
        )
        records.append(record)
        logger.info(f"lambda={lam:.6g}: {state.iterations} iterations, {zones} zones, e={e:.4f}")

    path = PathFit(grid, records, p, partial=any(not r.ok for r in records))
    for criterion in Criterion:
        try:
            path.selected[criterion.value] = select_lambda(path, criterion)
        except SelectionError:
            path.selected[criterion.value] = None
    return path


@dataclass
class Segmentation:
    """Zones (connected fused subgraphs) and per-vertex fitted values."""
    zone_id: np.ndarray
    zone_count: int
    theta_hat: np.ndarray
    zone_values: np.ndarray
    cut_edges: np.ndarray
    cut_deltas: np.ndarray
    refit: bool = False

    @property
    def zone_mean(self) -> np.ndarray:
        """Per-vertex value of its zone."""
        return self.zone_values[self.zone_id]

    @property
    def zone_sizes(self) -> np.ndarray:
        return np.bincount(self.zone_id, minlength=self.zone_count)


def _zone_refit(zone_id: np.ndarray, zone_count: int, x, prec: SparseSym) -> np.ndarray:
    p = len(zone_id)
    membership = sp.csc_matrix((np.ones(p), (np.arange(p), zone_id)), shape=(p, zone_count))
    P = prec.to_scipy()
    gram = SparseSym.from_scipy(membership.T @ P @ membership)
    factor = factor_numeric(factor_symbolic(gram), gram)
    return factor.solve(membership.T @ (P @ x))


def extract_zones(g: Graph, state: FitState, cfg: Optional[ArConfig] = None, *,
                  refit: bool = False, x=None, prec: Optional[SparseSym] = None) -> Segmentation:
    """Fuse edges with delta below the cutoff; zones are the resulting components."""
    cfg = cfg or ArConfig()
    if not state.converged:
        logger.warning(f"extracting zones from an unconverged fit (lambda={state.lam:.6g})")
    keep = state.deltas < cfg.cutoff
    comps = components(g, keep)
    zone_id = comps.component_id
    theta = np.asarray(state.theta, dtype=np.float64)
    zone_values = np.bincount(zone_id, theta, minlength=comps.component_count) / comps.component_sizes
    values = theta.copy()
    if refit:
        if x is None or prec is None:
            raise ValidationError("refitting zone values needs the signal and its precision")
        zone_values = _zone_refit(zone_id, comps.component_count, _as_signal(x, g.n_vertices), prec)
        values = zone_values[zone_id]
    cut = ~keep
    return Segmentation(
        zone_id=zone_id,
        zone_count=comps.component_count,
        theta_hat=values,
        zone_values=zone_values,
        cut_edges=g.edges[cut],
        cut_deltas=state.deltas[cut],
        refit=refit,
    )


def stitch_segmentations(parts: Sequence[Tuple[np.ndarray, Segmentation]], n_vertices: int) -> Segmentation:
    """
    Segmentations of disjoint vertex sets as one segmentation of all vertices.

    Each part is (vertices, segmentation) with segmentation indices local to
    `vertices`. Zones are renumbered by their first vertex, as `extract_zones`
    numbers them on a whole graph.
    """
    covered = np.concatenate([np.asarray(vertices, dtype=np.int64) for vertices, _ in parts])
    if len(covered) != n_vertices or not np.array_equal(np.sort(covered), np.arange(n_vertices)):
        raise ValidationError("parts must cover every vertex exactly once")
    zone_id = np.empty(n_vertices, dtype=np.int64)
    theta = np.empty(n_vertices)
    zone_values, cuts, deltas = [], [], []
    offset = 0
    for vertices, segmentation in parts:
        vertices = np.asarray(vertices, dtype=np.int64)
        zone_id[vertices] = segmentation.zone_id + offset
        theta[vertices] = segmentation.theta_hat
        zone_values.append(segmentation.zone_values)
        cuts.append(vertices[segmentation.cut_edges].reshape(-1, 2))
        deltas.append(segmentation.cut_deltas)
        offset += segmentation.zone_count

    _, first = np.unique(zone_id, return_index=True)
    order = np.argsort(first, kind="stable")
    renumber = np.empty(offset, dtype=np.int64)
    renumber[order] = np.arange(offset)
    cut_edges = np.vstack(cuts)
    cut_deltas = np.concatenate(deltas)
    edge_order = np.lexsort((cut_edges[:, 1], cut_edges[:, 0]))
    return Segmentation(
        zone_id=renumber[zone_id],
        zone_count=offset,
        theta_hat=theta,
        zone_values=np.concatenate(zone_values)[order],
        cut_edges=cut_edges[edge_order],
        cut_deltas=cut_deltas[edge_order],
        refit=all(segmentation.refit for _, segmentation in parts),
    )
