"""
File ingestion and result bundles.

Inputs: an edge-list CSV (`src,dst`) or a GeoJSON FeatureCollection for the
graph, a values CSV (`id,value`), an optional Matrix Market precision whose
rows follow the values file, and optional centroids (`id,x,y`). A graph with
several components is fitted one component at a time unless it was bridged
or the precision couples components.
"""

import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp
import yaml
from scipy.io import mminfo, mmread
from shapely.geometry import MultiPolygon, Polygon, mapping, shape

from graphseg.errors import SelectionError, ValidationError
from graphseg.graph import (
    DEFAULT_ROOK_TOL,
    ComponentMap,
    Graph,
    PolygonSet,
    bridge_components,
    build_from_edge_list,
    components,
    rook_adjacency,
)
from graphseg.segment import (
    ArConfig,
    PathFit,
    PathRecord,
    Segmentation,
    extract_zones,
    run_path,
    stitch_segmentations,
)
from graphseg.select import Criterion
from graphseg.sparse import SparseSym, TraceMode

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_COUNT = 50
FLOAT_FORMAT = "%.10g"


def _sig(value: float) -> Optional[float]:
    """Ten significant digits; None for values JSON cannot carry."""
    value = float(value)
    if not math.isfinite(value):
        return None
    return float(f"{value:.10g}")


def _native(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return _sig(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def _limit_ids(ids: List[Any], limit: int = 10) -> str:
    shown = ", ".join(repr(i) for i in ids[:limit])
    return shown + (f" (+{len(ids) - limit} more)" if len(ids) > limit else "")


def load_mapping(path: Union[str, Path]) -> dict:
    """Config documents: JSON for .json files, YAML otherwise."""
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f) if path.suffix.lower() == ".json" else yaml.safe_load(f)
    except OSError as err:
        raise ValidationError(f"cannot read {path}: {err.strerror}") from None
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise ValidationError(f"cannot parse {path}: {err}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(f"{path} must contain a mapping")
    return data


def lambda_grid(lam_min: float, lam_max: float, count: int) -> np.ndarray:
    """Log-spaced ascending penalties from lam_min to lam_max."""
    if isinstance(count, bool) or int(count) != count or count < 1:
        raise ValidationError(f"lambda count must be a positive integer, got {count!r}")
    lam_min, lam_max, count = float(lam_min), float(lam_max), int(count)
    if not (math.isfinite(lam_min) and math.isfinite(lam_max) and 0 < lam_min <= lam_max):
        raise ValidationError(f"need 0 < lambda min <= lambda max, got {lam_min} and {lam_max}")
    if count == 1:
        return np.array([lam_min])
    if lam_min == lam_max:
        raise ValidationError("lambda min and max must differ for more than one penalty")
    return np.geomspace(lam_min, lam_max, count)


def default_lambda_grid(prec: SparseSym, count: int = DEFAULT_LAMBDA_COUNT) -> np.ndarray:
    """1e-3*rho to 1e3*rho with rho = p / Tr(precision)."""
    trace = prec.trace()
    if not trace > 0:
        raise ValidationError("precision trace must be positive")
    rho = prec.dim / trace
    return lambda_grid(1e-3 * rho, 1e3 * rho, count)


@dataclass
class RunConfig:
    """Everything one segmentation run needs; mirrors the command-line flags."""
    values: Optional[str] = None
    graph: Optional[str] = None
    geojson: Optional[str] = None
    precision: Optional[str] = None
    centroids: Optional[str] = None
    bridge: bool = False
    lambda_min: Optional[float] = None
    lambda_max: Optional[float] = None
    lambda_count: int = DEFAULT_LAMBDA_COUNT
    lambdas: Optional[List[float]] = None
    criterion: str = Criterion.AIC.value
    epsilon: float = 1e-6
    tol: float = 1e-8
    cutoff: float = 0.99
    max_iter: int = 10_000
    refit: bool = False
    trace: str = TraceMode.EXACT.value
    probes: int = 64
    seed: int = 0
    warm_start: bool = True
    threads: Optional[int] = None
    rook_tol: float = DEFAULT_ROOK_TOL
    out: Optional[str] = None

    def __post_init__(self):
        if self.values is None:
            raise ValidationError("a values file is required")
        if (self.graph is None) == (self.geojson is None):
            raise ValidationError("exactly one graph source (edge list or GeoJSON) is required")
        try:
            self.criterion = Criterion(self.criterion).value
        except ValueError:
            raise ValidationError(f"unknown criterion {self.criterion!r}") from None
        if (self.lambda_min is None) != (self.lambda_max is None):
            raise ValidationError("lambda min and max must be given together")
        if self.lambdas is not None:
            grid = np.asarray(self.lambdas, dtype=np.float64)
            if grid.ndim != 1 or len(grid) == 0:
                raise ValidationError("explicit lambda list must be non-empty")
            if not np.all(np.isfinite(grid)) or np.any(grid < 0) or np.any(np.diff(grid) <= 0):
                raise ValidationError("explicit lambdas must be finite, >= 0 and strictly ascending")
            self.lambdas = grid.tolist()
        elif self.lambda_min is not None:
            lambda_grid(self.lambda_min, self.lambda_max, self.lambda_count)
        elif isinstance(self.lambda_count, bool) or self.lambda_count < 1:
            raise ValidationError(f"lambda count must be >= 1, got {self.lambda_count}")
        if self.threads is not None and self.threads < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}")
        if not self.rook_tol > 0:
            raise ValidationError("rook tolerance must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = {key.replace("-", "_"): value for key, value in data.items()}
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.from_dict(load_mapping(path))

    def ar_config(self) -> ArConfig:
        return ArConfig(
            epsilon_num=self.epsilon,
            tol=self.tol,
            cutoff=self.cutoff,
            max_iter=self.max_iter,
            trace_mode=self.trace,
            probes=self.probes,
            seed=self.seed,
            warm_start=self.warm_start,
            threads=self.threads,
        )

    def penalties(self, prec: SparseSym) -> np.ndarray:
        if self.lambdas is not None:
            return np.asarray(self.lambdas, dtype=np.float64)
        if self.lambda_min is not None:
            return lambda_grid(self.lambda_min, self.lambda_max, self.lambda_count)
        return default_lambda_grid(prec, self.lambda_count)


@dataclass
class Problem:
    """
    A loaded segmentation problem in graph vertex order.

    `components` describes the graph as solved, after any bridging. When
    `per_component` is set, each component is fitted as its own problem.
    """
    graph: Graph
    x: np.ndarray
    precision: SparseSym
    components: ComponentMap
    polygons: Optional[PolygonSet] = None
    features: Optional[List[dict]] = field(default=None, repr=False)
    per_component: bool = False

    @property
    def ids(self) -> Tuple[Any, ...]:
        return self.graph.labels

    def parts(self) -> List[Tuple[np.ndarray, Graph, np.ndarray, SparseSym]]:
        """(vertices, graph, signal, precision) for every independently fitted part."""
        if not self.per_component:
            return [(np.arange(self.graph.n_vertices), self.graph, self.x, self.precision)]
        parts = []
        for component in range(self.components.component_count):
            vertices = self.components.members(component)
            parts.append((vertices, self.graph.subgraph(vertices), self.x[vertices],
                          self.precision.submatrix(vertices)))
        return parts


@dataclass
class ComponentFit:
    """Penalty path and selected segmentation of one fitted part of the graph."""
    vertices: np.ndarray
    graph: Graph
    path: PathFit
    selected: int
    segmentation: Segmentation

    @property
    def record(self) -> PathRecord:
        return self.path.records[self.selected]


@dataclass
class ProblemFit:
    """Every part's fit plus the segmentation stitched back into vertex order."""
    criterion: str
    parts: List[ComponentFit]
    segmentation: Segmentation

    @property
    def partial(self) -> bool:
        return any(part.path.partial for part in self.parts)


def _read_csv(path: Union[str, Path], columns: List[str], what: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise ValidationError(f"{what} file not found: {path}") from None
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as err:
        raise ValidationError(f"cannot read {what} file {path}: {err}") from None
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ValidationError(f"{what} file {path} lacks columns: {', '.join(missing)}")
    return frame[columns].apply(lambda col: col.str.strip())


def _numeric(frame: pd.DataFrame, column: str, what: str) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors="coerce").to_numpy(dtype=np.float64)
    bad = frame["id"][~np.isfinite(values)].tolist()
    if bad:
        raise ValidationError(f"{what}: missing or non-finite {column} for ids {_limit_ids(bad)}")
    return values


def read_edge_list(path: Union[str, Path]) -> Graph:
    """Edge-list CSV; a row with an empty dst declares an isolated vertex."""
    frame = _read_csv(path, ["src", "dst"], "edge list")
    if (frame["src"] == "").any():
        raise ValidationError(f"edge list {path}: empty src id")
    isolated = frame["dst"] == ""
    pairs = list(zip(frame.loc[~isolated, "src"], frame.loc[~isolated, "dst"]))
    return build_from_edge_list(pairs, vertices=frame.loc[isolated, "src"].tolist())


def _feature_id(feature: dict, position: int) -> str:
    props = feature.get("properties") or {}
    value = props.get("id", feature.get("id"))
    if value is None:
        raise ValidationError(f"feature {position} has no id property")
    return str(value)


def read_geojson(path: Union[str, Path]) -> Tuple[PolygonSet, List[dict]]:
    """Polygon/MultiPolygon features into rings; returns the raw features too."""
    try:
        with open(path) as f:
            document = json.load(f)
    except FileNotFoundError:
        raise ValidationError(f"GeoJSON file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as err:
        raise ValidationError(f"cannot read GeoJSON {path}: {err}") from None
    if not isinstance(document, dict) or document.get("type") != "FeatureCollection":
        raise ValidationError(f"{path} is not a GeoJSON FeatureCollection")
    features = document.get("features") or []
    ids, rings = [], []
    for position, feature in enumerate(features):
        area_id = _feature_id(feature, position)
        try:
            geometry = shape(feature["geometry"])
        except (KeyError, TypeError, ValueError, AttributeError) as err:
            raise ValidationError(f"feature {area_id!r}: invalid geometry ({err})") from None
        if isinstance(geometry, Polygon):
            parts = [geometry]
        elif isinstance(geometry, MultiPolygon):
            parts = list(geometry.geoms)
        else:
            raise ValidationError(f"feature {area_id!r}: {geometry.geom_type} is not a polygon")
        area_rings = []
        for polygon in parts:
            area_rings.append(np.asarray(polygon.exterior.coords, dtype=np.float64)[:, :2])
            area_rings.extend(np.asarray(r.coords, dtype=np.float64)[:, :2] for r in polygon.interiors)
        ids.append(area_id)
        rings.append(tuple(area_rings))
    if not ids:
        raise ValidationError(f"{path} has no features")
    return PolygonSet(tuple(ids), tuple(rings)), features


def read_values(path: Union[str, Path]) -> pd.Series:
    """Values CSV as a float series indexed by id, in file order."""
    frame = _read_csv(path, ["id", "value"], "values")
    duplicated = frame["id"][frame["id"].duplicated()].unique().tolist()
    if duplicated:
        raise ValidationError(f"values file repeats ids {_limit_ids(duplicated)}")
    return pd.Series(_numeric(frame, "value", "values file"), index=frame["id"].tolist(), name="value")


def read_centroids(path: Union[str, Path], ids) -> np.ndarray:
    frame = _read_csv(path, ["id", "x", "y"], "centroids")
    xs = _numeric(frame, "x", "centroids")
    ys = _numeric(frame, "y", "centroids")
    lookup = {i: (a, b) for i, a, b in zip(frame["id"], xs, ys)}
    missing = [i for i in ids if i not in lookup]
    if missing:
        raise ValidationError(f"centroids missing for ids {_limit_ids(missing)}")
    return np.array([lookup[i] for i in ids], dtype=np.float64)


def read_precision(path: Union[str, Path], file_ids, graph_ids) -> SparseSym:
    """Matrix Market precision whose order follows `file_ids`, permuted to `graph_ids`."""
    try:
        rows, cols, _, fmt, value_field, symmetry = mminfo(str(path))
        matrix = sp.csc_matrix(mmread(str(path)), dtype=np.float64)
    except FileNotFoundError:
        raise ValidationError(f"precision file not found: {path}") from None
    except (OSError, ValueError) as err:
        raise ValidationError(f"cannot read Matrix Market file {path}: {err}") from None
    if fmt != "coordinate" or value_field not in ("real", "integer"):
        raise ValidationError(f"{path}: expected a real coordinate Matrix Market file")
    if symmetry not in ("symmetric", "general"):
        raise ValidationError(f"{path}: unsupported symmetry {symmetry!r}")
    if rows != cols or rows != len(file_ids):
        raise ValidationError(f"{path}: precision is {rows}x{cols} but there are {len(file_ids)} values")
    position = {i: n for n, i in enumerate(file_ids)}
    perm = np.array([position[i] for i in graph_ids], dtype=np.int64)
    try:
        return SparseSym.from_scipy(matrix[perm][:, perm])
    except ValidationError as err:
        raise ValidationError(f"{path}: {err}") from None


def load_problem(cfg: RunConfig) -> Problem:
    """Read and join all inputs, bridging components when asked."""
    polygons, features = None, None
    if cfg.geojson is not None:
        polygons, features = read_geojson(cfg.geojson)
        graph = rook_adjacency(polygons, cfg.rook_tol)
    else:
        graph = read_edge_list(cfg.graph)
    graph_ids = [str(i) for i in graph.labels]

    values = read_values(cfg.values)
    known = set(graph_ids)
    extra = [i for i in values.index if i not in known]
    if extra:
        raise ValidationError(f"ids in values but not in graph: {_limit_ids(extra)}")
    missing = [i for i in graph_ids if i not in values.index]
    if missing:
        raise ValidationError(f"ids in graph without a value: {_limit_ids(missing)}")
    x = values.loc[graph_ids].to_numpy(dtype=np.float64)

    if cfg.precision is not None:
        precision = read_precision(cfg.precision, list(values.index), graph_ids)
    else:
        precision = SparseSym.identity(graph.n_vertices)

    comps = components(graph)
    per_component = False
    if comps.component_count > 1:
        if cfg.bridge:
            if cfg.centroids is not None:
                centroids = read_centroids(cfg.centroids, graph_ids)
            elif polygons is not None:
                centroids = polygons.centroid_array()
            else:
                raise ValidationError("bridging components requires centroids or GeoJSON input")
            graph = bridge_components(graph, centroids)
            comps = components(graph)
        elif _couples_components(precision, comps):
            logger.warning(f"graph has {comps.component_count} connected components but the precision "
                           f"couples them; solving them jointly")
        else:
            logger.warning(f"graph has {comps.component_count} connected components; fitting each separately")
            per_component = True
    logger.info(f"Loaded p={graph.n_vertices} vertices, {graph.n_edges} edges, "
                f"{'given' if cfg.precision else 'identity'} precision")
    return Problem(graph, x, precision, comps, polygons, features, per_component)


def _couples_components(precision: SparseSym, comps: ComponentMap) -> bool:
    keys = precision.pattern_keys
    rows, cols = keys % precision.dim, keys // precision.dim
    crossing = comps.component_id[rows] != comps.component_id[cols]
    return bool(np.any(precision.data[crossing] != 0))


def fit_problem(problem: Problem, cfg: RunConfig) -> ProblemFit:
    """Penalty path, selection and zones for every part of the problem."""
    ar = cfg.ar_config()
    fits = []
    for number, (vertices, graph, x, prec) in enumerate(problem.parts()):
        if problem.per_component:
            logger.info(f"Component {number}: {graph.n_vertices} vertices, {graph.n_edges} edges")
        path = run_path(x, prec, graph, cfg.penalties(prec), ar)
        selected = path.selected.get(cfg.criterion)
        if selected is None:
            where = f" of component {number}" if problem.per_component else ""
            raise SelectionError(f"{cfg.criterion} degenerate on the path{where}")
        segmentation = extract_zones(graph, path.records[selected].state(), ar,
                                     refit=cfg.refit, x=x, prec=prec)
        fits.append(ComponentFit(vertices, graph, path, selected, segmentation))
    stitched = stitch_segmentations([(fit.vertices, fit.segmentation) for fit in fits],
                                    problem.graph.n_vertices)
    return ProblemFit(cfg.criterion, fits, stitched)


def path_summary(path: PathFit, graph: Graph, criterion: Optional[str] = None) -> Dict[str, Any]:
    labels = graph.labels
    bridges = graph.edges[graph.bridge_mask]
    return {
        "criterion": criterion,
        "selected": path.selected,
        "partial": path.partial,
        "n_vertices": graph.n_vertices,
        "n_edges": graph.n_edges,
        "bridge_edges": [[labels[j], labels[k]] for j, k in bridges.tolist()],
        "records": [
            {
                "lambda": _sig(r.lam),
                "effective_dim": _sig(r.effective_dim),
                "effective_dim_stderr": _sig(r.effective_dim_stderr),
                "cost2": _sig(r.cost2),
                "aic": _sig(r.aic),
                "bic": _sig(r.bic),
                "gcv": _sig(r.gcv),
                "gcv_defined": r.gcv_defined,
                "zone_count": r.zone_count,
                "iterations": r.iterations,
                "converged": r.converged,
                "wall_time": r.wall_time,
                "error": r.error,
            }
            for r in path.records
        ],
    }


def segmentation_frame(graph: Graph, segmentation: Segmentation) -> pd.DataFrame:
    return pd.DataFrame({
        "id": list(graph.labels),
        "zone": segmentation.zone_id,
        "theta_hat": segmentation.theta_hat,
        "zone_mean": segmentation.zone_mean,
    })


def cut_edges_frame(graph: Graph, segmentation: Segmentation) -> pd.DataFrame:
    labels = graph.labels
    return pd.DataFrame({
        "src": [labels[j] for j in segmentation.cut_edges[:, 0]],
        "dst": [labels[k] for k in segmentation.cut_edges[:, 1]],
        "delta": segmentation.cut_deltas,
    })


def write_feature_collection(path: Union[str, Path], features: List[dict]) -> None:
    with open(path, "w") as f:
        json.dump({"type": "FeatureCollection", "features": features}, f, indent=1)
        f.write("\n")


def polygon_features(polygons: PolygonSet, properties: pd.DataFrame) -> List[dict]:
    """Features for synthetic polygons, one properties row per area."""
    features = []
    for area, row in zip(polygons.rings, properties.to_dict(orient="records")):
        geometry = mapping(Polygon(area[0], area[1:]))
        features.append({
            "type": "Feature",
            "properties": {k: _native(v) for k, v in row.items()},
            "geometry": geometry,
        })
    return features


def fit_summary(problem: Problem, fit: ProblemFit) -> Dict[str, Any]:
    """path.json content: one path, or one path per separately fitted component."""
    if not problem.per_component:
        return path_summary(fit.parts[0].path, problem.graph, fit.criterion)
    parts = []
    for number, part in enumerate(fit.parts):
        summary = path_summary(part.path, part.graph)
        summary.pop("criterion")
        parts.append({"component": number, "ids": list(part.graph.labels), **summary})
    return {
        "criterion": fit.criterion,
        "partial": fit.partial,
        "n_vertices": problem.graph.n_vertices,
        "n_edges": problem.graph.n_edges,
        "bridge_edges": [],
        "components": parts,
    }


def fit_curves(problem: Problem, fit: ProblemFit) -> pd.DataFrame:
    """Criterion curves; a leading component column when components were fitted separately."""
    if not problem.per_component:
        return fit.parts[0].path.curves()
    frames = []
    for number, part in enumerate(fit.parts):
        frame = part.path.curves()
        frame.insert(0, "component", number)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def write_bundle(out_dir: Union[str, Path], problem: Problem, fit: ProblemFit) -> Path:
    """Write path.json, segmentation.csv, cut_edges.csv, criteria.csv and, for GeoJSON input, segmentation.geojson."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    graph = problem.graph
    segmentation = fit.segmentation
    with open(out / "path.json", "w") as f:
        json.dump(fit_summary(problem, fit), f, indent=2)
        f.write("\n")
    segmentation_frame(graph, segmentation).to_csv(out / "segmentation.csv", index=False, float_format=FLOAT_FORMAT)
    cut_edges_frame(graph, segmentation).to_csv(out / "cut_edges.csv", index=False, float_format=FLOAT_FORMAT)
    fit_curves(problem, fit).to_csv(out / "criteria.csv", index=False, float_format=FLOAT_FORMAT)
    if problem.features is not None:
        merged = []
        for feature, zone, theta, mean in zip(problem.features, segmentation.zone_id,
                                               segmentation.theta_hat, segmentation.zone_mean):
            props = dict(feature.get("properties") or {})
            props.update(zone=int(zone), theta_hat=_sig(theta), zone_mean=_sig(mean))
            merged.append({**feature, "properties": props})
        write_feature_collection(out / "segmentation.geojson", merged)
    logger.info(f"Wrote result bundle to {out}")
    return out
