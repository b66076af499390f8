"""
Adjacency graphs for signals on areas.

Graphs come from edge lists or from polygon geometry (rook contiguity), can
be bridged across connected components, and produce the weighted Laplacian
used by the penalty.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from graphseg.errors import ValidationError
from graphseg.sparse import SparseSym

logger = logging.getLogger(__name__)

DEFAULT_ROOK_TOL = 1e-9
_BRIDGE_CHUNK = 512


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected weighted graph on vertices 0..p-1, edges stored as j < k."""
    n_vertices: int
    edges: np.ndarray
    weights: np.ndarray
    vertex_labels: Optional[Tuple[Hashable, ...]] = None
    bridge_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.n_vertices < 1:
            raise ValidationError("a graph needs at least one vertex")
        if self.edges.ndim != 2 or self.edges.shape[1] != 2:
            raise ValidationError(f"edges must have shape (m, 2), got {self.edges.shape}")
        if len(self.weights) != len(self.edges):
            raise ValidationError("one weight per edge is required")
        if len(self.edges) and (np.any(self.edges[:, 0] >= self.edges[:, 1])
                                or self.edges.min() < 0 or self.edges.max() >= self.n_vertices):
            raise ValidationError("edges must be canonical pairs j < k inside [0, p)")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValidationError("edge weights must be finite and non-negative")
        if self.vertex_labels is not None and len(self.vertex_labels) != self.n_vertices:
            raise ValidationError("one label per vertex is required")
        if self.bridge_mask is None:
            object.__setattr__(self, "bridge_mask", _readonly(np.zeros(len(self.edges), dtype=bool)))

    @classmethod
    def from_edges(
        cls,
        n_vertices: int,
        edges,
        weights=None,
        vertex_labels: Optional[Sequence[Hashable]] = None,
        bridge_mask=None,
    ) -> "Graph":
        """Canonicalize index pairs (sort, dedupe) into a Graph."""
        pairs = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        m = len(pairs)
        w = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)
        bridges = np.zeros(m, dtype=bool) if bridge_mask is None else np.asarray(bridge_mask, dtype=bool)
        if len(w) != m or len(bridges) != m:
            raise ValidationError("weights and bridge flags must match the edge count")
        loops = pairs[:, 0] == pairs[:, 1]
        if np.any(loops):
            j = int(pairs[loops][0, 0])
            name = vertex_labels[j] if vertex_labels is not None else j
            raise ValidationError(f"self-loop on vertex {name!r}")
        pairs = np.sort(pairs, axis=1)
        if m:
            pairs, first = np.unique(pairs, axis=0, return_index=True)
            w, bridges = w[first], bridges[first]
        labels = tuple(vertex_labels) if vertex_labels is not None else None
        return cls(
            n_vertices=int(n_vertices),
            edges=_readonly(pairs.astype(np.int64)),
            weights=_readonly(w.copy()),
            vertex_labels=labels,
            bridge_mask=_readonly(bridges.copy()),
        )

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def labels(self) -> Tuple[Hashable, ...]:
        if self.vertex_labels is not None:
            return self.vertex_labels
        return tuple(range(self.n_vertices))

    @cached_property
    def label_index(self) -> Dict[Hashable, int]:
        return {label: i for i, label in enumerate(self.labels)}

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_vertices)

    def adjacency(self, mask: Optional[np.ndarray] = None) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency restricted to the masked edges."""
        edges = self.edges if mask is None else self.edges[mask]
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n_vertices, self.n_vertices))

    def with_edges(self, extra, bridge: bool = True) -> "Graph":
        extra = np.asarray(extra, dtype=np.int64).reshape(-1, 2)
        return Graph.from_edges(
            self.n_vertices,
            np.vstack([self.edges, extra]),
            weights=np.concatenate([self.weights, np.ones(len(extra))]),
            vertex_labels=self.vertex_labels,
            bridge_mask=np.concatenate([self.bridge_mask, np.full(len(extra), bridge)]),
        )

    def relabeled(self, perm) -> "Graph":
        """Graph where new vertex i is old vertex perm[i]."""
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        labels = None if self.vertex_labels is None else tuple(self.vertex_labels[i] for i in perm)
        return Graph.from_edges(self.n_vertices, inverse[self.edges], self.weights, labels, self.bridge_mask)

    def subgraph(self, vertices) -> "Graph":
        """Induced subgraph; new vertex i is old vertex vertices[i]."""
        vertices = np.asarray(vertices, dtype=np.int64)
        position = np.full(self.n_vertices, -1, dtype=np.int64)
        position[vertices] = np.arange(len(vertices))
        inside = (position[self.edges[:, 0]] >= 0) & (position[self.edges[:, 1]] >= 0)
        labels = None if self.vertex_labels is None else tuple(self.vertex_labels[i] for i in vertices)
        return Graph.from_edges(len(vertices), position[self.edges[inside]], self.weights[inside], labels,
                                self.bridge_mask[inside])


def build_from_edge_list(
    pairs: Iterable[Tuple[Hashable, Hashable]],
    vertices: Optional[Iterable[Hashable]] = None,
) -> Graph:
    """Graph from labelled pairs; vertex indices follow sorted label order."""
    pairs = list(pairs)
    for a, b in pairs:
        if a == b:
            raise ValidationError(f"self-loop on vertex {a!r}")
    labels = set(vertices or ())
    for a, b in pairs:
        labels.update((a, b))
    if not labels:
        raise ValidationError("edge list declares no vertices")
    try:
        ordered = sorted(labels)
    except TypeError:
        raise ValidationError("vertex ids must be mutually comparable") from None
    index = {label: i for i, label in enumerate(ordered)}
    edges = [(index[a], index[b]) for a, b in pairs]
    return Graph.from_edges(len(ordered), edges, vertex_labels=ordered)


@dataclass(frozen=True, eq=False)
class ComponentMap:
    """Connected component id per vertex, ids contiguous from 0."""
    component_id: np.ndarray
    component_count: int
    component_sizes: np.ndarray

    def members(self, component: int) -> np.ndarray:
        return np.flatnonzero(self.component_id == component)


def _label_components(adjacency: sp.csr_matrix) -> ComponentMap:
    count, labels = connected_components(adjacency, directed=False)
    labels = labels.astype(np.int64)
    return ComponentMap(_readonly(labels), int(count), _readonly(np.bincount(labels, minlength=count)))


def components(g: Graph, edge_mask: Optional[np.ndarray] = None) -> ComponentMap:
    """Connected components over the masked edges, default those with positive weight."""
    mask = g.weights > 0 if edge_mask is None else np.asarray(edge_mask, dtype=bool)
    return _label_components(g.adjacency(mask))


@dataclass(frozen=True, eq=False)
class PolygonSet:
    """Closed boundary rings (exteriors and holes) per area, in planar units."""
    ids: Tuple[Hashable, ...]
    rings: Tuple[Tuple[np.ndarray, ...], ...]
    centroids: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.ids) != len(self.rings):
            raise ValidationError("one ring list per area id is required")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("area ids must be unique")
        for area_id, area in zip(self.ids, self.rings):
            if not area:
                raise ValidationError(f"area {area_id!r} has no rings")
            for ring in area:
                if ring.ndim != 2 or ring.shape[1] != 2:
                    raise ValidationError(f"area {area_id!r}: rings must be (k, 2) coordinate arrays")
                if len(ring) < 4 or not np.array_equal(ring[0], ring[-1]):
                    raise ValidationError(f"area {area_id!r}: ring is not closed")
                if len(np.unique(ring[:-1], axis=0)) < 3:
                    raise ValidationError(f"area {area_id!r}: ring has fewer than 3 distinct vertices")
        if self.centroids is not None and np.shape(self.centroids) != (len(self.ids), 2):
            raise ValidationError("centroids must have shape (areas, 2)")

    def centroid_array(self) -> np.ndarray:
        """Given centroids, else the mean of each area's ring vertices."""
        if self.centroids is not None:
            return np.asarray(self.centroids, dtype=np.float64)
        return np.array([np.vstack([ring[:-1] for ring in area]).mean(axis=0) for area in self.rings])


def rook_adjacency(polys: PolygonSet, tol: float = DEFAULT_ROOK_TOL) -> Graph:
    """
    Areas are adjacent iff they share a boundary segment of positive length.

    Segment endpoints are quantized to multiples of `tol` and hashed without
    direction, so corner-only contact never creates an edge.
    """
    if tol <= 0:
        raise ValidationError("rook tolerance must be positive")
    owners: Dict[Tuple[int, int, int, int], List[int]] = {}
    limit = np.iinfo(np.int64).max // 2
    for area, rings in enumerate(polys.rings):
        for ring in rings:
            scaled = np.round(np.asarray(ring, dtype=np.float64) / tol)
            if np.any(np.abs(scaled) > limit):
                raise ValidationError(f"coordinates of area {polys.ids[area]!r} overflow at tolerance {tol}")
            q = scaled.astype(np.int64)
            a, b = q[:-1], q[1:]
            if np.any(np.all(a == b, axis=1)):
                raise ValidationError(f"area {polys.ids[area]!r} has a zero-length boundary segment")
            swap = (a[:, 0] > b[:, 0]) | ((a[:, 0] == b[:, 0]) & (a[:, 1] > b[:, 1]))
            lo = np.where(swap[:, None], b, a)
            hi = np.where(swap[:, None], a, b)
            for key in map(tuple, np.hstack([lo, hi]).tolist()):
                holders = owners.setdefault(key, [])
                if area not in holders:
                    holders.append(area)
    pairs = set()
    for holders in owners.values():
        if len(holders) > 1:
            pairs.update(combinations(sorted(holders), 2))
    graph = Graph.from_edges(len(polys.ids), sorted(pairs), vertex_labels=polys.ids)
    logger.debug(f"Rook adjacency: {graph.n_vertices} areas, {graph.n_edges} edges")
    return graph


def _closest_pair(first: np.ndarray, second: np.ndarray, points: np.ndarray) -> Tuple[int, int]:
    best_distance = np.inf
    best_pair: Optional[Tuple[int, int]] = None
    for start in range(0, len(first), _BRIDGE_CHUNK):
        block = first[start:start + _BRIDGE_CHUNK]
        distances = cdist(points[block], points[second], metric="sqeuclidean")
        low = distances.min()
        if low > best_distance:
            continue
        rows, cols = np.nonzero(distances == low)
        candidates = [tuple(sorted((int(block[r]), int(second[c])))) for r, c in zip(rows, cols)]
        pair = min(candidates)
        if low < best_distance or pair < best_pair:
            best_distance, best_pair = low, pair
    return best_pair


def bridge_components(g: Graph, centroids) -> Graph:
    """Join every pair of components by their closest centroid pair."""
    if centroids is None:
        raise ValidationError("bridging components requires centroids for every vertex")
    points = np.asarray(centroids, dtype=np.float64)
    if points.shape != (g.n_vertices, 2) or not np.all(np.isfinite(points)):
        raise ValidationError(f"centroids must be finite with shape ({g.n_vertices}, 2), got {points.shape}")
    comps = components(g)
    if comps.component_count < 2:
        return g
    members = [comps.members(c) for c in range(comps.component_count)]
    added = [_closest_pair(members[a], members[b], points)
             for a, b in combinations(range(comps.component_count), 2)]
    logger.info(f"Bridged {comps.component_count} components with {len(added)} artificial edges")
    return g.with_edges(added, bridge=True)


class LaplacianAssembler:
    """
    Fixed CSC pattern of K = D - A for one graph.

    Every edge and every diagonal slot is stored, including zero weights, so
    all Laplacians of the graph share one pattern.
    """

    def __init__(self, g: Graph):
        p = g.n_vertices
        j = g.edges[:, 0]
        k = g.edges[:, 1]
        diagonal = np.arange(p, dtype=np.int64) * (p + 1)
        upper = k * p + j
        lower = j * p + k
        keys = np.unique(np.concatenate([diagonal, upper, lower]))
        self.graph = g
        self._diag_pos = np.searchsorted(keys, diagonal)
        self._upper_pos = np.searchsorted(keys, upper)
        self._lower_pos = np.searchsorted(keys, lower)
        self.template = SparseSym(
            p,
            _readonly(np.searchsorted(keys // p, np.arange(p + 1)).astype(np.int64)),
            _readonly((keys % p).astype(np.int64)),
            np.zeros(len(keys)),
        )

    def __call__(self, weights) -> SparseSym:
        g = self.graph
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (g.n_edges,):
            raise ValidationError(f"expected {g.n_edges} edge weights, got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValidationError("Laplacian weights must be finite and non-negative")
        data = np.zeros(self.template.nnz)
        data[self._upper_pos] = -w
        data[self._lower_pos] = -w
        degree = (np.bincount(g.edges[:, 0], w, minlength=g.n_vertices)
                  + np.bincount(g.edges[:, 1], w, minlength=g.n_vertices))
        data[self._diag_pos] = degree
        return self.template.with_data(data)


def laplacian(g: Graph, weights=None) -> SparseSym:
    """Weighted Laplacian; defaults to the graph's own edge weights."""
    return LaplacianAssembler(g)(g.weights if weights is None else weights)
