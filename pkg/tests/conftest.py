"""Shared fixtures and dense reference helpers."""

import numpy as np
import pytest
import scipy.sparse as sp

from graphseg.graph import Graph
from graphseg.sim import lattice_graph
from graphseg.sparse import SparseSym


def dense_laplacian(g: Graph, weights) -> np.ndarray:
    K = np.zeros((g.n_vertices, g.n_vertices))
    for (j, k), w in zip(g.edges, weights):
        K[j, j] += w
        K[k, k] += w
        K[j, k] -= w
        K[k, j] -= w
    return K


def random_spd(rng: np.random.Generator, p: int, density: float = 0.3) -> np.ndarray:
    """Sparse-ish symmetric positive definite matrix, exactly symmetric."""
    m = rng.normal(size=(p, p)) * (rng.random((p, p)) < density)
    a = m @ m.T + p * 0.1 * np.eye(p)
    return (a + a.T) / 2


def random_graph(rng: np.random.Generator, p: int, extra_edges: int) -> Graph:
    """A random spanning path plus random chords."""
    order = rng.permutation(p)
    edges = [(order[i], order[i + 1]) for i in range(p - 1)]
    for _ in range(extra_edges):
        j, k = rng.choice(p, size=2, replace=False)
        edges.append((j, k))
    return Graph.from_edges(p, edges)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grid_4x4():
    return lattice_graph(4, 4)


@pytest.fixture
def spd_pair(rng):
    """Two random SPD matrices of size 10 as SparseSym."""
    return (SparseSym.from_scipy(sp.csc_matrix(random_spd(rng, 10))),
            SparseSym.from_scipy(sp.csc_matrix(random_spd(rng, 10))))


@pytest.fixture
def write_text(tmp_path):
    """Write a text file under tmp_path and return its path."""
    def write(name: str, content: str):
        path = tmp_path / name
        path.write_text(content)
        return path
    return write
