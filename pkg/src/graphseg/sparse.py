"""
Symmetric sparse storage and a sparse positive-definite solver.

The solver separates the symbolic phase (minimum-degree ordering, computed
once per sparsity pattern) from the numeric phase, so a penalty path can
refactor thousands of same-pattern matrices without redoing the analysis.
SuperLU from scipy does the numeric work unless scikit-sparse is installed,
in which case CHOLMOD does.
"""

import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, List, Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

try:
    from sksparse import cholmod
except ImportError:
    cholmod = None

from graphseg.errors import NotPositiveDefiniteError, ValidationError

logger = logging.getLogger(__name__)

THREADS_ENV = "GRAPHSEG_THREADS"
EXACT_TRACE_LIMIT = 20_000


class TraceMode(str, Enum):
    """How the effective dimension trace is computed."""
    EXACT = "exact"
    STOCHASTIC = "stochastic"


def default_threads() -> int:
    """Worker cap from GRAPHSEG_THREADS, else min(4, cpu count)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return max(1, min(4, os.cpu_count() or 1))
    try:
        threads = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if threads < 1:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threads


def _column_keys(dim: int, indptr: np.ndarray, indices: np.ndarray) -> np.ndarray:
    cols = np.repeat(np.arange(dim, dtype=np.int64), np.diff(indptr))
    return cols * dim + indices.astype(np.int64)


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class SparseSym:
    """Symmetric matrix in compressed-column form, full pattern stored."""
    dim: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f"dimension must be >= 1, got {self.dim}")
        if len(self.indptr) != self.dim + 1:
            raise ValidationError("column pointer length does not match dimension")
        if len(self.indices) != len(self.data) or self.indptr[-1] != len(self.data):
            raise ValidationError("row index and value arrays disagree with column pointers")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("sparse matrix contains non-finite values")

    @classmethod
    def from_scipy(cls, matrix, rtol: float = 1e-12) -> "SparseSym":
        """Copy a scipy/numpy matrix, checking pattern and value symmetry."""
        m = sp.csc_matrix(matrix, dtype=np.float64, copy=True)
        if m.shape[0] != m.shape[1]:
            raise ValidationError(f"matrix must be square, got shape {m.shape}")
        m.sum_duplicates()
        m.sort_indices()
        dim = m.shape[0]
        keys = _column_keys(dim, m.indptr, m.indices)
        cols = keys // dim
        rows = keys % dim
        mirrored = rows * dim + cols
        order = np.argsort(mirrored, kind="stable")
        if not np.array_equal(mirrored[order], keys):
            raise ValidationError("matrix sparsity pattern is not symmetric")
        mirror = m.data[order]
        scale = float(np.max(np.abs(m.data))) if m.nnz else 0.0
        if not np.allclose(m.data, mirror, rtol=0.0, atol=rtol * max(scale, 1e-300)):
            raise ValidationError("matrix values are not symmetric")
        data = 0.5 * (m.data + mirror)
        return cls(dim, _frozen(m.indptr, np.int64), _frozen(m.indices, np.int64), _frozen(data, np.float64))

    @classmethod
    def diagonal(cls, values) -> "SparseSym":
        values = np.asarray(values, dtype=np.float64)
        dim = len(values)
        return cls(dim, _frozen(np.arange(dim + 1), np.int64), _frozen(np.arange(dim), np.int64),
                   _frozen(values, np.float64))

    @classmethod
    def identity(cls, dim: int, scale: float = 1.0) -> "SparseSym":
        return cls.diagonal(np.full(dim, float(scale)))

    @property
    def nnz(self) -> int:
        return len(self.data)

    @cached_property
    def pattern_keys(self) -> np.ndarray:
        return _column_keys(self.dim, self.indptr, self.indices)

    @cached_property
    def fingerprint(self) -> str:
        digest = hashlib.sha1()
        digest.update(np.int64(self.dim).tobytes())
        digest.update(np.ascontiguousarray(self.indptr, dtype=np.int64).tobytes())
        digest.update(np.ascontiguousarray(self.indices, dtype=np.int64).tobytes())
        return digest.hexdigest()

    def same_pattern(self, other: "SparseSym") -> bool:
        if self.indptr is other.indptr and self.indices is other.indices:
            return True
        return (self.dim == other.dim and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    def is_pattern_symmetric(self) -> bool:
        keys = self.pattern_keys
        mirrored = (keys % self.dim) * self.dim + keys // self.dim
        return np.array_equal(np.sort(mirrored), np.sort(keys))

    def with_data(self, data) -> "SparseSym":
        """Same pattern, new values; the pattern arrays are shared."""
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.data.shape:
            raise ValidationError(f"expected {self.nnz} values, got {data.shape}")
        return SparseSym(self.dim, self.indptr, self.indices, data)

    def to_scipy(self) -> sp.csc_matrix:
        return sp.csc_matrix((np.array(self.data), np.array(self.indices), np.array(self.indptr)),
                             shape=(self.dim, self.dim))

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.dim:
            raise ValidationError(f"vector length {x.shape[0]} does not match dimension {self.dim}")
        return self.to_scipy() @ x

    def quadratic_form(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(x @ self.matvec(x))

    def diagonal_values(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def trace(self) -> float:
        return float(np.sum(self.diagonal_values()))

    def permuted(self, perm) -> "SparseSym":
        """Symmetric permutation P A P^T with new index i taking old index perm[i]."""
        perm = np.asarray(perm)
        m = self.to_scipy()[perm][:, perm]
        return SparseSym.from_scipy(m)

    def submatrix(self, indices) -> "SparseSym":
        """Principal submatrix on the given indices, in that order."""
        indices = np.asarray(indices, dtype=np.int64)
        return SparseSym.from_scipy(self.to_scipy()[indices][:, indices])


class StructuralUnion:
    """
    Union pattern of two symmetric matrices plus the full diagonal.

    Built once; `combine` then forms a + s*b for any value arrays carried on
    the same two patterns.
    """

    def __init__(self, a: SparseSym, b: SparseSym):
        if a.dim != b.dim:
            raise ValidationError(f"dimension mismatch: {a.dim} vs {b.dim}")
        dim = a.dim
        diagonal = np.arange(dim, dtype=np.int64) * (dim + 1)
        keys = np.unique(np.concatenate([a.pattern_keys, b.pattern_keys, diagonal]))
        cols = keys // dim
        self.dim = dim
        self.indptr = _frozen(np.searchsorted(cols, np.arange(dim + 1)), np.int64)
        self.indices = _frozen(keys % dim, np.int64)
        self._a_pattern = a
        self._b_pattern = b
        self._a_pos = np.searchsorted(keys, a.pattern_keys)
        self._b_pos = np.searchsorted(keys, b.pattern_keys)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def combine(self, a: SparseSym, b: SparseSym, s: float) -> SparseSym:
        if not (a.same_pattern(self._a_pattern) and b.same_pattern(self._b_pattern)):
            raise ValidationError("operands do not carry the pattern this union was built for")
        data = np.zeros(self.nnz)
        data[self._a_pos] += a.data
        data[self._b_pos] += s * b.data
        return SparseSym(self.dim, self.indptr, self.indices, data)


def add_scaled(a: SparseSym, b: SparseSym, s: float) -> SparseSym:
    """a + s*b on the structural union of both patterns."""
    return StructuralUnion(a, b).combine(a, b, s)


class FactorBackend(str, Enum):
    """Sparse Cholesky implementation behind `factor_numeric`."""
    SUPERLU = "superlu"
    CHOLMOD = "cholmod"


def default_backend() -> FactorBackend:
    """CHOLMOD when scikit-sparse is installed, else SuperLU from scipy."""
    return FactorBackend.SUPERLU if cholmod is None else FactorBackend.CHOLMOD


def _dominant_surrogate(a: SparseSym) -> sp.csc_matrix:
    """Pattern of `a` plus the diagonal, strictly diagonally dominant so any ordering factors."""
    keys = a.pattern_keys
    rows, cols = keys % a.dim, keys // a.dim
    off = rows != cols
    matrix = sp.csc_matrix((np.full(int(off.sum()), -1.0), (rows[off], cols[off])), shape=(a.dim, a.dim))
    counts = np.bincount(cols[off], minlength=a.dim)
    return (matrix + sp.diags(counts + 1.0, format="csc")).tocsc()


def _superlu(matrix: sp.csc_matrix, ordering: str, **kwargs):
    # a zero threshold keeps every pivot on the diagonal
    return splu(matrix, permc_spec=ordering, diag_pivot_thresh=0.0, options={"SymmetricMode": True}, **kwargs)


@dataclass(frozen=True, eq=False)
class SymbolicFactor:
    """Fill-reducing ordering and factor size for one pattern."""
    dim: int
    backend: FactorBackend
    perm: np.ndarray
    inverse_perm: np.ndarray
    factor_nnz: int
    pattern: SparseSym
    fingerprint: str
    # SuperLU: pattern of P A P^T and where each of its entries comes from in `pattern`
    permuted_indptr: Optional[np.ndarray] = field(default=None, repr=False)
    permuted_indices: Optional[np.ndarray] = field(default=None, repr=False)
    sources: Optional[np.ndarray] = field(default=None, repr=False)
    analysis: Any = field(default=None, repr=False)

    def permuted_matrix(self, a: SparseSym) -> sp.csc_matrix:
        return sp.csc_matrix((a.data[self.sources], self.permuted_indices, self.permuted_indptr),
                             shape=(self.dim, self.dim))


@dataclass(frozen=True, eq=False)
class Factorization:
    """A symbolic factor, plus the numeric factor once computed."""
    symbolic: SymbolicFactor
    factor: Any = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.symbolic.dim

    @property
    def perm(self) -> np.ndarray:
        return self.symbolic.perm

    @property
    def is_numeric(self) -> bool:
        return self.factor is not None

    def solve(self, rhs) -> np.ndarray:
        if self.factor is None:
            raise ValidationError("factorization has no numeric values; call factor_numeric first")
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.ndim not in (1, 2) or rhs.shape[0] != self.dim:
            raise ValidationError(f"right-hand side shape {rhs.shape} does not match dimension {self.dim}")
        if self.symbolic.backend is FactorBackend.CHOLMOD:
            return np.asarray(self.factor(rhs)).reshape(rhs.shape)
        perm = self.symbolic.perm
        z = self.factor.solve(np.ascontiguousarray(rhs[perm]))
        out = np.empty_like(z)
        out[perm] = z
        return out


def factor_symbolic(a: SparseSym, backend: Union[FactorBackend, str, None] = None) -> Factorization:
    """Minimum-degree ordering of the pattern, computed once and reused by every refactorization."""
    backend = default_backend() if backend is None else FactorBackend(backend)
    if not a.is_pattern_symmetric():
        raise ValidationError("cannot factor a matrix whose sparsity pattern is not symmetric")
    surrogate = _dominant_surrogate(a)

    if backend is FactorBackend.CHOLMOD:
        if cholmod is None:
            raise ValidationError("the cholmod backend needs scikit-sparse (pip install graphseg[cholmod])")
        analysis = cholmod.analyze(surrogate)
        perm = np.asarray(analysis.P(), dtype=np.int64)
        factor_nnz = int(analysis.cholesky(surrogate).L().nnz)
        extra = {"analysis": analysis}
    else:
        lu = _superlu(surrogate, "MMD_AT_PLUS_A", relax=1)
        perm = np.argsort(lu.perm_c).astype(np.int64)
        factor_nnz = int(np.count_nonzero(lu.L.data))
        tagged = sp.csc_matrix((np.arange(1, a.nnz + 1, dtype=np.float64), a.indices, a.indptr),
                               shape=(a.dim, a.dim))
        permuted = tagged[perm][:, perm].tocsc()
        permuted.sort_indices()
        extra = {
            "permuted_indptr": _frozen(permuted.indptr, np.int64),
            "permuted_indices": _frozen(permuted.indices, np.int64),
            "sources": _frozen(permuted.data - 1, np.int64),
        }
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(a.dim)
    symbolic = SymbolicFactor(
        dim=a.dim,
        backend=backend,
        perm=_frozen(perm, np.int64),
        inverse_perm=_frozen(inverse, np.int64),
        factor_nnz=factor_nnz,
        pattern=a,
        fingerprint=a.fingerprint,
        **extra,
    )
    logger.debug(f"Symbolic factor ({backend.value}): p={a.dim}, nnz(A)={a.nnz}, nnz(L)={factor_nnz}")
    return Factorization(symbolic)


def _superlu_numeric(symbolic: SymbolicFactor, a: SparseSym):
    try:
        lu = _superlu(symbolic.permuted_matrix(a), "NATURAL")
    except RuntimeError:
        # exactly singular
        raise NotPositiveDefiniteError(None) from None
    columns = np.argsort(lu.perm_c)
    swapped = np.flatnonzero(lu.perm_r != lu.perm_c)
    if len(swapped):
        raise NotPositiveDefiniteError(int(symbolic.perm[swapped[0]]))
    bad = np.flatnonzero(lu.U.diagonal() <= 0)
    if len(bad):
        raise NotPositiveDefiniteError(int(symbolic.perm[columns[bad[0]]]))
    return lu


def _cholmod_numeric(symbolic: SymbolicFactor, a: SparseSym):
    try:
        factor = symbolic.analysis.cholesky(a.to_scipy())
    except cholmod.CholmodNotPositiveDefiniteError:
        raise NotPositiveDefiniteError(None) from None
    bad = np.flatnonzero(np.asarray(factor.D()) <= 0)
    if len(bad):
        raise NotPositiveDefiniteError(int(symbolic.perm[bad[0]]))
    return factor


def factor_numeric(f: Factorization, a: SparseSym) -> Factorization:
    """Numeric Cholesky of `a` reusing the symbolic structure of `f`."""
    symbolic = f.symbolic
    if not a.same_pattern(symbolic.pattern):
        raise ValidationError("matrix pattern differs from the one used for the symbolic factorization")
    diagonal = a.diagonal_values()[symbolic.perm]
    bad = np.flatnonzero(~(diagonal > 0))
    if len(bad):
        raise NotPositiveDefiniteError(int(symbolic.perm[bad[0]]))
    if symbolic.backend is FactorBackend.CHOLMOD:
        return Factorization(symbolic, _cholmod_numeric(symbolic, a))
    return Factorization(symbolic, _superlu_numeric(symbolic, a))


def solve(f: Factorization, rhs) -> np.ndarray:
    return f.solve(rhs)


@dataclass(frozen=True)
class TraceEstimate:
    """Tr(A^-1 B); stderr is zero for the exact mode."""
    value: float
    stderr: float = 0.0
    probes: int = 0

    def __float__(self) -> float:
        return self.value


def _exact_block(f: Factorization, b: sp.csc_matrix, start: int, stop: int) -> float:
    dense = b[:, start:stop].toarray()
    y = f.solve(dense)
    return float(np.sum(y[np.arange(start, stop), np.arange(stop - start)]))


def trace_product_inverse(
    f: Factorization,
    b: SparseSym,
    mode: Union[TraceMode, str] = TraceMode.EXACT,
    probes: int = 64,
    seed: Optional[int] = 0,
    block_size: int = 256,
    threads: Optional[int] = None,
) -> TraceEstimate:
    """Tr(A^-1 B) for the factored A: column solves, or Hutchinson probes."""
    mode = TraceMode(mode)
    if b.dim != f.dim:
        raise ValidationError(f"dimension mismatch: factor {f.dim} vs matrix {b.dim}")
    matrix = b.to_scipy()

    if mode is TraceMode.STOCHASTIC:
        if probes < 1:
            raise ValidationError("stochastic trace needs at least one probe")
        rng = np.random.default_rng(seed)
        z = rng.choice([-1.0, 1.0], size=(f.dim, probes))
        y = f.solve(matrix @ z)
        samples = np.einsum("ij,ij->j", z, y)
        stderr = float(samples.std(ddof=1) / math.sqrt(probes)) if probes > 1 else math.inf
        return TraceEstimate(float(samples.mean()), stderr, probes)

    bounds = [(start, min(start + block_size, f.dim)) for start in range(0, f.dim, block_size)]
    cap = default_threads()
    workers = min(threads or cap, cap, len(bounds))
    if workers <= 1:
        partials: List[float] = [_exact_block(f, matrix, lo, hi) for lo, hi in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            partials = list(executor.map(lambda bound: _exact_block(f, matrix, *bound), bounds))
    total = 0.0
    for partial in partials:
        total += partial
    return TraceEstimate(total)
