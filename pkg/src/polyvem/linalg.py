"""Sparse storage and direct solves.

CSR storage is scipy's ``csr_matrix``; this module adds a canonical triplet
constructor, a residual-checked LU solve, a factorization cache for
sequences of nearby systems, and a fixed-pattern assembler that scatters
element blocks straight into CSR data arrays.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

RESIDUAL_CONTRACT = 1e-10


class SingularMatrixError(RuntimeError):
    pass


def from_triplets(n: int, rows, cols, vals, ncols: int | None = None) -> sp.csr_matrix:
    """CSR matrix with duplicates summed in a canonical order.

    Entries are sorted by (row, col, value) before summation, so any
    permutation of the input produces a bit-identical result.
    """
    ncols = n if ncols is None else ncols
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    vals = np.asarray(vals, dtype=float).ravel()
    if not (len(rows) == len(cols) == len(vals)):
        raise ValueError("rows, cols and vals differ in length")
    if len(rows) and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= ncols):
        raise IndexError("triplet index out of range")
    if len(rows) == 0:
        return sp.csr_matrix((n, ncols))
    order = np.lexsort((vals, cols, rows))
    r, c, v = rows[order], cols[order], vals[order]
    start = np.flatnonzero(np.r_[True, (r[1:] != r[:-1]) | (c[1:] != c[:-1])])
    summed = np.add.reduceat(v, start)
    r, c = r[start], c[start]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, r + 1, 1)
    np.cumsum(indptr, out=indptr)
    return sp.csr_matrix((summed, c, indptr), shape=(n, ncols))


def _factor(A):
    try:
        lu = splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise SingularMatrixError(f"matrix is singular: {exc}") from None
    diag = np.abs(lu.U.diagonal())
    if diag.size and (not np.all(np.isfinite(diag)) or diag.min() <= 1e-300):
        raise SingularMatrixError("matrix is singular: zero pivot")
    return lu


def _relres(A, x, b, bnorm):
    r = b - A @ x
    return r, np.linalg.norm(r) / bnorm


def solve(A, b: np.ndarray) -> np.ndarray:
    """Direct sparse LU with partial pivoting; residual checked."""
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    lu = _factor(A)
    x = lu.solve(b)
    r, rel = _relres(A, x, b, bnorm)
    for _ in range(3):
        if rel <= RESIDUAL_CONTRACT * 1e-2:
            break
        x = x + lu.solve(r)
        r, rel = _relres(A, x, b, bnorm)
    if not np.isfinite(rel) or rel > RESIDUAL_CONTRACT:
        raise SingularMatrixError(f"solve failed residual contract (relative residual {rel:.2e})")
    return x


class CachedLU:
    """Solver for a sequence of slowly varying systems.

    Keeps the LU factors of an earlier matrix and uses them as a
    preconditioner for iterative refinement on the current one; refactors
    when refinement stalls.  Every returned solution meets the same
    relative residual bound as :func:`solve`.
    """

    def __init__(self, rtol: float = 1e-12, max_refine: int = 6):
        self.rtol = rtol
        self.max_refine = max_refine
        self._lu = None
        self.factorizations = 0
        self.refinements = 0

    def reset(self):
        self._lu = None

    def _refactor(self, A):
        self._lu = _factor(A)
        self.factorizations += 1

    def solve(self, A, b: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros_like(b)
        if self._lu is None:
            self._refactor(A)
        if x0 is None:
            x = self._lu.solve(b)
        else:
            x = x0.copy()
        r, rel = _relres(A, x, b, bnorm)
        prev = np.inf
        for _ in range(self.max_refine):
            if rel <= self.rtol:
                return x
            if rel > 0.5 * prev:
                break
            prev = rel
            x = x + self._lu.solve(r)
            self.refinements += 1
            r, rel = _relres(A, x, b, bnorm)
        if rel <= self.rtol:
            return x
        self._refactor(A)
        x = self._lu.solve(b)
        r, rel = _relres(A, x, b, bnorm)
        for _ in range(3):
            if rel <= self.rtol:
                break
            x = x + self._lu.solve(r)
            r, rel = _relres(A, x, b, bnorm)
        if not np.isfinite(rel) or rel > RESIDUAL_CONTRACT:
            raise SingularMatrixError(f"solve failed residual contract (relative residual {rel:.2e})")
        return x


class AssemblyPattern:
    """Fixed sparsity pattern built from per-cell dof lists.

    ``blocks`` passed to :meth:`scatter` must follow the order of the
    ``cell_dofs`` arrays given at construction: a list of arrays of shape
    ``(ne, nloc, nloc)``, one per group.
    """

    def __init__(self, n: int, cell_dofs: list[np.ndarray], free: np.ndarray):
        self.n = n
        rows = np.concatenate([np.repeat(d, d.shape[1], axis=1).ravel() for d in cell_dofs])
        cols = np.concatenate([np.tile(d, (1, d.shape[1])).ravel() for d in cell_dofs])
        key = rows * n + cols
        uniq, inv = np.unique(key, return_inverse=True)
        self.nnz = len(uniq)
        self.pos = inv.ravel()
        r, c = uniq // n, uniq % n
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        np.cumsum(indptr, out=indptr)
        self.indptr, self.indices = indptr, c
        self.free = np.asarray(free, dtype=bool)
        self.free_idx = np.flatnonzero(self.free)
        self.fixed_idx = np.flatnonzero(~self.free)
        # locate sub-blocks by slicing a matrix whose data are source positions
        probe = sp.csr_matrix((np.arange(1, self.nnz + 1, dtype=float), c, indptr), shape=(n, n))
        ff = probe[self.free_idx][:, self.free_idx].tocsr()
        fb = probe[self.free_idx][:, self.fixed_idx].tocsr()
        ff.sort_indices()
        fb.sort_indices()
        self._ff = (ff.data.astype(np.int64) - 1, ff.indices, ff.indptr, ff.shape)
        self._fb = (fb.data.astype(np.int64) - 1, fb.indices, fb.indptr, fb.shape)

    @property
    def free_free_source(self) -> np.ndarray:
        """Positions in the full data array of the free/free block entries."""
        return self._ff[0]

    @property
    def free_fixed_source(self) -> np.ndarray:
        return self._fb[0]

    def free_free_from(self, ff_data: np.ndarray) -> sp.csr_matrix:
        """Free/free matrix from data already restricted to that block."""
        _, ind, ptr, shape = self._ff
        return sp.csr_matrix((ff_data, ind, ptr), shape=shape)

    def free_fixed_from(self, fb_data: np.ndarray) -> sp.csr_matrix:
        _, ind, ptr, shape = self._fb
        return sp.csr_matrix((fb_data, ind, ptr), shape=shape)

    def linear_map(self, tensors: list[np.ndarray]) -> sp.csr_matrix:
        """Sparse map from per-cell coefficients to full CSR data.

        ``tensors[g]`` has shape (ne, nc, nloc*nloc) for group g; the column
        index of coefficient (e, a) counts cells group by group.
        """
        rows, cols, vals = [], [], []
        start = off = 0
        for T in tensors:
            ne, nc, nl2 = T.shape
            pos = self.pos[start:start + ne * nl2].reshape(ne, 1, nl2)
            start += ne * nl2
            slot = (off + np.arange(ne * nc)).reshape(ne, nc, 1)
            off += ne * nc
            rows.append(np.broadcast_to(pos, T.shape).ravel())
            cols.append(np.broadcast_to(slot, T.shape).ravel())
            vals.append(T.ravel())
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.nnz, off))

    def scatter(self, blocks: list[np.ndarray]) -> np.ndarray:
        vals = np.concatenate([b.ravel() for b in blocks])
        return np.bincount(self.pos, weights=vals, minlength=self.nnz)

    def full(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def free_free(self, data: np.ndarray) -> sp.csr_matrix:
        src, ind, ptr, shape = self._ff
        return sp.csr_matrix((data[src], ind, ptr), shape=shape)

    def free_fixed(self, data: np.ndarray) -> sp.csr_matrix:
        src, ind, ptr, shape = self._fb
        return sp.csr_matrix((data[src], ind, ptr), shape=shape)
