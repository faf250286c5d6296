"""Rank-parallel conjugate gradient for complex symmetric systems.

The Krylov loop is the unconjugated-inner-product variant (x^T y, not
x^H y) appropriate for complex symmetric matrices.  Three
preconditioners are available: inverse diagonal (DP), zero-fill
incomplete Cholesky built column by column across ranks (ICP), and a
block variant that factors only rank-local entries and therefore needs
no build communication (BICP).  Forward/back substitution for ICP is
pipelined segment-by-segment over the fabric; BICP blocks solve
independently.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np

from .fabric import CommFabric, CONCAT_STRATEGIES
from .sparse import (COMPLEX_BYTES, RedundantRows, RowPartition, SparseVector,
                     full_matvec, spmv_partial)


class SolverError(RuntimeError):
    pass


class SingularPreconditionerError(SolverError):
    """A zero diagonal entry makes the diagonal preconditioner singular."""


class FactorBreakdownError(SolverError):
    """An exactly zero pivot aborted the incomplete factorization."""


class CgBreakdownError(SolverError):
    """The unconjugated bilinear form vanished (p^T A p = 0 or r^T z = 0)."""


@dataclass
class CholeskyFactor:
    """Zero-fill lower factor on (a sub-pattern of) A's lower pattern.

    Rows [row_start, row_end) are stored CSR-style with the diagonal as
    the last entry of each row.  ``col_ptr``/``col_rows``/``col_pos``
    index the same values by column (contiguous per column) and act as
    the column-access twin of L.  ``block_local`` marks a BICP block
    whose columns are restricted to the owned range.
    """
    n: int
    row_start: int
    row_end: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    block_local: bool = False
    col_ptr: np.ndarray = field(default=None, repr=False)
    col_rows: np.ndarray = field(default=None, repr=False)
    col_pos: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.col_ptr is None:
            rows = self.row_start + np.repeat(
                np.arange(self.row_end - self.row_start), np.diff(self.indptr))
            order = np.lexsort((rows, self.indices))
            self.col_pos = order.astype(np.int64)
            self.col_rows = rows[order].astype(np.int64)
            self.col_ptr = np.searchsorted(
                self.indices[order],
                np.arange(self.row_start, self.row_end + 1)).astype(np.int64)

    @property
    def nnz(self) -> int:
        return len(self.data)

    def value_bytes(self) -> int:
        return COMPLEX_BYTES * self.nnz

    def row(self, i: int):
        li = i - self.row_start
        s, e = self.indptr[li], self.indptr[li + 1]
        return self.indices[s:e], self.data[s:e]

    def diag(self, i: int) -> complex:
        li = i - self.row_start
        return self.data[self.indptr[li + 1] - 1]

    def column_below(self, j: int):
        """Rows strictly below the diagonal in column j, with values."""
        lj = j - self.row_start
        s, e = self.col_ptr[lj], self.col_ptr[lj + 1]
        # Entries are row-sorted and the first one is the diagonal.
        return self.col_rows[s + 1:e], self.data[self.col_pos[s + 1:e]]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n), dtype=np.complex128)
        for i in range(self.row_start, self.row_end):
            cols, vals = self.row(i)
            out[i, cols] = vals
        return out


@dataclass
class Preconditioner:
    kind: str                                   # "dp" | "icp" | "bicp"
    inv_diag: np.ndarray | None = None
    factor: CholeskyFactor | None = None

    def memory_bytes(self) -> int:
        if self.kind == "dp":
            return COMPLEX_BYTES * len(self.inv_diag)
        return self.factor.value_bytes()


@dataclass
class SolveReport:
    iterations: int
    residual_history: list
    converged: bool
    breakdown: bool
    preconditioner: str
    strategy: str
    ranks: int
    tol: float
    matrix_bytes: int
    precond_bytes: int
    true_residual: float
    counters: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "residual_history": self.residual_history,
            "converged": self.converged,
            "breakdown": self.breakdown,
            "preconditioner": self.preconditioner,
            "strategy": self.strategy,
            "ranks": self.ranks,
            "tol": self.tol,
            "matrix_bytes": self.matrix_bytes,
            "precond_bytes": self.precond_bytes,
            "true_residual": self.true_residual,
            "counters": self.counters,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.as_dict(), **kwargs)


# ---------------------------------------------------------------------------
# Preconditioner construction
# ---------------------------------------------------------------------------

def build_dp(a, partition: RowPartition | None = None) -> Preconditioner:
    """Inverse of the matrix diagonal; no message passing."""
    d = a.diagonal()
    zero = np.nonzero(d == 0)[0]
    if len(zero):
        raise SingularPreconditionerError(
            f"zero diagonal entry in row {int(zero[0])}")
    return Preconditioner(kind="dp", inv_diag=1.0 / d)


def _lower_pattern(a: RedundantRows, rows_range, col_min: int):
    """Per-row pattern (cols sorted, diagonal last) and the A values on it."""
    pat_cols = []
    pat_avals = []
    for i in range(*rows_range):
        cols, vals = a.row(i)
        keep = (cols >= col_min) & (cols <= i)
        cols, vals = cols[keep], vals[keep]
        if len(cols) == 0 or cols[-1] != i:
            raise FactorBreakdownError(f"missing diagonal in row {i}")
        pat_cols.append(cols.copy())
        pat_avals.append(vals.copy())
    return pat_cols, pat_avals


def _ic_diag(l_row_below: np.ndarray, a_jj: complex, j: int) -> complex:
    val = a_jj - np.dot(l_row_below, l_row_below)
    piv = np.sqrt(np.complex128(val))        # principal branch
    if piv == 0:
        raise FactorBreakdownError(f"zero pivot in column {j}")
    return piv


def _ic_offdiag(l_vals_i, l_cols_i, pos, scratch, a_ij, l_jj):
    s = np.dot(l_vals_i[:pos], scratch[l_cols_i[:pos]])
    return (a_ij - s) / l_jj


def _column_updates(pat_cols, row_start: int):
    """For each column j: the (row, position) pairs of off-diagonal work."""
    updates: dict[int, list] = {}
    for li, cols in enumerate(pat_cols):
        i = row_start + li
        for pos, j in enumerate(cols[:-1].tolist()):
            updates.setdefault(j, []).append((i, pos))
    return updates


def _factor_from_rows(n, row_start, row_end, pat_cols, l_vals,
                      block_local=False) -> CholeskyFactor:
    nrows = row_end - row_start
    indptr = np.zeros(nrows + 1, dtype=np.int64)
    for li in range(nrows):
        indptr[li + 1] = indptr[li] + len(pat_cols[li])
    indices = np.concatenate(pat_cols) if nrows else np.empty(0, np.int64)
    data = np.concatenate(l_vals) if nrows else np.empty(0, np.complex128)
    return CholeskyFactor(n=n, row_start=row_start, row_end=row_end,
                          indptr=indptr, indices=indices.astype(np.int64),
                          data=data.astype(np.complex128),
                          block_local=block_local)


def build_bicp(a: RedundantRows, partition: RowPartition,
               rank: int) -> CholeskyFactor:
    """Block incomplete Cholesky: only entries with both row and column
    owned by this rank are factored; no communication.  With one rank
    this is exactly the classical ICP factor."""
    lo, hi = partition.dof_range(rank)
    pat_cols, pat_avals = _lower_pattern(a, (lo, hi), col_min=lo)
    l_vals = [np.zeros(len(c), dtype=np.complex128) for c in pat_cols]
    updates = _column_updates(pat_cols, lo)
    scratch = np.zeros(a.n, dtype=np.complex128)
    for j in range(lo, hi):
        lj = j - lo
        piv = _ic_diag(l_vals[lj][:-1], pat_avals[lj][-1], j)
        l_vals[lj][-1] = piv
        cols_j = pat_cols[lj]
        scratch[cols_j] = l_vals[lj]
        for i, pos in updates.get(j, ()):
            li = i - lo
            l_vals[li][pos] = _ic_offdiag(l_vals[li], pat_cols[li], pos,
                                          scratch, pat_avals[li][pos], piv)
        scratch[cols_j] = 0.0
    return _factor_from_rows(a.n, lo, hi, pat_cols, l_vals,
                             block_local=partition.ranks > 1)


def build_icp(a: RedundantRows, partition: RowPartition, rank: int,
              fabric: CommFabric) -> CholeskyFactor:
    """Column-parallel zero-fill incomplete Cholesky.

    Column j's off-diagonal entries are computed by the owners of the
    rows below once the pivot of column j is known; the owner of row j
    ships that row over the fabric when other ranks need it.  One
    barrier closes every pipeline step (n columns + final insertion).
    On a dense pattern the result is the complete Cholesky factor.
    """
    n = a.n
    lo, hi = partition.dof_range(rank)
    pat_cols, pat_avals = _lower_pattern(a, (lo, hi), col_min=0)
    l_vals = [np.zeros(len(c), dtype=np.complex128) for c in pat_cols]
    updates = _column_updates(pat_cols, lo)
    scratch = np.zeros(n, dtype=np.complex128)

    def owner(dof):
        return partition.owner_of_dof(dof)

    def needed_by(j):
        """Ranks owning rows below the diagonal of column j."""
        rows_below = a.column(j)[0]
        rows_below = rows_below[rows_below > j]
        return sorted({owner(int(i)) for i in rows_below})

    def publish_row(j):
        lj = j - lo
        row = (pat_cols[lj], l_vals[lj])
        for q in needed_by(j):
            if q != rank:
                fabric.send(rank, q, row)
        return row

    pending = None                      # row j-1 of L, if this rank needs it
    for j in range(n):
        # Pipeline step j: finish column j-1, then compute pivot j.
        if j > 0:
            prev = j - 1
            if prev in updates:
                if pending is None:
                    pending = fabric.recv(rank, owner(prev))
                cols_p, vals_p = pending
                scratch[cols_p] = vals_p
                piv_prev = vals_p[-1]
                for i, pos in updates[prev]:
                    li = i - lo
                    l_vals[li][pos] = _ic_offdiag(
                        l_vals[li], pat_cols[li], pos, scratch,
                        pat_avals[li][pos], piv_prev)
                scratch[cols_p] = 0.0
            pending = None
        if lo <= j < hi:
            lj = j - lo
            l_vals[lj][-1] = _ic_diag(l_vals[lj][:-1], pat_avals[lj][-1], j)
            row_j = publish_row(j)
            if j + 1 < n and j in updates:
                pending = row_j
        elif j + 1 <= n and j in updates:
            pending = None              # will be received at the next step
        fabric.barrier(rank)
    # Final insertion step: assemble the full factor (and its column
    # twin) on every rank.
    gathered = fabric.allgather_object(rank, (lo, hi, pat_cols, l_vals))
    all_cols: list = []
    all_vals: list = []
    for glo, ghi, cols, vals in gathered:
        all_cols.extend(cols)
        all_vals.extend(vals)
    return _factor_from_rows(n, 0, n, all_cols, all_vals, block_local=False)


# ---------------------------------------------------------------------------
# Triangular solves
# ---------------------------------------------------------------------------

def _forward_row(factor: CholeskyFactor, i: int, b: np.ndarray,
                 y: np.ndarray) -> complex:
    cols, vals = factor.row(i)
    piv = vals[-1]
    if piv == 0:
        raise FactorBreakdownError(f"zero pivot in row {i} during forward solve")
    return (b[i] - np.dot(vals[:-1], y[cols[:-1]])) / piv


def _back_row(factor: CholeskyFactor, i: int, y: np.ndarray,
              x: np.ndarray) -> complex:
    rows_below, vals = factor.column_below(i)
    piv = factor.diag(i)
    if piv == 0:
        raise FactorBreakdownError(f"zero pivot in row {i} during back solve")
    return (y[i] - np.dot(vals, x[rows_below])) / piv


def forward_back_substitute(factor: CholeskyFactor, b: np.ndarray,
                            partition: RowPartition, rank: int,
                            fabric: CommFabric,
                            concat: str = "spmd") -> np.ndarray:
    """Solve L L^T x = b.

    Full factors are solved in pipelined fashion: each rank computes its
    contiguous segment and broadcasts it so the next segment can start
    (P(P-1) messages per triangular solve).  Block-local factors solve
    independently and merge with one concatenation per triangular solve.
    """
    n = factor.n
    if factor.block_local:
        lo, hi = factor.row_start, factor.row_end
        concat_fn = CONCAT_STRATEGIES[concat]
        y = np.zeros(n, dtype=np.complex128)
        for i in range(lo, hi):
            y[i] = _forward_row(factor, i, b, y)
        y = concat_fn(fabric, rank,
                      SparseVector.from_segment(lo, y[lo:hi], n))
        x = np.zeros(n, dtype=np.complex128)
        for i in range(hi - 1, lo - 1, -1):
            x[i] = _back_row(factor, i, y, x)
        return concat_fn(fabric, rank,
                         SparseVector.from_segment(lo, x[lo:hi], n))

    P = fabric.ranks
    y = np.zeros(n, dtype=np.complex128)
    for seg in range(P):
        slo, shi = partition.dof_range(seg)
        if seg == rank:
            for i in range(slo, shi):
                y[i] = _forward_row(factor, i, b, y)
            if P > 1:
                fabric.broadcast(rank,
                                 SparseVector.from_segment(slo, y[slo:shi], n))
        else:
            sv = fabric.recv(rank, seg)
            y[sv.indices] = sv.values
    x = np.zeros(n, dtype=np.complex128)
    for seg in range(P - 1, -1, -1):
        slo, shi = partition.dof_range(seg)
        if seg == rank:
            for i in range(shi - 1, slo - 1, -1):
                x[i] = _back_row(factor, i, y, x)
            if P > 1:
                fabric.broadcast(rank,
                                 SparseVector.from_segment(slo, x[slo:shi], n))
        else:
            sv = fabric.recv(rank, seg)
            x[sv.indices] = sv.values
    return x


# ---------------------------------------------------------------------------
# Conjugate gradient (complex symmetric variant)
# ---------------------------------------------------------------------------

def _apply_preconditioner(precond: Preconditioner, r: np.ndarray,
                          partition: RowPartition, rank: int,
                          fabric: CommFabric, concat: str) -> np.ndarray:
    if precond.kind == "dp":
        return precond.inv_diag * r
    return forward_back_substitute(precond.factor, r, partition, rank,
                                   fabric, concat=concat)


def cg_solve(a, b: np.ndarray, precond: Preconditioner,
             partition: RowPartition, rank: int, fabric: CommFabric,
             concat: str = "spmd", tol: float = 1e-6,
             max_iter: int | None = None):
    """Preconditioned conjugate gradient with the unconjugated bilinear
    form, suitable for the complex symmetric systems assembled here.

    Every rank keeps a full (replicated) copy of all vectors, so scalar
    reductions are message-free; the only per-iteration traffic is the
    concatenation of the partial matrix-vector product (plus the
    preconditioner's triangular-solve traffic).  Returns ``(x, report)``;
    a vanishing bilinear form sets ``report.breakdown`` and stops, which
    is reported distinctly from plain non-convergence.
    """
    n = len(b)
    if max_iter is None:
        max_iter = 10 * n
    concat_fn = CONCAT_STRATEGIES[concat]
    fabric.set_phase(rank, "solve-iteration")

    x = np.zeros(n, dtype=np.complex128)
    r = b.astype(np.complex128).copy()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        report = SolveReport(
            iterations=0, residual_history=[0.0], converged=True,
            breakdown=False, preconditioner=precond.kind, strategy=concat,
            ranks=fabric.ranks, tol=tol, matrix_bytes=a.value_bytes(),
            precond_bytes=precond.memory_bytes(), true_residual=0.0)
        return x, report

    z = _apply_preconditioner(precond, r, partition, rank, fabric, concat)
    p = z.copy()
    rho = np.dot(r, z)
    history = [float(np.linalg.norm(r)) / bnorm]
    converged = False
    breakdown = False
    iterations = 0
    for _ in range(max_iter):
        partial = spmv_partial(a, partition, rank, p)
        q = concat_fn(fabric, rank, partial)
        denom = np.dot(p, q)
        if denom == 0:
            breakdown = True
            break
        alpha = rho / denom
        x = x + alpha * p
        r = r - alpha * q
        iterations += 1
        rel = float(np.linalg.norm(r)) / bnorm
        history.append(rel)
        if rel <= tol:
            converged = True
            break
        z = _apply_preconditioner(precond, r, partition, rank, fabric, concat)
        rho_new = np.dot(r, z)
        if rho_new == 0:
            breakdown = True
            break
        p = z + (rho_new / rho) * p
        rho = rho_new

    true_res = float(np.linalg.norm(b - full_matvec(a, x))) / bnorm
    report = SolveReport(
        iterations=iterations, residual_history=history,
        converged=converged, breakdown=breakdown,
        preconditioner=precond.kind, strategy=concat, ranks=fabric.ranks,
        tol=tol, matrix_bytes=a.value_bytes(),
        precond_bytes=precond.memory_bytes(), true_residual=true_res)
    return x, report
