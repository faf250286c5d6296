"""Shared oracles and helpers for the test suite.

The oracles here are deliberately independent of the package
implementation: element integrals come from closed-form tensor products
of 1D linear-element matrices, global assembly from a dense
element-by-element scatter, and the incomplete factorization from a
dense zero-fill loop.
"""
from __future__ import annotations

import numpy as np
import pytest

from hexwave.mesh import HEX_CORNERS, HEX_FACES, FacetKind


# ---------------------------------------------------------------------------
# Closed-form 1D linear element matrices on [0, h]
# ---------------------------------------------------------------------------

def mass_1d(h: float) -> np.ndarray:
    return h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])


def stiffness_1d(h: float) -> np.ndarray:
    return 1.0 / h * np.array([[1.0, -1.0], [-1.0, 1.0]])


def deriv_1d() -> np.ndarray:
    """d[i, j] = integral of Ni' * Nj over [0, h] (h-independent)."""
    return np.array([[-0.5, -0.5], [0.5, 0.5]])


def grad_product_3d(h: float, i: int, j: int) -> np.ndarray:
    """(8, 8) closed-form integral of dNa/dx_i * dNb/dx_j on an h-cube."""
    out = np.zeros((8, 8))
    m, s, d = mass_1d(h), stiffness_1d(h), deriv_1d()
    for a in range(8):
        for b in range(8):
            val = 1.0
            for ax in range(3):
                ia, ib = HEX_CORNERS[a][ax], HEX_CORNERS[b][ax]
                if i == ax and j == ax:
                    val *= s[ia, ib]
                elif i == ax:
                    val *= d[ia, ib]
                elif j == ax:
                    val *= d[ib, ia]
                else:
                    val *= m[ia, ib]
            out[a, b] = val
    return out


def mass_3d(h: float) -> np.ndarray:
    out = np.zeros((8, 8))
    m = mass_1d(h)
    for a in range(8):
        for b in range(8):
            val = 1.0
            for ax in range(3):
                val *= m[HEX_CORNERS[a][ax], HEX_CORNERS[b][ax]]
            out[a, b] = val
    return out


def curl_block_oracle(h: float, eps_r: complex) -> np.ndarray:
    """(24, 24) closed-form curl-curl block on an h-cube."""
    out = np.zeros((8, 3, 8, 3), dtype=np.complex128)
    gsum = sum(grad_product_3d(h, m, m) for m in range(3))
    for i in range(3):
        out[:, i, :, i] += gsum
        for j in range(3):
            out[:, i, :, j] -= grad_product_3d(h, j, i)
    return out.reshape(24, 24) / eps_r


def mass_block_oracle(h: float, mu_r: complex, k0: float) -> np.ndarray:
    out = np.zeros((8, 3, 8, 3), dtype=np.complex128)
    m = mass_3d(h)
    for i in range(3):
        out[:, i, :, i] = k0 ** 2 * mu_r * m
    return out.reshape(24, 24)


def penalty_block_oracle(h: float) -> np.ndarray:
    out = np.zeros((8, 3, 8, 3), dtype=np.complex128)
    for i in range(3):
        for j in range(3):
            out[:, i, :, j] = grad_product_3d(h, i, j)
    return out.reshape(24, 24)


def surface_mass_oracle(h: float) -> np.ndarray:
    """(4, 4) bilinear surface mass on an h-square (tensor of 1D mass)."""
    m = mass_1d(h)
    quad = np.array([(0, 0), (1, 0), (1, 1), (0, 1)])
    out = np.zeros((4, 4))
    for a in range(4):
        for b in range(4):
            out[a, b] = m[quad[a][0], quad[b][0]] * m[quad[a][1], quad[b][1]]
    return out


def surface_stiffness_oracle(h: float) -> np.ndarray:
    m, s = mass_1d(h), stiffness_1d(h)
    quad = np.array([(0, 0), (1, 0), (1, 1), (0, 1)])
    out = np.zeros((4, 4))
    for a in range(4):
        for b in range(4):
            out[a, b] = (s[quad[a][0], quad[b][0]] * m[quad[a][1], quad[b][1]]
                         + m[quad[a][0], quad[b][0]] * s[quad[a][1], quad[b][1]])
    return out


# ---------------------------------------------------------------------------
# Dense element-loop assembly oracle
# ---------------------------------------------------------------------------

def element_loop_assemble(mesh, params, config) -> np.ndarray:
    """Dense global matrix built element by element, then facet by facet.

    Independent traversal order from the per-node assembly under test;
    uses the same local integrals, so agreement is up to summation
    rounding only.
    """
    from hexwave.assembly import (abc_facet_matrices, element_matrices,
                                  penalty_surface_matrix)
    n = 3 * mesh.node_count
    a = np.zeros((n, n), dtype=np.complex128)
    for e, conn in enumerate(mesh.elements):
        eps, mu = params.element_values(e)
        em = element_matrices(mesh.nodes[conn] - mesh.nodes[conn].min(axis=0),
                              eps, mu, params.k0, config.quadrature)
        blk = em.curl_curl - em.mass + config.penalty_weight * em.penalty
        dofs = (3 * conn[:, None] + np.arange(3)).ravel()
        a[np.ix_(dofs, dofs)] += blk
    for facet in mesh.facets:
        if facet.kind is not FacetKind.EXTERIOR:
            continue
        coords = mesh.nodes[list(facet.nodes)]
        am = abc_facet_matrices(coords - coords.min(axis=0), facet.normal,
                                params.k0, config.quadrature)
        fdofs = (3 * np.asarray(facet.nodes)[:, None] + np.arange(3)).ravel()
        a[np.ix_(fdofs, fdofs)] += am.first_order + am.second_order
        if config.penalty_surface:
            conn = mesh.elements[facet.element]
            lf = [i for i, loc in enumerate(HEX_FACES)
                  if tuple(conn[loc]) == facet.nodes][0]
            ecoords = mesh.nodes[conn]
            off = ecoords.min(axis=0)
            blk = config.penalty_weight * penalty_surface_matrix(
                coords - off, ecoords - off, HEX_FACES[lf], facet.normal,
                config.quadrature)
            edofs = (3 * conn[:, None] + np.arange(3)).ravel()
            a[np.ix_(fdofs, edofs)] += blk
    return a


def rows_to_dense(rows, n: int) -> np.ndarray:
    a = np.zeros((n, n), dtype=np.complex128)
    for i, (cols, vals) in enumerate(rows):
        a[i, cols] = vals
    return a


# ---------------------------------------------------------------------------
# Dense zero-fill incomplete Cholesky oracle
# ---------------------------------------------------------------------------

def dense_ic_oracle(a: np.ndarray, pattern: np.ndarray | None = None) -> np.ndarray:
    """Zero-fill IC on the lower pattern of a dense complex symmetric
    matrix.  By default the pattern is the value-nonzero lower triangle;
    pass an explicit boolean mask to keep stored-zero positions."""
    n = a.shape[0]
    if pattern is None:
        pattern = (np.tril(a) != 0)
    lo = np.zeros((n, n), dtype=np.complex128)
    for j in range(n):
        s = a[j, j] - np.dot(lo[j, :j], lo[j, :j])
        lo[j, j] = np.sqrt(np.complex128(s))
        for i in range(j + 1, n):
            if pattern[i, j]:
                s = a[i, j] - np.dot(lo[i, :j], lo[j, :j])
                lo[i, j] = s / lo[j, j]
    return lo


@pytest.fixture
def rng():
    return np.random.default_rng(20260823)


def random_symmetric_sparse(rng, n: int, density: float = 0.3,
                            diag_boost: float = 8.0):
    """Random complex symmetric matrix rows with a guaranteed diagonal."""
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    mask = rng.random((n, n)) < density
    a = np.where(mask, a, 0)
    a = a + a.T
    a[np.arange(n), np.arange(n)] += diag_boost
    rows = []
    for i in range(n):
        cols = np.nonzero(a[i])[0]
        rows.append((cols.astype(np.int64), a[i, cols]))
    return rows, a
