"""Element integrals, boundary terms, RHS, constraints, symmetrization."""
from __future__ import annotations

import numpy as np
import pytest

from hexwave.assembly import (AssemblyConfig, AssemblyError, MaterialParams,
                              PlaneWave, abc_facet_matrices,
                              abc_incident_load, apply_symmetry_bc,
                              assemble_rhs, assemble_rows, constrained_dofs,
                              element_matrices, incident_field, symmetrize)
from hexwave.fabric import CommFabric, run_spmd
from hexwave.mesh import (HEX_CORNERS, ScattererSpec, build_box_mesh,
                          classify_boundary, embed_pec_scatterer)
from hexwave.sparse import partition_rows

from conftest import (curl_block_oracle, element_loop_assemble,
                      mass_block_oracle, penalty_block_oracle, rows_to_dense,
                      surface_mass_oracle, surface_stiffness_oracle)


# -- element integrals vs closed-form tensor-product oracles -----------------

@pytest.mark.parametrize("h", [1.0, 0.1])
@pytest.mark.parametrize("eps_mu", [(1.0, 1.0), (2.0 - 0.5j, 1.5 + 0.25j)])
def test_element_blocks_match_closed_form(h, eps_mu):
    eps, mu = eps_mu
    coords = h * HEX_CORNERS.astype(float)
    k0 = 2.0 * np.pi
    em = element_matrices(coords, eps, mu, k0)
    np.testing.assert_allclose(em.curl_curl, curl_block_oracle(h, eps),
                               rtol=1e-12, atol=1e-13 / h)
    np.testing.assert_allclose(em.mass, mass_block_oracle(h, mu, k0),
                               rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(em.penalty, penalty_block_oracle(h),
                               rtol=1e-12, atol=1e-13 / h)


def test_element_blocks_symmetric():
    em = element_matrices(0.2 * HEX_CORNERS.astype(float), 1.0, 1.0, 2 * np.pi)
    for blk in (em.curl_curl, em.mass, em.penalty):
        np.testing.assert_allclose(blk, blk.T, atol=1e-14)


def test_degenerate_element_rejected():
    coords = HEX_CORNERS.astype(float)
    coords[6] = coords[0]        # collapse a corner
    with pytest.raises(AssemblyError, match="Jacobian"):
        element_matrices(coords, 1.0, 1.0, 1.0)


def test_curl_block_annihilates_constant_field():
    """curl and divergence of a constant vector field are zero."""
    em = element_matrices(0.3 * HEX_CORNERS.astype(float), 1.0, 1.0, 1.0)
    const = np.tile(np.array([1.0, 2.0, -0.5]), 8)
    np.testing.assert_allclose(em.curl_curl @ const, 0.0, atol=1e-13)
    np.testing.assert_allclose(em.penalty @ const, 0.0, atol=1e-13)


# -- absorbing-boundary facet blocks -----------------------------------------

def test_abc_first_order_unit_facet_entries():
    """k0 = 1, unit facet: j * surface mass with entries {1/9, 1/18, 1/36}."""
    coords = np.array([(0., 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)])
    am = abc_facet_matrices(coords, np.array([0., 0, 1]), k0=1.0)
    ms = surface_mass_oracle(1.0)
    assert ms[0, 0] == pytest.approx(1 / 9)
    assert ms[0, 1] == pytest.approx(1 / 18)
    assert ms[0, 2] == pytest.approx(1 / 36)
    for c in (0, 1):        # tangential components
        idx = 3 * np.arange(4) + c
        np.testing.assert_allclose(am.first_order[np.ix_(idx, idx)], 1j * ms,
                                   rtol=1e-13)
    nidx = 3 * np.arange(4) + 2
    assert np.all(am.first_order[nidx, :] == 0)
    assert np.all(am.first_order[:, nidx] == 0)


def test_abc_second_order_unit_facet_vs_oracle():
    coords = np.array([(0., 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)])
    k0 = 3.0
    am = abc_facet_matrices(coords, np.array([0., 0, 1]), k0=k0)
    ks = surface_stiffness_oracle(1.0)
    idx = 3 * np.arange(4)
    np.testing.assert_allclose(am.second_order[np.ix_(idx, idx)],
                               1j / (2 * k0) * ks, rtol=1e-13)


def test_abc_stiffness_acts_as_second_difference_on_quadratic():
    """The assembled facet stiffness applied to the interpolant of
    f = u^2 + v^2 reproduces -integral(N * lap f) = -4 h^2 on interior
    nodes, i.e. the finite-difference second difference, exactly for
    this quadratic."""
    h = 0.25
    m = 5                      # 5x5 node patch in the z=0 plane
    k0 = 1.0
    K = np.zeros((m * m, m * m))
    for j in range(m - 1):
        for i in range(m - 1):
            quad = [i + m * j, i + 1 + m * j, i + 1 + m * (j + 1),
                    i + m * (j + 1)]
            coords = np.array([(h * (i + di), h * (j + dj), 0.0)
                               for di, dj in [(0, 0), (1, 0), (1, 1), (0, 1)]])
            am = abc_facet_matrices(coords, np.array([0., 0, 1]), k0=k0)
            # x-component rows carry the plain surface stiffness
            idx = 3 * np.arange(4)
            blk = (am.second_order[np.ix_(idx, idx)] / (1j / (2 * k0))).real
            K[np.ix_(quad, quad)] += blk
    uv = np.array([(h * (n % m), h * (n // m)) for n in range(m * m)])
    f = uv[:, 0] ** 2 + uv[:, 1] ** 2
    kf = K @ f
    for j in range(1, m - 1):
        for i in range(1, m - 1):
            assert kf[i + m * j] == pytest.approx(-4 * h * h, rel=1e-12)


def test_abc_facet_must_be_planar():
    coords = np.array([(0., 0, 0), (1, 0, 0), (1, 1, 0.5), (0, 1, 0)])
    with pytest.raises(AssemblyError):
        abc_facet_matrices(coords, np.array([0., 0, 1]), k0=1.0)


# -- incident field ----------------------------------------------------------

def _wave(direction=(1, 0, 0), polarization=(0, 1, 0), k0=2 * np.pi):
    return PlaneWave(direction=np.asarray(direction, float),
                     polarization=np.asarray(polarization, float), k0=k0)


def test_incident_field_divergence_free_fd():
    wave = _wave()
    p = np.array([0.21, 0.37, 0.49])
    eps = 1e-5
    div = 0.0
    for d in range(3):
        step = np.zeros(3)
        step[d] = eps
        div += (incident_field(wave, p + step)[0][d]
                - incident_field(wave, p - step)[0][d]) / (2 * eps)
    assert abs(div) < 1e-6


def test_incident_curl_matches_fd():
    wave = _wave(direction=(0, 0, 1), polarization=(1, 0, 0), k0=3.0)
    p = np.array([0.1, 0.2, 0.3])
    eps = 1e-6
    _, curl = incident_field(wave, p)
    fd = np.zeros(3, dtype=complex)
    for c in range(3):
        i, j = (c + 1) % 3, (c + 2) % 3
        si, sj = np.zeros(3), np.zeros(3)
        si[i] = eps
        sj[j] = eps
        fd[c] = ((incident_field(wave, p + si)[0][j]
                  - incident_field(wave, p - si)[0][j]) / (2 * eps)
                 - (incident_field(wave, p + sj)[0][i]
                    - incident_field(wave, p - sj)[0][i]) / (2 * eps))
    np.testing.assert_allclose(curl, fd, rtol=1e-6, atol=1e-8)


def test_incident_load_zero_on_exit_face():
    """Normal incidence, outward normal along propagation: the ABC load
    vanishes identically."""
    wave = _wave()
    for x in np.linspace(0, 1, 7):
        load = abc_incident_load(wave, np.array([1.0, x, 0.5]),
                                 np.array([1.0, 0, 0]))
        np.testing.assert_allclose(load, 0.0, atol=1e-14)


def test_incident_load_drives_entrance_face():
    wave = _wave()
    load = abc_incident_load(wave, np.array([0.0, 0.3, 0.5]),
                             np.array([-1.0, 0, 0]))
    assert np.linalg.norm(load) > 1.0


def test_plane_wave_validation():
    with pytest.raises(AssemblyError):
        PlaneWave(direction=np.array([1.0, 1.0, 0]),
                  polarization=np.array([0, 0, 1.0]), k0=1.0)
    with pytest.raises(AssemblyError):
        PlaneWave(direction=np.array([1.0, 0, 0]),
                  polarization=np.array([1.0, 0, 0]), k0=1.0)


# -- global assembly ---------------------------------------------------------

def _scatter_mesh(npw=5):
    mesh = build_box_mesh((1.0, 1.0, 1.0), npw)
    h = mesh.spacing
    return embed_pec_scatterer(mesh, ScattererSpec(
        corner_min=(h, h, h), corner_max=(2 * h, 2 * h, 2 * h)))


@pytest.mark.parametrize("npw", [3, 4, 5])
def test_dof_assembly_equals_element_loop(npw):
    mesh = _scatter_mesh(npw) if npw == 5 else build_box_mesh((1.,) * 3, npw)
    params = MaterialParams(k0=2 * np.pi)
    config = AssemblyConfig()
    rows = assemble_rows(mesh, params, (0, mesh.node_count), config)
    got = rows_to_dense(rows, 3 * mesh.node_count)
    ref = element_loop_assemble(mesh, params, config)
    scale = np.abs(ref).max()
    assert np.abs(got - ref).max() / scale < 1e-12


def test_assembly_partition_invariant_bitwise():
    mesh = _scatter_mesh()
    params = MaterialParams(k0=2 * np.pi)
    config = AssemblyConfig()
    full = assemble_rows(mesh, params, (0, mesh.node_count), config)
    part = partition_rows(mesh.node_count, 3)
    split = []
    for r in range(3):
        split.extend(assemble_rows(mesh, params, part.node_range(r), config))
    assert len(full) == len(split)
    for (ca, va), (cb, vb) in zip(full, split):
        assert np.array_equal(ca, cb)
        assert np.array_equal(va, vb)


def test_rhs_segments_concatenate(npw=4):
    mesh = build_box_mesh((1.,) * 3, npw)
    wave = _wave()
    full = assemble_rhs(mesh, wave, (0, mesh.node_count))
    part = partition_rows(mesh.node_count, 3)
    split = np.concatenate([assemble_rhs(mesh, wave, part.node_range(r))
                            for r in range(3)])
    np.testing.assert_array_equal(full, split)


def test_rhs_zero_on_pec_only_nodes():
    """Nodes whose facets are all PEC receive no load."""
    mesh = _scatter_mesh()
    wave = _wave()
    b = assemble_rhs(mesh, wave, (0, mesh.node_count))
    pec_nodes = set()
    ext_nodes = set()
    from hexwave.mesh import FacetKind
    for f in mesh.facets:
        target = pec_nodes if f.kind is FacetKind.PEC else ext_nodes
        target.update(f.nodes)
    for n in pec_nodes - ext_nodes:
        np.testing.assert_array_equal(b[3 * n:3 * n + 3], 0.0)


def test_normal_incidence_rhs_lives_on_entrance_face():
    mesh = build_box_mesh((1.,) * 3, 4)
    wave = _wave()          # propagates along +x
    b = assemble_rhs(mesh, wave, (0, mesh.node_count)).reshape(-1, 3)
    hi = mesh.bounding_box[1]
    for n in range(mesh.node_count):
        x = mesh.nodes[n]
        interior = np.all(x > 0) and np.all(x < hi - 1e-12)
        if interior:
            np.testing.assert_allclose(b[n], 0.0, atol=1e-14)
    exit_only = [n for n in range(mesh.node_count)
                 if mesh.nodes[n][0] > hi[0] - 1e-12
                 and 0 < mesh.nodes[n][1] < hi[1]
                 and 0 < mesh.nodes[n][2] < hi[2]]
    for n in exit_only:
        np.testing.assert_allclose(b[n], 0.0, atol=1e-13)
    entrance = [n for n in range(mesh.node_count) if mesh.nodes[n][0] == 0]
    assert max(np.abs(b[n]).max() for n in entrance) > 1e-2


# -- symmetry constraints ----------------------------------------------------

def test_constrained_dofs_symmetry_normal_component():
    mesh = classify_boundary(build_box_mesh((1.,) * 3, 3),
                             [("z+", "symmetry")])
    dofs = constrained_dofs(mesh)
    top = [n for n in range(27) if mesh.nodes[n][2] == mesh.nodes[:, 2].max()]
    assert sorted(dofs) == sorted(3 * n + 2 for n in top)


def test_constrained_dofs_antisymmetry_tangential_components():
    mesh = classify_boundary(build_box_mesh((1.,) * 3, 3),
                             [("x", "antisymmetry")])
    dofs = set(constrained_dofs(mesh).tolist())
    face = [n for n in range(27) if mesh.nodes[n][0] == 0]
    expect = set()
    for n in face:
        expect.update((3 * n + 1, 3 * n + 2))
    assert dofs == expect


def test_conflicting_plane_kinds_rejected():
    mesh = classify_boundary(build_box_mesh((1.,) * 3, 3),
                             [("z-", "symmetry"), ("z+", "antisymmetry")])
    # Same axis, different kinds, but disjoint faces: allowed.
    constrained_dofs(mesh)


def _assembled(mesh, ranks=1):
    params = MaterialParams(k0=2 * np.pi)
    part = partition_rows(mesh.node_count, ranks)
    fab = CommFabric(ranks)

    def fn(f, r):
        rows = assemble_rows(mesh, params, part.node_range(r))
        rhs = assemble_rhs(mesh, _wave(), part.node_range(r))
        return rows, rhs

    out = run_spmd(ranks, fn, fabric=fab)
    return out, part, fab


def test_apply_symmetry_bc_identity_rows_and_columns():
    mesh = classify_boundary(build_box_mesh((1.,) * 3, 3),
                             [("z+", "symmetry")])
    (rows_rhs,), part, fab = _assembled(mesh)
    rows, rhs = rows_rhs
    apply_symmetry_bc(rows, rhs, mesh, part, 0)
    dense = rows_to_dense(rows, 81)
    for dof in constrained_dofs(mesh):
        expect = np.zeros(81)
        expect[dof] = 1.0
        np.testing.assert_array_equal(dense[dof], expect)
        col = dense[:, dof].copy()
        col[dof] = 0.0
        np.testing.assert_array_equal(col, 0.0)
        assert rhs[dof] == 0.0


def test_apply_symmetry_bc_idempotent():
    mesh = classify_boundary(build_box_mesh((1.,) * 3, 3),
                             [("y", "antisymmetry")])
    (rows_rhs,), part, fab = _assembled(mesh)
    rows, rhs = rows_rhs
    apply_symmetry_bc(rows, rhs, mesh, part, 0)
    once = rows_to_dense([r for r in rows], 81).copy()
    rhs_once = rhs.copy()
    apply_symmetry_bc(rows, rhs, mesh, part, 0)
    np.testing.assert_array_equal(rows_to_dense(rows, 81), once)
    np.testing.assert_array_equal(rhs, rhs_once)


def test_apply_symmetry_bc_parallel_matches_serial():
    mesh = classify_boundary(build_box_mesh((1.,) * 3, 3),
                             [("z+", "symmetry"), ("x", "antisymmetry")])
    out1, part1, _ = _assembled(mesh, ranks=1)
    rows1, rhs1 = out1[0]
    apply_symmetry_bc(rows1, rhs1, mesh, part1, 0)

    out3, part3, fab3 = _assembled(mesh, ranks=3)

    def fn(f, r):
        rows, rhs = out3[r]
        apply_symmetry_bc(rows, rhs, mesh, part3, r, fabric=f)
        return rows, rhs

    res = run_spmd(3, fn, fabric=fab3)
    rows3 = [row for rows, _ in res for row in rows]
    rhs3 = np.concatenate([rhs for _, rhs in res])
    np.testing.assert_array_equal(rows_to_dense(rows3, 81),
                                  rows_to_dense(rows1, 81))
    np.testing.assert_array_equal(rhs3, rhs1)
    assert fab3.phase_totals("bc").messages == 6     # broadcast per rank


# -- symmetrization ----------------------------------------------------------

def test_symmetrize_equals_a_plus_at_and_doubles_rhs():
    mesh = _scatter_mesh(4)
    (rows_rhs,), part, fab = _assembled(mesh)
    rows, rhs = rows_rhs
    before = rows_to_dense([r for r in rows], 3 * mesh.node_count).copy()
    rhs_before = rhs.copy()
    symmetrize(rows, rhs, part, 0)
    after = rows_to_dense(rows, 3 * mesh.node_count)
    np.testing.assert_allclose(after, before + before.T, rtol=1e-15, atol=0)
    np.testing.assert_array_equal(rhs, 2.0 * rhs_before)


def test_symmetrize_exactly_symmetric():
    mesh = _scatter_mesh(4)
    (rows_rhs,), part, fab = _assembled(mesh)
    rows, rhs = rows_rhs
    symmetrize(rows, rhs, part, 0)
    dense = rows_to_dense(rows, 3 * mesh.node_count)
    assert np.abs(dense - dense.T).max() == 0.0


def test_symmetrize_parallel_matches_serial_bitwise():
    mesh = build_box_mesh((1.,) * 3, 4)
    out1, part1, _ = _assembled(mesh, ranks=1)
    rows1, rhs1 = out1[0]
    symmetrize(rows1, rhs1, part1, 0)

    out4, part4, fab4 = _assembled(mesh, ranks=4)

    def fn(f, r):
        rows, rhs = out4[r]
        symmetrize(rows, rhs, part4, r, fabric=f)
        return rows, rhs

    res = run_spmd(4, fn, fabric=fab4)
    rows4 = [row for rows, _ in res for row in rows]
    for (ca, va), (cb, vb) in zip(rows1, rows4):
        assert np.array_equal(ca, cb)
        assert np.array_equal(va, vb)
    assert fab4.phase_totals("symmetrize").messages == 12


# -- half-domain symmetry-plane equivalence ----------------------------------

def test_symmetry_plane_reproduces_full_domain_solution():
    """A mirror-symmetric scenario solved on the half mesh with a
    symmetry plane matches the full-mesh solution on the shared nodes."""
    from hexwave.runner import Scenario, build_scenario_mesh, assemble_system

    def dense_solve(sc):
        mesh = build_scenario_mesh(sc)
        part = partition_rows(mesh.node_count, 1)
        a, b = assemble_system(sc, mesh, part, 0, CommFabric(1))
        return mesh, np.linalg.solve(a.to_dense(), b)

    npw = 4
    # Full mesh: 3x3x9 nodes (z = 0 .. 8h), mirror plane at z = 4h.
    # Half mesh: 3x3x5 nodes with a symmetry plane on its top face.
    full = Scenario(extent=(0.75, 0.75, 2.25), nodes_per_wavelength=npw)
    half = Scenario(extent=(0.75, 0.75, 1.25), nodes_per_wavelength=npw,
                    symmetry_planes=[("z+", "symmetry")])
    mesh_f, x_f = dense_solve(full)
    mesh_h, x_h = dense_solve(half)
    hf = x_f.reshape(-1, 3)
    hh = x_h.reshape(-1, 3)
    nx, nz = 3, 9
    scale = np.abs(hf).max()
    for k in range(nz):      # mirror antisymmetry of the full solution
        for nid in range(nx * nx):
            a = nid + nx * nx * k
            b = nid + nx * nx * (nz - 1 - k)
            np.testing.assert_allclose(hf[a][:2], hf[b][:2],
                                       atol=1e-9 * scale)
            np.testing.assert_allclose(hf[a][2], -hf[b][2],
                                       atol=1e-9 * scale)
    for k in range(5):       # half solution equals the restriction
        for nid in range(nx * nx):
            np.testing.assert_allclose(hh[nid + nx * nx * k],
                                       hf[nid + nx * nx * k],
                                       atol=1e-9 * scale)
