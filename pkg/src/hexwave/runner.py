"""Scenario configuration and the end-to-end pipeline.

A scenario (mesh geometry, incident wave, solver choices) is read from a
flat INI file or built directly; ``run_scenario`` executes the full
chain — mesh, assemble, constrain, symmetrize, precondition, solve —
across the simulated rank fabric and returns a machine-readable result.
"""
from __future__ import annotations

import configparser
import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import (AssemblyConfig, MaterialParams, PlaneWave,
                       apply_symmetry_bc, assemble_rhs, assemble_rows,
                       constrained_dofs, symmetrize)
from .fabric import CommFabric, run_spmd
from .mesh import (HexMesh, ScattererSpec, build_box_mesh, classify_boundary,
                   embed_pec_scatterer)
from .solver import (Preconditioner, SolveReport, build_bicp, build_dp,
                     build_icp, cg_solve)
from .sparse import (LowerSymmetricRows, RedundantRows, RowPartition,
                     partition_rows, to_redundant, write_matrix_market,
                     write_rhs)

SPEED_OF_LIGHT = 299_792_458.0    # m/s


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


@dataclass
class Scenario:
    extent: tuple[float, float, float] = (1.0, 1.0, 1.0)   # wavelengths
    nodes_per_wavelength: int = 10
    frequency: float = SPEED_OF_LIGHT                      # Hz -> 1 m wavelength
    scatterer: ScattererSpec | None = None
    symmetry_planes: list = field(default_factory=list)
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    polarization: tuple[float, float, float] = (0.0, 1.0, 0.0)
    eps_r: complex = 1.0
    mu_r: complex = 1.0
    ranks: int = 1
    preconditioner: str = "dp"
    concat: str = "spmd"
    storage: str = "2"             # "1" lower-triangle / "2" redundant
    tol: float = 1e-6
    max_iter: int | None = None
    penalty_weight: float = 1.0
    node_budget: int = 2_000_000
    seed: int = 0

    def __post_init__(self):
        if self.frequency <= 0:
            raise ConfigError("frequency must be positive")
        if self.preconditioner not in ("dp", "icp", "bicp"):
            raise ConfigError(f"unknown preconditioner {self.preconditioner!r}")
        if self.concat not in ("spmd", "ms"):
            raise ConfigError(f"unknown concat strategy {self.concat!r}")
        if str(self.storage) not in ("1", "2"):
            raise ConfigError(f"storage must be '1' or '2', got {self.storage!r}")
        self.storage = str(self.storage)
        if self.ranks < 1:
            raise ConfigError("ranks must be >= 1")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency

    @property
    def k0(self) -> float:
        return 2.0 * np.pi * self.frequency / SPEED_OF_LIGHT

    @classmethod
    def from_config(cls, path) -> "Scenario":
        cp = configparser.ConfigParser()
        read = cp.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        try:
            return cls._from_parser(cp)
        except (ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config {path}: {exc}") from exc

    @classmethod
    def _from_parser(cls, cp: configparser.ConfigParser) -> "Scenario":
        kw: dict = {}
        dom = cp["domain"] if cp.has_section("domain") else {}
        if "extent" in dom:
            kw["extent"] = tuple(float(v) for v in dom["extent"].split())
        if "nodes_per_wavelength" in dom:
            kw["nodes_per_wavelength"] = int(dom["nodes_per_wavelength"])
        if "frequency" in dom:
            kw["frequency"] = float(dom["frequency"])
        if "node_budget" in dom:
            kw["node_budget"] = int(dom["node_budget"])
        if cp.has_section("scatterer"):
            sc = cp["scatterer"]
            kw["scatterer"] = ScattererSpec(
                corner_min=tuple(float(v) for v in sc["corner_min"].split()),
                corner_max=tuple(float(v) for v in sc["corner_max"].split()))
        if cp.has_section("symmetry"):
            kw["symmetry_planes"] = [(face, kind) for face, kind
                                     in cp["symmetry"].items()]
        if cp.has_section("wave"):
            wv = cp["wave"]
            if "direction" in wv:
                kw["direction"] = tuple(float(v) for v in wv["direction"].split())
            if "polarization" in wv:
                kw["polarization"] = tuple(float(v)
                                           for v in wv["polarization"].split())
        if cp.has_section("material"):
            mt = cp["material"]
            if "eps_r" in mt:
                kw["eps_r"] = complex(mt["eps_r"])
            if "mu_r" in mt:
                kw["mu_r"] = complex(mt["mu_r"])
        if cp.has_section("solver"):
            sv = cp["solver"]
            for name, conv in (("ranks", int), ("preconditioner", str),
                               ("concat", str), ("storage", str),
                               ("tol", float), ("max_iter", int),
                               ("penalty_weight", float), ("seed", int)):
                if name in sv:
                    kw[name] = conv(sv[name])
        return cls(**kw)


@dataclass
class RunResult:
    report: SolveReport
    solution: np.ndarray
    node_count: int
    element_count: int
    complex_unknowns: int          # 3 per node
    dof_count: int                 # 6 per node (real-pair accounting)
    matrix_bytes: int
    precond_total_bytes: int
    probes: list = field(default_factory=list)
    wall_time: float = 0.0
    seed: int = 0

    def as_dict(self) -> dict:
        d = self.report.as_dict()
        d.update({
            "node_count": self.node_count,
            "element_count": self.element_count,
            "complex_unknowns": self.complex_unknowns,
            "dof_count": self.dof_count,
            "matrix_bytes": self.matrix_bytes,
            "precond_total_bytes": self.precond_total_bytes,
            "probes": self.probes,
            "wall_time": self.wall_time,
            "seed": self.seed,
        })
        return d


def build_scenario_mesh(scenario: Scenario) -> HexMesh:
    mesh = build_box_mesh(scenario.extent, scenario.nodes_per_wavelength,
                          wavelength=scenario.wavelength,
                          node_budget=scenario.node_budget)
    mesh = embed_pec_scatterer(mesh, scenario.scatterer)
    return classify_boundary(mesh, scenario.symmetry_planes)


def assemble_system(scenario: Scenario, mesh: HexMesh,
                    partition: RowPartition, rank: int,
                    fabric: CommFabric):
    """Assemble, constrain and symmetrize this rank's rows, then share
    all rows so every rank holds the identical global system.

    The row exchange at the end models each rank's replicated copy of
    the final system; it is simulation plumbing, not counted algorithm
    traffic (assembly itself is message-free, and the constraint and
    symmetrization messages are counted in their own phases).
    """
    params = MaterialParams(eps_r=scenario.eps_r, mu_r=scenario.mu_r,
                            k0=scenario.k0)
    wave = PlaneWave(direction=scenario.direction,
                     polarization=scenario.polarization, k0=scenario.k0)
    config = AssemblyConfig(penalty_weight=scenario.penalty_weight)
    node_range = partition.node_range(rank)
    fabric.set_phase(rank, "assemble")
    rows = assemble_rows(mesh, params, node_range, config)
    rhs_seg = assemble_rhs(mesh, wave, node_range, config)
    apply_symmetry_bc(rows, rhs_seg, mesh, partition, rank, fabric=fabric)
    symmetrize(rows, rhs_seg, partition, rank, fabric=fabric)
    gathered = fabric.allgather_object(rank, (rows, rhs_seg))
    all_rows: list = []
    b_parts: list = []
    for rrows, rseg in gathered:
        all_rows.extend(rrows)
        b_parts.append(rseg)
    b = np.concatenate(b_parts)
    n = 3 * mesh.node_count
    if scenario.storage == "1":
        matrix = LowerSymmetricRows.from_symmetric_rows(all_rows, n)
    else:
        matrix = RedundantRows.from_rows(all_rows, n)
    return matrix, b


def build_preconditioner(scenario: Scenario, matrix, partition: RowPartition,
                         rank: int, fabric: CommFabric) -> Preconditioner:
    fabric.set_phase(rank, "precond-build")
    if scenario.preconditioner == "dp":
        return build_dp(matrix)
    redundant = (matrix if isinstance(matrix, RedundantRows)
                 else to_redundant(matrix))
    if scenario.preconditioner == "icp":
        factor = build_icp(redundant, partition, rank, fabric)
        return Preconditioner(kind="icp", factor=factor)
    factor = build_bicp(redundant, partition, rank)
    return Preconditioner(kind="bicp", factor=factor)


def _probe_samples(mesh: HexMesh, x: np.ndarray, stride: int) -> list:
    """|H| on every stride-th node, for qualitative field plots."""
    out = []
    h = x.reshape(-1, 3)
    for node in range(0, mesh.node_count, stride):
        p = mesh.nodes[node]
        mag = float(np.linalg.norm(h[node]))
        out.append([float(p[0]), float(p[1]), float(p[2]), mag])
    return out


def run_scenario(scenario: Scenario, probe_stride: int = 0,
                 export_matrix: str | None = None) -> RunResult:
    """Execute the full pipeline and return rank 0's (replicated) result."""
    start = time.monotonic()
    mesh = build_scenario_mesh(scenario)
    constrained_dofs(mesh)         # surface conflicting symmetry planes early
    partition = partition_rows(mesh.node_count, scenario.ranks)
    fabric = CommFabric(scenario.ranks)

    def per_rank(fab: CommFabric, rank: int):
        matrix, b = assemble_system(scenario, mesh, partition, rank, fab)
        precond = build_preconditioner(scenario, matrix, partition, rank, fab)
        x, report = cg_solve(matrix, b, precond, partition, rank, fab,
                             concat=scenario.concat, tol=scenario.tol,
                             max_iter=scenario.max_iter)
        pbytes = fab.allgather_object(rank, precond.memory_bytes())
        if precond.kind == "bicp":
            precond_total = sum(pbytes)
        else:
            precond_total = pbytes[0]   # replicated: count once
        return matrix, b, x, report, precond_total

    results = run_spmd(scenario.ranks, per_rank, fabric=fabric)
    matrix, b, x, report, precond_total = results[0]
    report.counters = fabric.counters_report()
    if export_matrix:
        write_matrix_market(export_matrix, matrix)
        write_rhs(export_matrix + ".rhs", b)
    probes = _probe_samples(mesh, x, probe_stride) if probe_stride else []
    return RunResult(
        report=report, solution=x,
        node_count=mesh.node_count, element_count=mesh.element_count,
        complex_unknowns=3 * mesh.node_count, dof_count=6 * mesh.node_count,
        matrix_bytes=matrix.value_bytes(), precond_total_bytes=precond_total,
        probes=probes, wall_time=time.monotonic() - start,
        seed=scenario.seed)


def compare_preconditioners(scenario: Scenario, precond_list,
                            rank_list) -> list[dict]:
    """Iteration/traffic table over the preconditioner x rank grid.

    Failures are recorded as marked cells, not raised.
    """
    from dataclasses import replace as _replace
    rows = []
    for precond in precond_list:
        for ranks in rank_list:
            cell = {"preconditioner": precond, "ranks": ranks}
            try:
                sc = _replace(scenario, preconditioner=precond, ranks=ranks)
                res = run_scenario(sc)
                totals = res.report.counters["totals"]
                cell.update({
                    "iterations": res.report.iterations,
                    "converged": res.report.converged,
                    "messages": totals["messages"],
                    "bytes": totals["bytes"],
                    "barriers": totals["barriers"],
                })
            except Exception as exc:   # noqa: BLE001 - marked cell per contract
                cell["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(cell)
    return rows
