"""Structured hexahedral box meshes with tagged boundary facets.

Meshes are regular axis-aligned grids of trilinear hexahedra.  Boundary
facets (element faces appearing exactly once) carry a tag that selects
their treatment during assembly: absorbing boundary on the exterior,
perfect-electric-conductor on scatterer surfaces, or symmetry-plane
constraints on declared bounding-box faces.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

# Local corner offsets of a hexahedron (VTK ordering): bottom quad then top quad.
HEX_CORNERS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
], dtype=np.int64)

# Local node indices of the six faces, ordered so the quad is traversed
# consistently.  Outward orientation is established from centroids, not
# from the winding.
HEX_FACES = np.array([
    (0, 3, 7, 4),   # -x
    (1, 2, 6, 5),   # +x
    (0, 1, 5, 4),   # -y
    (3, 2, 6, 7),   # +y
    (0, 1, 2, 3),   # -z
    (4, 5, 6, 7),   # +z
], dtype=np.int64)

_PLANE_NAMES = {
    "x": ("x", 0), "y": ("y", 0), "z": ("z", 0),
    "x-": ("x", 0), "y-": ("y", 0), "z-": ("z", 0),
    "x+": ("x", 1), "y+": ("y", 1), "z+": ("z", 1),
}
_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


class MeshError(ValueError):
    """Invalid mesh construction request."""


class FacetKind(enum.Enum):
    EXTERIOR = "exterior"
    PEC = "pec"
    SYMMETRY = "symmetry"
    ANTISYMMETRY = "antisymmetry"


@dataclass(frozen=True)
class Facet:
    """One quadrilateral boundary face of a single element."""
    nodes: tuple[int, int, int, int]
    element: int
    normal: np.ndarray            # outward unit normal
    kind: FacetKind = FacetKind.EXTERIOR

    @property
    def axis(self) -> int:
        """Dominant axis of the outward normal."""
        return int(np.argmax(np.abs(self.normal)))


@dataclass(frozen=True)
class ScattererSpec:
    """Axis-aligned PEC box, corners in meters, snapped to grid nodes."""
    corner_min: tuple[float, float, float]
    corner_max: tuple[float, float, float]
    snapped: bool = False


@dataclass
class HexMesh:
    nodes: np.ndarray             # (N, 3) coordinates in meters
    elements: np.ndarray          # (E, 8) node indices, VTK corner order
    facets: list[Facet]
    spacing: float                # grid step h in meters

    @property
    def node_count(self) -> int:
        return self.nodes.shape[0]

    @property
    def element_count(self) -> int:
        return self.elements.shape[0]

    @property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    def node_to_elements(self) -> list[np.ndarray]:
        """Elements incident on each node (cached)."""
        cache = getattr(self, "_node_elems", None)
        if cache is None:
            lists: list[list[int]] = [[] for _ in range(self.node_count)]
            for e, conn in enumerate(self.elements):
                for n in conn:
                    lists[n].append(e)
            cache = [np.asarray(l, dtype=np.int64) for l in lists]
            self._node_elems = cache
        return cache

    def node_to_facets(self) -> list[np.ndarray]:
        """Facets incident on each node (cached)."""
        cache = getattr(self, "_node_facets", None)
        if cache is None:
            lists: list[list[int]] = [[] for _ in range(self.node_count)]
            for f, facet in enumerate(self.facets):
                for n in facet.nodes:
                    lists[n].append(f)
            cache = [np.asarray(l, dtype=np.int64) for l in lists]
            self._node_facets = cache
        return cache

    def export_text(self, path) -> None:
        """Plain-text node/element/facet listing, one record per line."""
        with open(path, "w") as fh:
            fh.write(f"nodes {self.node_count} spacing {float(self.spacing)!r}\n")
            for i, p in enumerate(self.nodes):
                fh.write(f"n {i} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
            fh.write(f"elements {self.element_count}\n")
            for e, conn in enumerate(self.elements):
                fh.write("e " + str(e) + " " + " ".join(map(str, conn)) + "\n")
            fh.write(f"facets {len(self.facets)}\n")
            for f in self.facets:
                n = f.normal
                fh.write("f " + " ".join(map(str, f.nodes))
                         + f" {f.element} {f.kind.value}"
                         + f" {n[0]:.1f} {n[1]:.1f} {n[2]:.1f}\n")


def _boundary_facets(nodes: np.ndarray, elements: np.ndarray) -> list[Facet]:
    """Enumerate element faces; faces appearing once are boundary facets."""
    seen: dict[tuple, tuple[int, tuple]] = {}
    dup: set[tuple] = set()
    for e, conn in enumerate(elements):
        for face in HEX_FACES:
            quad = tuple(conn[face])
            key = tuple(sorted(quad))
            if key in seen:
                dup.add(key)
            else:
                seen[key] = (e, quad)
    facets = []
    for key, (e, quad) in seen.items():
        if key in dup:
            continue
        face_c = nodes[list(quad)].mean(axis=0)
        elem_c = nodes[elements[e]].mean(axis=0)
        normal = face_c - elem_c
        normal = normal / np.linalg.norm(normal)
        normal[np.abs(normal) < 1e-12] = 0.0
        normal = normal / np.linalg.norm(normal)
        facets.append(Facet(nodes=quad, element=e, normal=normal))
    # Deterministic order regardless of dict history.
    facets.sort(key=lambda f: f.nodes)
    return facets


def _edge_node_count(side_wavelengths: float, nodes_per_wavelength: int) -> int:
    n = side_wavelengths * nodes_per_wavelength
    n_int = int(round(n))
    if abs(n - n_int) > 1e-9 or n_int < 2:
        raise MeshError(
            f"side of {side_wavelengths} wavelengths at {nodes_per_wavelength} "
            "nodes/wavelength does not give an integer edge node count >= 2")
    return n_int


def build_box_mesh(extent, nodes_per_wavelength: int, wavelength: float = 1.0,
                   node_budget: int = 2_000_000) -> HexMesh:
    """Regular box grid: a side of L wavelengths gets L*npw nodes per edge.

    ``extent`` is the three side lengths in wavelengths; spacing is
    wavelength / nodes_per_wavelength.
    """
    extent = np.asarray(extent, dtype=float)
    if extent.shape != (3,) or np.any(extent <= 0):
        raise MeshError(f"extent must be 3 positive side lengths, got {extent}")
    if nodes_per_wavelength < 2:
        raise MeshError("nodes_per_wavelength must be >= 2")
    if wavelength <= 0:
        raise MeshError("wavelength must be positive")
    counts = [_edge_node_count(extent[d], nodes_per_wavelength) for d in range(3)]
    nx, ny, nz = counts
    if nx * ny * nz > node_budget:
        raise MeshError(f"mesh of {nx * ny * nz} nodes exceeds budget {node_budget}")
    h = wavelength / nodes_per_wavelength

    # Node id = i + nx*(j + ny*k), x fastest.
    kk, jj, ii = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    nodes = np.column_stack([ii.ravel() * h, jj.ravel() * h,
                             kk.ravel() * h]).astype(float)

    def nid(i, j, k):
        return i + nx * (j + ny * k)

    elems = []
    for k in range(nz - 1):
        for j in range(ny - 1):
            for i in range(nx - 1):
                elems.append([nid(i + dx, j + dy, k + dz)
                              for dx, dy, dz in HEX_CORNERS])
    elements = np.asarray(elems, dtype=np.int64)
    facets = _boundary_facets(nodes, elements)
    return HexMesh(nodes=nodes, elements=elements, facets=facets, spacing=h)


def embed_pec_scatterer(mesh: HexMesh, spec: ScattererSpec | None) -> HexMesh:
    """Remove the elements inside the box and tag newly exposed facets PEC.

    The box corners must coincide with grid nodes and the box must lie
    strictly inside the outer boundary.  Nodes left without any element
    are dropped and the mesh renumbered.
    """
    if spec is None:
        return mesh
    lo = np.asarray(spec.corner_min, dtype=float)
    hi = np.asarray(spec.corner_max, dtype=float)
    if np.any(hi <= lo):
        raise MeshError("scatterer box must have positive volume")
    bb_lo, bb_hi = mesh.bounding_box
    tol = 1e-9 * max(mesh.spacing, 1.0)
    if np.any(lo <= bb_lo + tol) or np.any(hi >= bb_hi - tol):
        raise MeshError("scatterer box must lie strictly inside the outer boundary")
    for corner in (lo, hi):
        offs = corner / mesh.spacing
        if np.any(np.abs(offs - np.round(offs)) > 1e-6):
            raise MeshError(f"scatterer corner {corner} is not grid-aligned")
    spec = replace(spec, snapped=True)

    centroids = mesh.nodes[mesh.elements].mean(axis=1)
    inside = np.all((centroids > lo) & (centroids < hi), axis=1)
    if not np.any(inside):
        return mesh
    kept = mesh.elements[~inside]

    used = np.zeros(mesh.node_count, dtype=bool)
    used[kept.ravel()] = True
    renum = np.full(mesh.node_count, -1, dtype=np.int64)
    renum[used] = np.arange(int(used.sum()))
    nodes = mesh.nodes[used]
    elements = renum[kept]

    facets = _boundary_facets(nodes, elements)
    # Facets not on the bounding box were exposed by the removal: tag PEC.
    tol = 1e-9 * mesh.spacing
    out = []
    for f in facets:
        coords = nodes[list(f.nodes)]
        on_box = False
        for d in range(3):
            if (np.all(np.abs(coords[:, d] - bb_lo[d]) < tol)
                    or np.all(np.abs(coords[:, d] - bb_hi[d]) < tol)):
                on_box = True
        out.append(f if on_box else replace(f, kind=FacetKind.PEC))
    return HexMesh(nodes=nodes, elements=elements, facets=out,
                   spacing=mesh.spacing)


def classify_boundary(mesh: HexMesh,
                      symmetry_planes: list[tuple[str, str]]) -> HexMesh:
    """Retag exterior facets on declared bounding-box faces.

    Each plane is ``(face, kind)`` with face one of ``x-``, ``x+``, ... (a
    bare axis name means the min face) and kind ``symmetry`` or
    ``antisymmetry``.
    """
    bb_lo, bb_hi = mesh.bounding_box
    tol = 1e-9 * mesh.spacing
    seen = set()
    planes = []
    for face, kind in symmetry_planes:
        try:
            axis_name, side = _PLANE_NAMES[face]
        except KeyError:
            raise MeshError(f"unknown bounding-box face {face!r}") from None
        if isinstance(kind, str):
            kind = FacetKind(kind)
        if kind not in (FacetKind.SYMMETRY, FacetKind.ANTISYMMETRY):
            raise MeshError(f"plane kind must be symmetry or antisymmetry, got {kind}")
        key = (axis_name, side)
        if key in seen:
            raise MeshError(f"duplicate symmetry plane declaration on {face}")
        seen.add(key)
        axis = _AXIS_INDEX[axis_name]
        coord = bb_hi[axis] if side else bb_lo[axis]
        planes.append((axis, coord, kind))

    facets = []
    for f in mesh.facets:
        if f.kind is FacetKind.PEC:
            facets.append(f)
            continue
        tagged = f if f.kind is FacetKind.EXTERIOR else replace(
            f, kind=FacetKind.EXTERIOR)
        for axis, coord, kind in planes:
            coords = mesh.nodes[list(f.nodes), axis]
            if np.all(np.abs(coords - coord) < tol):
                tagged = replace(f, kind=kind)
                break
        facets.append(tagged)
    return HexMesh(nodes=mesh.nodes, elements=mesh.elements, facets=facets,
                   spacing=mesh.spacing)
