"""Hybrid structured-grid / tetrahedral-mesh geometry.

The computational box is covered by a uniform finite-difference lattice;
an interior sub-box is additionally covered by a conforming tetrahedral
mesh obtained by splitting every hexahedral cell into six tetrahedra
(Kuhn subdivision, identical in every cell so that cell faces match).
The two discretizations exchange data through node-coincident copy maps
in a two-cell overlap shell just inside the tetrahedral region.

Local refinement is red/green: marked tetrahedra are split into eight
children (red), and conformity is restored by template splits of their
neighbours (green).  Green elements are temporary; they are removed
before their parents are refined further ("re-greening") so that element
quality does not degrade over repeated refinement.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "ConfigurationError",
    "InterpolationError",
    "DomainSpec",
    "StructuredGrid",
    "TetraMesh",
    "BoundaryPartition",
    "HybridDomain",
    "build_hybrid_domain",
    "refine_local",
    "mesh_size",
    "interpolate_nodal",
    "locate_point",
]

# Geometric coincidence tolerance used when hashing node coordinates.
_COORD_DECIMALS = 9
_TOL = 1e-10


class ConfigurationError(ValueError):
    """Invalid geometric configuration (extents, spacing, nesting)."""


class InterpolationError(RuntimeError):
    """A target point could not be located inside the source mesh."""


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    return v


@dataclass(frozen=True)
class DomainSpec:
    """Geometry of the computational box and its interior FE sub-box.

    ``omega_lo``/``omega_hi`` bound the full domain; ``fem_lo``/``fem_hi``
    bound the tetrahedral region, which must be strictly interior.  All
    extents must be integer multiples of the lattice spacing ``h_fdm`` so
    that lattice nodes and FE boundary nodes coincide in the overlap.
    """

    omega_lo: tuple
    omega_hi: tuple
    fem_lo: tuple
    fem_hi: tuple
    h_fdm: float

    def __post_init__(self):
        olo, ohi = _as_vec3(self.omega_lo), _as_vec3(self.omega_hi)
        flo, fhi = _as_vec3(self.fem_lo), _as_vec3(self.fem_hi)
        h = float(self.h_fdm)
        if h <= 0:
            raise ConfigurationError(f"grid spacing must be positive, got {h}")
        if not (np.all(ohi > olo) and np.all(fhi > flo)):
            raise ConfigurationError("domain bounds must have positive extent")
        if not (np.all(flo > olo + h - _TOL) or np.all(flo > olo)):
            pass  # strictness checked below
        if not (np.all(flo > olo + _TOL) and np.all(fhi < ohi - _TOL)):
            raise ConfigurationError(
                "FE sub-box must be strictly interior to the domain box"
            )
        for name, lo, hi in (("omega", olo, ohi), ("fem", flo, fhi)):
            for a in range(3):
                for val in (lo[a] - olo[a], hi[a] - olo[a]):
                    n = val / h
                    if abs(n - round(n)) > 1e-8:
                        raise ConfigurationError(
                            f"{name} extent along axis {a} is not commensurate "
                            f"with spacing {h}: offset {val}"
                        )

    @property
    def omega_lo_v(self) -> np.ndarray:
        return _as_vec3(self.omega_lo)

    @property
    def omega_hi_v(self) -> np.ndarray:
        return _as_vec3(self.omega_hi)

    @property
    def fem_lo_v(self) -> np.ndarray:
        return _as_vec3(self.fem_lo)

    @property
    def fem_hi_v(self) -> np.ndarray:
        return _as_vec3(self.fem_hi)


class StructuredGrid:
    """Uniform lattice over the full box with C-order linear node ids."""

    def __init__(self, lo, hi, spacing: float):
        self.origin = _as_vec3(lo)
        self.spacing = float(spacing)
        ext = _as_vec3(hi) - self.origin
        self.dims = np.array(
            [int(round(e / self.spacing)) + 1 for e in ext], dtype=int
        )
        if np.any(self.dims < 2):
            raise ConfigurationError("grid needs at least 2 nodes per axis")
        self._coords = None

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.dims))

    def linear_id(self, i, j, k):
        nx, ny, nz = self.dims
        return (np.asarray(i) * ny + np.asarray(j)) * nz + np.asarray(k)

    def ijk(self, lid):
        nx, ny, nz = self.dims
        lid = np.asarray(lid)
        k = lid % nz
        j = (lid // nz) % ny
        i = lid // (ny * nz)
        return i, j, k

    def coords(self) -> np.ndarray:
        """All node coordinates, shape (n_nodes, 3)."""
        if self._coords is None:
            nx, ny, nz = self.dims
            I, J, K = np.meshgrid(
                np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
            )
            pts = np.stack([I, J, K], axis=-1).reshape(-1, 3) * self.spacing
            self._coords = pts + self.origin
        return self._coords

    def lattice_index(self, points: np.ndarray):
        """Map points to lattice (i,j,k); returns (idx, aligned_mask)."""
        rel = (np.atleast_2d(points) - self.origin) / self.spacing
        idx = np.round(rel).astype(int)
        aligned = np.all(np.abs(rel - idx) < 1e-8, axis=1)
        inside = np.all((idx >= 0) & (idx < self.dims), axis=1)
        return idx, aligned & inside


# Kuhn subdivision of the unit cube: six tetrahedra around the main
# diagonal (0,0,0)-(1,1,1), one per permutation of the axes.  Corner
# offsets are encoded as (dx,dy,dz) triples.
_KUHN_PATHS = [
    (0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0),
]


def _kuhn_corner_offsets():
    tets = []
    for p in _KUHN_PATHS:
        v = [np.zeros(3, dtype=int)]
        acc = np.zeros(3, dtype=int)
        for axis in p:
            acc = acc.copy()
            acc[axis] = 1
            v.append(acc)
        tets.append(np.array(v))
    return tets


_KUHN_TETS = _kuhn_corner_offsets()


class TetraMesh:
    """Conforming tetrahedral mesh with refinement bookkeeping.

    Attributes
    ----------
    vertices : (n, 3) float array
    tets : (m, 4) int array, positively oriented
    boundary_facets : (f, 3) int array of outer faces
    facet_tags : (f,) int array; box side 0..5 (x-,x+,y-,y+,z-,z+)
    level : (m,) int, red-refinement generation
    parent : (m,) int, index into the mesh this one was refined from
        (-1 for tets of an unrefined mesh)
    green : (m,) bool, True for temporary closure elements
    """

    def __init__(self, vertices, tets, level=None, parent=None, green=None,
                 green_parent=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.tets = np.asarray(tets, dtype=np.int64)
        m = len(self.tets)
        self.level = (np.zeros(m, dtype=np.int32) if level is None
                      else np.asarray(level, dtype=np.int32))
        self.parent = (np.full(m, -1, dtype=np.int64) if parent is None
                       else np.asarray(parent, dtype=np.int64))
        self.green = (np.zeros(m, dtype=bool) if green is None
                      else np.asarray(green, dtype=bool))
        self.green_parent = (np.full((m, 4), -1, dtype=np.int64)
                             if green_parent is None
                             else np.asarray(green_parent, dtype=np.int64))
        self._fix_orientation()
        vols = self.volumes()
        if np.any(vols <= 0):
            raise ConfigurationError("mesh contains degenerate tetrahedra")
        self.boundary_facets, self.facet_tags = _boundary_facets(
            self.vertices, self.tets
        )
        self._tinv = None
        self._tree = None
        self._vertex_volumes = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def _fix_orientation(self):
        # Swap local vertices 1 and 3: an odd permutation that flips the
        # sign but keeps the {02, 13} midpoint-diagonal pair used by red
        # refinement, so the subdivision pattern is orientation-neutral.
        v = self.vertices[self.tets]
        det = np.linalg.det(v[:, 1:] - v[:, :1])
        bad = det < 0
        if np.any(bad):
            t = self.tets[bad]
            t[:, [1, 3]] = t[:, [3, 1]]
            self.tets[bad] = t

    def volumes(self) -> np.ndarray:
        v = self.vertices[self.tets]
        return np.linalg.det(v[:, 1:] - v[:, :1]) / 6.0

    def vertex_volumes(self) -> np.ndarray:
        """Lumped nodal volumes: a quarter of each adjacent tet."""
        if self._vertex_volumes is None:
            vols = self.volumes()
            w = np.zeros(self.n_vertices)
            np.add.at(w, self.tets.ravel(), np.repeat(vols / 4.0, 4))
            self._vertex_volumes = w
        return self._vertex_volumes

    def edge_lengths(self) -> np.ndarray:
        """Per-tet lengths of the 6 edges, shape (m, 6)."""
        pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        v = self.vertices[self.tets]
        return np.stack(
            [np.linalg.norm(v[:, a] - v[:, b], axis=1) for a, b in pairs],
            axis=1,
        )

    def min_edge(self) -> float:
        return float(self.edge_lengths().min())

    def barycentric_setup(self):
        """Cache inverse edge matrices for barycentric evaluation."""
        if self._tinv is None:
            v = self.vertices[self.tets]
            T = np.transpose(v[:, 1:] - v[:, :1], (0, 2, 1))
            self._tinv = np.linalg.inv(T)
        return self._tinv

    def centroid_tree(self) -> cKDTree:
        if self._tree is None:
            cent = self.vertices[self.tets].mean(axis=1)
            self._tree = cKDTree(cent)
        return self._tree

    def check_conformity(self):
        """Exhaustive face-pair scan; raises on nonconforming meshes.

        Every face must be shared by exactly two tets or lie on the outer
        hull; a face appearing once in the interior indicates a hanging
        node.
        """
        faces = {}
        for t, quad in enumerate(self.tets):
            for f in _tet_faces(quad):
                faces[f] = faces.get(f, 0) + 1
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        for f, cnt in faces.items():
            if cnt > 2:
                raise ConfigurationError(f"face {f} shared by {cnt} tets")
            if cnt == 1:
                pts = self.vertices[list(f)]
                on_side = any(
                    np.all(np.abs(pts[:, a] - b) < _TOL)
                    for a in range(3)
                    for b in (lo[a], hi[a])
                )
                if not on_side:
                    raise ConfigurationError(
                        f"interior face {f} has a hanging neighbour"
                    )


def _tet_faces(quad):
    a, b, c, d = (int(x) for x in quad)
    return (
        tuple(sorted((a, b, c))),
        tuple(sorted((a, b, d))),
        tuple(sorted((a, c, d))),
        tuple(sorted((b, c, d))),
    )


def _boundary_facets(vertices, tets):
    faces = {}
    for quad in tets:
        for f in _tet_faces(quad):
            faces[f] = faces.get(f, 0) + 1
    bnd = [f for f, c in faces.items() if c == 1]
    if not bnd:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
    bnd = np.array(sorted(bnd), dtype=np.int64)
    lo = vertices.min(axis=0)
    hi = vertices.max(axis=0)
    tags = np.full(len(bnd), -1, dtype=np.int64)
    for i, f in enumerate(bnd):
        pts = vertices[f]
        for a in range(3):
            if np.all(np.abs(pts[:, a] - lo[a]) < _TOL):
                tags[i] = 2 * a
                break
            if np.all(np.abs(pts[:, a] - hi[a]) < _TOL):
                tags[i] = 2 * a + 1
                break
    return bnd, tags


@dataclass
class BoundaryPartition:
    """Disjoint decomposition of the lattice boundary.

    ``top`` is the face of maximal third coordinate (the illuminated,
    observed side), ``bottom`` its opposite, ``lateral`` the remaining
    four sides.  Face quads are stored for each part; node sets are
    disjoint with edge/corner nodes assigned to top/bottom first.
    """

    top_nodes: np.ndarray
    bottom_nodes: np.ndarray
    lateral_nodes: np.ndarray
    top_facets: np.ndarray
    bottom_facets: np.ndarray
    lateral_facets: np.ndarray


def _build_partition(grid: StructuredGrid) -> BoundaryPartition:
    nx, ny, nz = grid.dims
    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    top = grid.linear_id(I, J, nz - 1).ravel()
    bottom = grid.linear_id(I, J, 0).ravel()
    bnd = set()
    for i in (0, nx - 1):
        J2, K2 = np.meshgrid(np.arange(ny), np.arange(1, nz - 1), indexing="ij")
        bnd.update(grid.linear_id(i, J2, K2).ravel().tolist())
    for j in (0, ny - 1):
        I2, K2 = np.meshgrid(np.arange(nx), np.arange(1, nz - 1), indexing="ij")
        bnd.update(grid.linear_id(I2, j, K2).ravel().tolist())
    lateral = np.array(sorted(bnd), dtype=np.int64)

    def face_quads(axis, fixed, lo_a, hi_a, lo_b, hi_b):
        quads = []
        for a in range(lo_a, hi_a):
            for b in range(lo_b, hi_b):
                if axis == 2:
                    ids = [(a, b, fixed), (a + 1, b, fixed),
                           (a + 1, b + 1, fixed), (a, b + 1, fixed)]
                elif axis == 0:
                    ids = [(fixed, a, b), (fixed, a + 1, b),
                           (fixed, a + 1, b + 1), (fixed, a, b + 1)]
                else:
                    ids = [(a, fixed, b), (a + 1, fixed, b),
                           (a + 1, fixed, b + 1), (a, fixed, b + 1)]
                quads.append([grid.linear_id(*p) for p in ids])
        return np.array(quads, dtype=np.int64).reshape(-1, 4)

    top_f = face_quads(2, nz - 1, 0, nx - 1, 0, ny - 1)
    bot_f = face_quads(2, 0, 0, nx - 1, 0, ny - 1)
    lat = [
        face_quads(0, 0, 0, ny - 1, 0, nz - 1),
        face_quads(0, nx - 1, 0, ny - 1, 0, nz - 1),
        face_quads(1, 0, 0, nx - 1, 0, nz - 1),
        face_quads(1, ny - 1, 0, nx - 1, 0, nz - 1),
    ]
    return BoundaryPartition(
        top_nodes=np.sort(top),
        bottom_nodes=np.sort(bottom),
        lateral_nodes=lateral,
        top_facets=top_f,
        bottom_facets=bot_f,
        lateral_facets=np.concatenate(lat, axis=0),
    )


class HybridDomain:
    """Coupled lattice + tetrahedral geometry with exchange maps.

    The lattice covers the whole box.  Tetrahedral nodes within two cells
    of the FE sub-box boundary form the overlap shell: its two outer node
    layers receive lattice values each step (``fd2fe``), and the lattice
    nodes on the third layer receive tetrahedral values (``fe2fd``) so
    that the lattice stencil next to the shell stays closed.  Material
    coefficients are pinned to vacuum on the whole shell.
    """

    def __init__(self, spec: DomainSpec, grid: StructuredGrid,
                 mesh: TetraMesh, partition: BoundaryPartition):
        self.spec = spec
        self.grid = grid
        self.mesh = mesh
        self.partition = partition
        self._build_fd_side()
        self._build_fem_side()

    # -- lattice-side constants (mesh independent) --

    def _build_fd_side(self):
        g = self.grid
        nx, ny, nz = g.dims
        h = g.spacing
        flo, fhi = self.spec.fem_lo_v, self.spec.fem_hi_v
        pts = g.coords()

        inside = np.all((pts > flo - _TOL) & (pts < fhi + _TOL), axis=1)
        depth = np.where(
            inside,
            np.minimum((pts - flo).min(axis=1), (fhi - pts).min(axis=1)),
            -1.0,
        )
        self.fd_depth = depth
        on_outer = np.zeros(g.n_nodes, dtype=bool)
        I, J, K = g.ijk(np.arange(g.n_nodes))
        on_outer |= (I == 0) | (I == nx - 1)
        on_outer |= (J == 0) | (J == ny - 1)
        on_outer |= (K == 0) | (K == nz - 1)
        fem_deep = inside & (depth > 2 * h - h * 1e-6)
        self.fd_update_mask = (~on_outer) & (~fem_deep)

        p = self.partition
        self.top_inward = p.top_nodes - 1  # k-1 in C order: last axis stride 1
        self.bottom_inward = p.bottom_nodes + 1
        li, lj, lk = g.ijk(p.lateral_nodes)
        li = np.where(li == 0, 1, np.where(li == nx - 1, nx - 2, li))
        lj = np.where(lj == 0, 1, np.where(lj == ny - 1, ny - 2, lj))
        self.lateral_inward = g.linear_id(li, lj, lk)

    # -- tetrahedral-side constants (recomputed on refinement) --

    def _build_fem_side(self):
        g = self.grid
        h = g.spacing
        flo, fhi = self.spec.fem_lo_v, self.spec.fem_hi_v
        v = self.mesh.vertices
        depth = np.minimum((v - flo).min(axis=1), (fhi - v).min(axis=1))
        self.fem_depth = depth
        tol = h * 1e-6
        self.pinned_mask = depth <= 2 * h + tol
        layer01 = depth <= h + tol
        layer2 = np.abs(depth - 2 * h) <= tol

        idx, aligned = g.lattice_index(v)
        if np.any(layer01 & ~aligned):
            raise ConfigurationError(
                "overlap-shell node off the lattice; refinement reached "
                "the exchange layers"
            )
        lid = g.linear_id(idx[:, 0], idx[:, 1], idx[:, 2])

        fe01 = np.where(layer01)[0]
        self.fd2fe_fe = fe01
        self.fd2fe_fd = lid[fe01]
        # FE -> lattice copy on every lattice-coincident node from the
        # third layer inward: only the third layer feeds the lattice
        # stencil, the deeper copies keep the lattice array meaningful
        # for probing and trace recording anywhere
        deep = (depth >= 2 * h - tol) & aligned
        fe2 = np.where(deep)[0]
        self.fe2fd_fe = fe2
        self.fe2fd_fd = lid[fe2]
        self.dirichlet_mask = layer01
        self.free_mask = ~layer01

    def with_mesh(self, mesh: TetraMesh) -> "HybridDomain":
        """Same lattice and box, new (refined) tetrahedral mesh."""
        return HybridDomain(self.spec, self.grid, mesh, self.partition)

    def refinable_tets(self) -> np.ndarray:
        """Tets safe to red-refine: all vertices off the overlap shell."""
        deep = ~self.pinned_mask
        return np.where(np.all(deep[self.mesh.tets], axis=1))[0]

    def min_element_size(self) -> float:
        return min(self.grid.spacing, self.mesh.min_edge())


def _fem_box_mesh(flo, fhi, h) -> TetraMesh:
    n = [int(round((fhi[a] - flo[a]) / h)) for a in range(3)]
    nx, ny, nz = (n[0] + 1, n[1] + 1, n[2] + 1)
    I, J, K = np.meshgrid(
        np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
    )
    verts = np.stack([I, J, K], axis=-1).reshape(-1, 3) * h + flo

    def vid(i, j, k):
        return (i * ny + j) * nz + k

    tets = []
    for i in range(n[0]):
        for j in range(n[1]):
            for k in range(n[2]):
                base = np.array([i, j, k])
                for corners in _KUHN_TETS:
                    tets.append(
                        [vid(*(base + c)) for c in corners]
                    )
    return TetraMesh(verts, np.array(tets, dtype=np.int64))


def build_hybrid_domain(spec: DomainSpec) -> HybridDomain:
    """Construct the coupled lattice/tetrahedral geometry for ``spec``."""
    grid = StructuredGrid(spec.omega_lo_v, spec.omega_hi_v, spec.h_fdm)
    mesh = _fem_box_mesh(spec.fem_lo_v, spec.fem_hi_v, spec.h_fdm)
    partition = _build_partition(grid)
    return HybridDomain(spec, grid, mesh, partition)


def mesh_size(mesh: TetraMesh) -> np.ndarray:
    """Per-element diameter h_K: the longest edge of each tet."""
    return mesh.edge_lengths().max(axis=1)


# ---------------------------------------------------------------------------
# Point location and nodal interpolation
# ---------------------------------------------------------------------------

def _bary_candidates(mesh: TetraMesh, x, cand):
    tinv = mesh.barycentric_setup()
    x0 = mesh.vertices[mesh.tets[cand, 0]]
    b = np.einsum("nij,nj->ni", tinv[cand], x - x0)
    b0 = 1.0 - b.sum(axis=1)
    bary = np.column_stack([b0, b])
    return bary


def locate_point(mesh: TetraMesh, x, tol: float = 1e-10):
    """Find the tet containing ``x``.

    Returns ``(tet_id, barycentric)`` with all four coordinates in
    ``[-tol, 1+tol]``; ties on shared faces resolve to the lowest tet id.
    Returns ``None`` for points outside the mesh.
    """
    x = _as_vec3(x)
    tree = mesh.centroid_tree()
    k = min(32, mesh.n_tets)
    _, cand = tree.query(x, k=k)
    cand = np.atleast_1d(cand)
    bary = _bary_candidates(mesh, x, cand)
    ok = np.all(bary >= -tol, axis=1) & np.all(bary <= 1 + tol, axis=1)
    if np.any(ok):
        hits = cand[ok]
        best = int(hits.min())
        b = bary[ok][int(np.argmin(hits))]
        return best, b
    # fall back to the exhaustive scan before declaring the point outside
    cand = np.arange(mesh.n_tets)
    bary = _bary_candidates(mesh, x, cand)
    ok = np.all(bary >= -tol, axis=1) & np.all(bary <= 1 + tol, axis=1)
    if not np.any(ok):
        return None
    hits = cand[ok]
    best = int(hits.min())
    return best, bary[ok][int(np.argmin(hits))]


def interpolate_nodal(field: np.ndarray, source: TetraMesh,
                      target: TetraMesh, tol: float = 1e-10) -> np.ndarray:
    """Evaluate a P1 nodal field of ``source`` at the nodes of ``target``.

    Values at coincident nodes are copied exactly; other nodes take the
    barycentric-linear value of the containing source tet.
    """
    field = np.asarray(field, dtype=float)
    if field.shape[0] != source.n_vertices:
        raise ValueError("field length does not match source mesh")
    out_shape = (target.n_vertices,) + field.shape[1:]
    out = np.zeros(out_shape)

    src_hash = {
        tuple(np.round(p, _COORD_DECIMALS)): i
        for i, p in enumerate(source.vertices)
    }
    missing = []
    for i, p in enumerate(target.vertices):
        key = tuple(np.round(p, _COORD_DECIMALS))
        j = src_hash.get(key)
        if j is not None:
            out[i] = field[j]
        else:
            missing.append(i)
    if missing:
        tree = source.centroid_tree()
        k = min(48, source.n_tets)
        for i in missing:
            p = target.vertices[i]
            _, cand = tree.query(p, k=k)
            cand = np.atleast_1d(cand)
            bary = _bary_candidates(source, p, cand)
            ok = (np.all(bary >= -tol, axis=1)
                  & np.all(bary <= 1 + tol, axis=1))
            if not np.any(ok):
                loc = locate_point(source, p, tol)
                if loc is None:
                    raise InterpolationError(
                        f"target node {i} at {p} lies outside the source mesh"
                    )
                t, b = loc
            else:
                hits = cand[ok]
                t = int(hits.min())
                b = bary[ok][int(np.argmin(hits))]
            out[i] = np.tensordot(b, field[source.tets[t]], axes=(0, 0))
    return out


# ---------------------------------------------------------------------------
# Red/green local refinement
# ---------------------------------------------------------------------------

_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
# faces opposite to each local vertex, and edge inclusion per face
_FACES = [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]


class _VertexPool:
    """Growable vertex array with coordinate-hash lookup."""

    def __init__(self, vertices):
        self.coords = [tuple(p) for p in np.asarray(vertices, dtype=float)]
        self.lookup = {
            tuple(np.round(p, _COORD_DECIMALS)): i
            for i, p in enumerate(self.coords)
        }

    def midpoint_id(self, a: int, b: int):
        """Existing vertex at the midpoint of (a, b), or None."""
        p = (np.array(self.coords[a]) + np.array(self.coords[b])) / 2.0
        return self.lookup.get(tuple(np.round(p, _COORD_DECIMALS)))

    def ensure_midpoint(self, a: int, b: int) -> int:
        p = (np.array(self.coords[a]) + np.array(self.coords[b])) / 2.0
        key = tuple(np.round(p, _COORD_DECIMALS))
        vid = self.lookup.get(key)
        if vid is None:
            vid = len(self.coords)
            self.coords.append(tuple(p))
            self.lookup[key] = vid
        return vid

    def array(self) -> np.ndarray:
        return np.array(self.coords, dtype=float)


def _red_children(quad, mids, pool):
    """Eight children of a red-refined tet, in canonical order.

    ``mids`` maps local edge index -> global midpoint id.  The interior
    octahedron is cut along the (02, 13)-midpoint diagonal of the stored
    vertex order (Bey's rule); for the Kuhn tets used here this keeps
    every child similar to its parent, so element shape never degrades
    under repeated red refinement.
    """
    a, b, c, d = quad
    m = {e: mids[i] for i, e in enumerate(_EDGES)}
    mab, mac, mad = m[(0, 1)], m[(0, 2)], m[(0, 3)]
    mbc, mbd, mcd = m[(1, 2)], m[(1, 3)], m[(2, 3)]
    return [
        (a, mab, mac, mad),
        (mab, b, mbc, mbd),
        (mac, mbc, c, mcd),
        (mad, mbd, mcd, d),
        (mab, mac, mad, mbd),
        (mab, mac, mbc, mbd),
        (mac, mad, mbd, mcd),
        (mac, mbc, mbd, mcd),
    ]


def _green_children(quad, hang):
    """Template split of a tet with hanging midpoints on some edges.

    ``hang`` maps local edge (i, j) -> midpoint id.  Supported patterns:
    one edge, two edges on a shared face, two opposite edges, and three
    edges of one face.  Returns None when the pattern needs promotion to
    red refinement.
    """
    edges = sorted(hang.keys())
    k = len(edges)
    q = list(quad)
    if k == 1:
        (i, j), = edges
        m = hang[(i, j)]
        rest = [l for l in range(4) if l not in (i, j)]
        return [
            (q[i], m, q[rest[0]], q[rest[1]]),
            (m, q[j], q[rest[0]], q[rest[1]]),
        ]
    if k == 2:
        (e1, e2) = edges
        shared = set(e1) & set(e2)
        if not shared:
            # opposite edges
            i, j = e1
            l, r = e2
            m1, m2 = hang[e1], hang[e2]
            return [
                (q[i], m1, q[l], m2),
                (q[i], m1, m2, q[r]),
                (m1, q[j], q[l], m2),
                (m1, q[j], m2, q[r]),
            ]
        # edges share a vertex: both lie on one face
        b = shared.pop()
        a = (set(e1) - {b}).pop()
        c = (set(e2) - {b}).pop()
        d = ({0, 1, 2, 3} - {a, b, c}).pop()
        m1, m2 = hang[e1], hang[e2]  # m1 on (a,b), m2 on (b,c)
        ga, gb, gc, gd = q[a], q[b], q[c], q[d]
        out = [(m1, gb, m2, gd)]
        # split quad (ga, m1, m2, gc) along the globally smaller diagonal
        d1 = tuple(sorted((ga, m2)))
        d2 = tuple(sorted((m1, gc)))
        if d1 <= d2:
            out.append((ga, m1, m2, gd))
            out.append((ga, m2, gc, gd))
        else:
            out.append((ga, m1, gc, gd))
            out.append((m1, m2, gc, gd))
        return out
    if k == 3:
        touched = {}
        for e in edges:
            for v in e:
                touched[v] = touched.get(v, 0) + 1
        # three edges of one face touch exactly three vertices twice... each
        verts = sorted(touched)
        if len(verts) == 3 and all(touched[v] == 2 for v in verts):
            a, b, c = verts
            d = ({0, 1, 2, 3} - set(verts)).pop()
            mab = hang[tuple(sorted((a, b)))]
            mbc = hang[tuple(sorted((b, c)))]
            mac = hang[tuple(sorted((a, c)))]
            ga, gb, gc, gd = q[a], q[b], q[c], q[d]
            return [
                (ga, mab, mac, gd),
                (mab, gb, mbc, gd),
                (mac, mbc, gc, gd),
                (mab, mbc, mac, gd),
            ]
        return None
    return None


def refine_local(mesh: TetraMesh, marked) -> TetraMesh:
    """Refine the marked tets red; restore conformity with green closure.

    Green elements present in the input are first collapsed back into
    their parents (re-greening); a marked green element promotes its
    parent to red refinement.  An empty marked set returns the input
    unchanged.
    """
    marked = np.asarray(list(marked), dtype=np.int64)
    if marked.size == 0:
        return mesh
    if np.any((marked < 0) | (marked >= mesh.n_tets)):
        raise ValueError("marked set contains invalid tet ids")
    marked_set = set(int(t) for t in marked)

    pool = _VertexPool(mesh.vertices)

    # --- re-green: collapse green families into solid parents ---
    solids = []       # (quad tuple, level, src_index)
    reds = set()      # indices into solids
    fams = {}
    for i in range(mesh.n_tets):
        if mesh.green[i]:
            key = tuple(mesh.green_parent[i])
            fams.setdefault(key, []).append(i)
        else:
            solids.append((tuple(int(v) for v in mesh.tets[i]),
                           int(mesh.level[i]), i))
            if i in marked_set:
                reds.add(len(solids) - 1)
    for key, members in fams.items():
        solids.append((key, int(mesh.level[members[0]]), min(members)))
        if any(m in marked_set for m in members):
            reds.add(len(solids) - 1)

    # --- seed midpoints of red elements, then close ---
    for s in reds:
        quad = solids[s][0]
        for (i, j) in _EDGES:
            pool.ensure_midpoint(quad[i], quad[j])

    while True:
        promoted = False
        for s, (quad, lvl, src) in enumerate(solids):
            if s in reds:
                continue
            hang = {}
            for (i, j) in _EDGES:
                mid = pool.midpoint_id(quad[i], quad[j])
                if mid is not None:
                    hang[(i, j)] = mid
            if not hang:
                continue
            if _green_children(quad, hang) is None:
                reds.add(s)
                for (i, j) in _EDGES:
                    pool.ensure_midpoint(quad[i], quad[j])
                promoted = True
        if not promoted:
            break

    # --- emit children ---
    out_tets, out_level, out_parent = [], [], []
    out_green, out_gparent = [], []
    for s, (quad, lvl, src) in enumerate(solids):
        if s in reds:
            mids = [pool.ensure_midpoint(quad[i], quad[j]) for i, j in _EDGES]
            for ch in _red_children(quad, mids, pool):
                out_tets.append(ch)
                out_level.append(lvl + 1)
                out_parent.append(src)
                out_green.append(False)
                out_gparent.append((-1, -1, -1, -1))
            continue
        hang = {}
        for (i, j) in _EDGES:
            mid = pool.midpoint_id(quad[i], quad[j])
            if mid is not None:
                hang[(i, j)] = mid
        if not hang:
            out_tets.append(quad)
            out_level.append(lvl)
            out_parent.append(src)
            out_green.append(False)
            out_gparent.append((-1, -1, -1, -1))
            continue
        for ch in _green_children(quad, hang):
            out_tets.append(ch)
            out_level.append(lvl)
            out_parent.append(src)
            out_green.append(True)
            out_gparent.append(quad)

    return TetraMesh(
        pool.array(),
        np.array(out_tets, dtype=np.int64),
        level=np.array(out_level),
        parent=np.array(out_parent),
        green=np.array(out_green),
        green_parent=np.array(out_gparent),
    )
