"""Mapped quad/hex meshes: vertex patches, nested hierarchies, random distortion.

Cells carry per-cell coefficients (viscosity ``mu``, density ``rho``).  Cell
corners are stored in tensor order: corner multi-index ``b`` in {0,1}^d,
flattened in C order (last axis fastest), matching the Kronecker convention
of :mod:`stokesmg.kron`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kron

__all__ = [
    "Cell",
    "MeshLevel",
    "MeshHierarchy",
    "DegenerateMeshError",
    "unit_cartesian_patch",
    "simplicial_patch",
    "distort",
    "build_hierarchy",
    "set_viscosity_region",
    "dump_mesh",
]


class DegenerateMeshError(RuntimeError):
    """Raised when a cell mapping has a nonpositive Jacobian determinant."""

    def __init__(self, cell_ids, detail=""):
        self.cell_ids = tuple(int(c) for c in cell_ids)
        msg = f"nonpositive Jacobian determinant in cells {self.cell_ids}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass
class Cell:
    vertices: tuple[int, ...]
    mu: float = 1.0
    rho: float = 0.0


def _q1_tables(d: int, points: np.ndarray):
    """Multilinear shape values (nq, 2^d) and gradients (nq, 2^d, d)."""
    points = np.atleast_2d(points)
    nq = points.shape[0]
    corners = list(itertools.product((0, 1), repeat=d))
    vals = np.ones((nq, len(corners)))
    grads = np.zeros((nq, len(corners), d))
    for v, b in enumerate(corners):
        factors = np.empty((nq, d))
        for k in range(d):
            factors[:, k] = points[:, k] if b[k] else 1.0 - points[:, k]
        vals[:, v] = factors.prod(axis=1)
        for k in range(d):
            others = np.delete(factors, k, axis=1).prod(axis=1)
            grads[:, v, k] = (1.0 if b[k] else -1.0) * others
    return vals, grads


def _default_check_points(d: int) -> np.ndarray:
    """Gauss points plus cell corners, used for Jacobian positivity checks."""
    g, _ = kron.gauss_quadrature(3)
    axis = np.concatenate(([0.0], g, [1.0]))
    pts = np.array(list(itertools.product(axis, repeat=d)))
    return pts


class MeshLevel:
    """One mesh level: vertices, cells with coefficients, optional parent map.

    Parameters
    ----------
    dim : int
        Spatial dimension, 2 or 3.
    vertices : (nv, dim) array
        Vertex coordinates.
    cells : list of Cell
        Each with 2^dim corner ids in tensor order.
    parent_map : array or None
        Per-cell id of the parent cell on the coarser level.
    frozen : bool array or None
        Vertices that never move under distortion (patch corners).
    """

    def __init__(self, dim, vertices, cells, parent_map=None, frozen=None, check=True):
        if dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        self.dim = dim
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = list(cells)
        self.parent_map = None if parent_map is None else np.asarray(parent_map, int)
        if frozen is None:
            frozen = np.zeros(len(self.vertices), dtype=bool)
        self.frozen = np.asarray(frozen, dtype=bool)
        nv = len(self.vertices)
        for c in self.cells:
            if len(c.vertices) != 2**dim or max(c.vertices) >= nv:
                raise ValueError("cell corner list inconsistent with vertex count")
            if c.mu <= 0 or c.rho < 0:
                raise ValueError("need mu > 0 and rho >= 0")
        self._boundary_cache = None
        if check:
            self.check_jacobians()

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def corner_coords(self, cell_id: int) -> np.ndarray:
        return self.vertices[list(self.cells[cell_id].vertices)]

    def map_points(self, cell_id: int, ref_points: np.ndarray) -> np.ndarray:
        vals, _ = _q1_tables(self.dim, ref_points)
        return vals @ self.corner_coords(cell_id)

    def jacobians(self, cell_id: int, ref_points: np.ndarray):
        """Jacobian dx/dxi at reference points: (nq, d, d) plus determinants."""
        _, grads = _q1_tables(self.dim, ref_points)
        coords = self.corner_coords(cell_id)
        J = np.einsum("va,qvk->qak", coords, grads)
        det = np.linalg.det(J)
        return J, det

    def check_jacobians(self, ref_points=None):
        if ref_points is None:
            ref_points = _default_check_points(self.dim)
        bad = []
        for c in range(self.n_cells):
            _, det = self.jacobians(c, ref_points)
            if np.any(det <= 0):
                bad.append(c)
        if bad:
            raise DegenerateMeshError(bad)

    def cell_facets(self, cell_id: int):
        """Facets of a cell as sorted vertex-id tuples (edges in 2D, faces in 3D)."""
        d = self.dim
        verts = self.cells[cell_id].vertices
        corners = list(itertools.product((0, 1), repeat=d))
        out = []
        for axis in range(d):
            for extreme in (0, 1):
                ids = [verts[i] for i, b in enumerate(corners) if b[axis] == extreme]
                out.append(tuple(sorted(ids)))
        return out

    def cell_edges(self, cell_id: int):
        """All 1D edges of a cell as sorted vertex-id pairs."""
        d = self.dim
        verts = self.cells[cell_id].vertices
        corners = list(itertools.product((0, 1), repeat=d))
        index = {b: verts[i] for i, b in enumerate(corners)}
        out = []
        for axis in range(d):
            for rest in itertools.product((0, 1), repeat=d - 1):
                b0 = list(rest[:axis]) + [0] + list(rest[axis:])
                b1 = list(b0)
                b1[axis] = 1
                a, b = index[tuple(b0)], index[tuple(b1)]
                out.append((min(a, b), max(a, b)))
        return out

    def boundary_facets(self):
        counts: dict[tuple, int] = {}
        for c in range(self.n_cells):
            for f in self.cell_facets(c):
                counts[f] = counts.get(f, 0) + 1
        return {f for f, n in counts.items() if n == 1}

    def boundary_vertex_mask(self) -> np.ndarray:
        if self._boundary_cache is None:
            mask = np.zeros(self.n_vertices, dtype=bool)
            for f in self.boundary_facets():
                mask[list(f)] = True
            self._boundary_cache = mask
        return self._boundary_cache

    def interior_vertices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_vertex_mask())

    def min_incident_edge_length(self) -> np.ndarray:
        """Per-vertex minimum incident edge length (the local h for distortion)."""
        h = np.full(self.n_vertices, np.inf)
        for c in range(self.n_cells):
            for a, b in self.cell_edges(c):
                length = np.linalg.norm(self.vertices[a] - self.vertices[b])
                h[a] = min(h[a], length)
                h[b] = min(h[b], length)
        return h


@dataclass
class MeshHierarchy:
    """Nested mesh levels, coarsest first."""

    levels: list[MeshLevel]

    @property
    def L(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> MeshLevel:
        return self.levels[-1]


def unit_cartesian_patch(d: int, h: float = 1.0) -> MeshLevel:
    """A single Cartesian vertex patch: 2^d axis-aligned cells of width ``h``.

    The cells tile [0, 2h]^d and share the interior vertex at (h, ..., h).
    Patch corners are frozen for distortion.
    """
    if d not in (2, 3):
        raise ValueError("d must be 2 or 3")
    if h <= 0:
        raise ValueError("h must be positive")
    axis = np.array([0.0, h, 2.0 * h])
    grid = np.array(list(itertools.product(axis, repeat=d)))

    def vid(idx):
        return int(np.ravel_multi_index(idx, (3,) * d))

    cells = []
    for origin in itertools.product((0, 1), repeat=d):
        corners = []
        for b in itertools.product((0, 1), repeat=d):
            corners.append(vid(tuple(o + bb for o, bb in zip(origin, b))))
        cells.append(Cell(vertices=tuple(corners)))
    frozen = np.array([all(i in (0, 2) for i in idx)
                       for idx in itertools.product(range(3), repeat=d)])
    return MeshLevel(d, grid, cells, frozen=frozen)


def _oriented_axes(corner, others, midpoint):
    """Order the three edge directions at a tet corner for a positive Jacobian."""
    j, k, l = others
    a = midpoint[(corner, j)] - midpoint[(corner, corner)]
    b = midpoint[(corner, k)] - midpoint[(corner, corner)]
    c = midpoint[(corner, l)] - midpoint[(corner, corner)]
    if np.linalg.det(np.column_stack([a, b, c])) > 0:
        return j, k, l
    return j, l, k


def simplicial_patch(d: int) -> MeshLevel:
    """The reference simplex split into quads/hexes with one interior vertex.

    In 2D the triangle (0,0)-(1,0)-(0,1) is split into 3 quadrilaterals by
    connecting edge midpoints to the centroid; in 3D the reference tetrahedron
    is split into 4 hexahedra via edge midpoints, face centroids and the cell
    centroid.  Simplex corners are frozen for distortion.
    """
    if d == 2:
        tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        mids = {(i, j): 0.5 * (tri[i] + tri[j]) for i in range(3) for j in range(3) if i < j}
        centroid = tri.mean(axis=0)
        verts = [tri[0], tri[1], tri[2], mids[(0, 1)], mids[(0, 2)], mids[(1, 2)], centroid]
        vid = {"c0": 0, "c1": 1, "c2": 2, "m01": 3, "m02": 4, "m12": 5, "g": 6}
        cells = [
            Cell((vid["c0"], vid["m02"], vid["m01"], vid["g"])),
            Cell((vid["c1"], vid["m01"], vid["m12"], vid["g"])),
            Cell((vid["c2"], vid["m12"], vid["m02"], vid["g"])),
        ]
        frozen = np.zeros(7, dtype=bool)
        frozen[:3] = True
        return MeshLevel(2, np.array(verts), cells, frozen=frozen)

    if d == 3:
        tet = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        coords = [tet[i] for i in range(4)]
        index = {("v", i): i for i in range(4)}
        pairs = [(i, j) for i in range(4) for j in range(i + 1, 4)]
        for i, j in pairs:
            index[("e", i, j)] = len(coords)
            coords.append(0.5 * (tet[i] + tet[j]))
        faces = [tuple(sorted(set(range(4)) - {i})) for i in range(4)]
        for f in sorted(set(faces)):
            index[("f",) + f] = len(coords)
            coords.append(tet[list(f)].mean(axis=0))
        index[("g",)] = len(coords)
        coords.append(tet.mean(axis=0))

        midpoint = {(i, i): tet[i] for i in range(4)}
        for i, j in pairs:
            midpoint[(i, j)] = midpoint[(j, i)] = 0.5 * (tet[i] + tet[j])

        def eid(i, j):
            return index[("e", min(i, j), max(i, j))]

        def fid(i, j, k):
            return index[("f",) + tuple(sorted((i, j, k)))]

        cells = []
        for corner in range(4):
            others = tuple(sorted(set(range(4)) - {corner}))
            j, k, l = _oriented_axes(corner, others, midpoint)
            # corners in tensor order (axis order j, k, l; last fastest)
            ids = (
                index[("v", corner)], eid(corner, l), eid(corner, k), fid(corner, k, l),
                eid(corner, j), fid(corner, j, l), fid(corner, j, k), index[("g",)],
            )
            cells.append(Cell(ids))
        frozen = np.zeros(len(coords), dtype=bool)
        frozen[:4] = True
        return MeshLevel(3, np.array(coords), cells, frozen=frozen)

    raise ValueError("d must be 2 or 3")


def distort(mesh: MeshLevel, delta: float, rng, freeze_boundary: bool = False) -> MeshLevel:
    """Displace movable vertices by ``delta`` times the local mesh size.

    Each movable vertex moves by exactly ``delta * h_local`` (h_local: minimum
    incident edge length before distortion) in a direction drawn uniformly on
    the unit sphere from ``rng``.  Frozen vertices never move; with
    ``freeze_boundary`` all boundary vertices are fixed as well.  Raises
    :class:`DegenerateMeshError` if any cell Jacobian becomes nonpositive, so
    the caller may resample.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    movable = ~mesh.frozen
    if freeze_boundary:
        movable &= ~mesh.boundary_vertex_mask()
    new_coords = mesh.vertices.copy()
    if delta > 0:
        h = mesh.min_incident_edge_length()
        for v in np.flatnonzero(movable):
            direction = rng.standard_normal(mesh.dim)
            norm = np.linalg.norm(direction)
            while norm < 1e-12:
                direction = rng.standard_normal(mesh.dim)
                norm = np.linalg.norm(direction)
            new_coords[v] += delta * h[v] * direction / norm
    out = MeshLevel(
        mesh.dim, new_coords,
        [Cell(c.vertices, c.mu, c.rho) for c in mesh.cells],
        parent_map=mesh.parent_map, frozen=mesh.frozen.copy(), check=False,
    )
    out.check_jacobians()
    return out


def _refine_once(coarse: MeshLevel) -> MeshLevel:
    d = coarse.dim
    corners = list(itertools.product((0, 1), repeat=d))
    new_coords = [c for c in coarse.vertices]
    lookup: dict[tuple, int] = {(v,): v for v in range(coarse.n_vertices)}

    def vertex_at(cell_verts, t):
        """Vertex at fractional tensor position t in {0, 1/2, 1}^d of a cell."""
        weights = []
        support = []
        for i, b in enumerate(corners):
            w = 1.0
            for k in range(d):
                w *= t[k] if b[k] else 1.0 - t[k]
            if w > 0:
                weights.append(w)
                support.append(cell_verts[i])
        key = tuple(sorted(support))
        if key in lookup:
            return lookup[key]
        pos = sum(w * coarse.vertices[v] for w, v in zip(weights, support))
        lookup[key] = len(new_coords)
        new_coords.append(pos)
        return lookup[key]

    cells = []
    parent = []
    for cid, cell in enumerate(coarse.cells):
        for child in itertools.product((0, 1), repeat=d):
            ids = []
            for b in corners:
                t = tuple((c + bb) / 2.0 for c, bb in zip(child, b))
                ids.append(vertex_at(cell.vertices, t))
            cells.append(Cell(tuple(ids), mu=cell.mu, rho=cell.rho))
            parent.append(cid)
    return MeshLevel(d, np.array(new_coords), cells, parent_map=np.array(parent))


def build_hierarchy(coarse: MeshLevel, L: int) -> MeshHierarchy:
    """Uniform 1:2^d refinement, L levels total (coarsest first)."""
    if L < 1:
        raise ValueError("L must be >= 1")
    levels = [coarse]
    for _ in range(L - 1):
        levels.append(_refine_once(levels[-1]))
    return MeshHierarchy(levels)


def set_viscosity_region(hier: MeshHierarchy, region: int, mu: float) -> None:
    """Set viscosity ``mu`` on a coarsest-level cell and all its descendants."""
    if not 0 <= region < hier.levels[0].n_cells:
        raise ValueError(f"invalid coarse cell id {region}")
    if mu <= 0:
        raise ValueError("mu must be positive")
    marked = {region}
    hier.levels[0].cells[region].mu = mu
    for level in hier.levels[1:]:
        marked = {c for c in range(level.n_cells) if level.parent_map[c] in marked}
        for c in marked:
            level.cells[c].mu = mu


def dump_mesh(mesh: MeshLevel) -> str:
    """Plain-text vertex/cell listing for debugging."""
    lines = [f"# dim {mesh.dim}  vertices {mesh.n_vertices}  cells {mesh.n_cells}"]
    for i, v in enumerate(mesh.vertices):
        lines.append(f"v {i} " + " ".join(f"{x:.17g}" for x in v))
    for i, c in enumerate(mesh.cells):
        lines.append(
            f"c {i} " + " ".join(str(v) for v in c.vertices)
            + f" mu={c.mu:.17g} rho={c.rho:.17g}"
        )
    return "\n".join(lines) + "\n"
