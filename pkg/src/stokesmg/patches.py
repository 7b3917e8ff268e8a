"""Vertex patches: index machinery and the multiplicative smoother sweep.

A patch is the cluster of cells around one interior vertex.  The local update
gathers the current solution on all patch DoFs, evaluates the residual on the
patch interior with the patch-local operator, solves approximately, and
scatter-adds the correction; a sweep processes patches sequentially so each
patch sees all previous updates.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .mesh import Cell, MeshLevel

__all__ = [
    "Patch",
    "PatchCore",
    "PatchSystem",
    "enumerate_patches",
    "extract_patch_system",
    "local_update",
    "smoother_sweep",
]


@dataclass(frozen=True)
class Patch:
    """One vertex patch: its center vertex and surrounding cell ids."""

    center_vertex: int
    cells: tuple[int, ...]


def enumerate_patches(mesh: MeshLevel) -> list[Patch]:
    """One patch per interior vertex, ordered lexicographically by coordinates.

    Ties (exactly equal coordinates) break by vertex id.
    """
    v2c = defaultdict(list)
    for cid, cell in enumerate(mesh.cells):
        for v in cell.vertices:
            v2c[v].append(cid)
    interior = mesh.interior_vertices()
    coords = mesh.vertices[interior]
    keys = [interior] + [coords[:, k] for k in range(mesh.dim - 1, -1, -1)]
    order = np.lexsort(keys)
    return [
        Patch(center_vertex=int(v), cells=tuple(sorted(v2c[int(v)])))
        for v in interior[order]
    ]


class PatchCore:
    """Geometry-dependent patch data, shareable between congruent patches.

    Holds the patch submesh, the constrained local operator (homogeneous
    Dirichlet velocity on the patch boundary, all patch pressure DoFs), and
    the interior-row slices used for on-the-fly residual evaluation.  Local
    solver objects attach themselves under ``solvers`` keyed by their config.
    """

    def __init__(self, submesh: MeshLevel, p: int, include_mass: bool):
        self.submesh = submesh
        self.p = p
        self.include_mass = include_mass
        self.op = fem.assemble(submesh, p, include_mass=include_mass)
        space = self.op.space.velocity
        self.n_scalar_full = space.n_dofs
        self.interior_scalars = self.op.unconstrained
        # interior velocity rows of the full local operator
        self.A_if_s = self.op.A_scalar_full[self.interior_scalars, :].tocsr()
        self.B_fullv = sp.hstack(self.op.B_full_comps, format="csr")
        self.solvers: dict = {}

    @property
    def n_interior(self) -> int:
        return self.op.dim


class PatchSystem:
    """A patch bound to its global index maps, sharing a PatchCore."""

    def __init__(self, patch: Patch, core: PatchCore, full_map_v, int_map_v, p_map):
        self.patch = patch
        self.core = core
        self.full_map_v = full_map_v  # local full velocity -> global index or -1
        self.int_map_v = int_map_v    # local interior velocity -> global index
        self.p_map = p_map            # local pressure -> global index
        self.int_map = np.concatenate([int_map_v, p_map])
        self.solver = None

    @property
    def op(self) -> fem.StokesOperator:
        return self.core.op

    def gather_full(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Current velocity on all patch DoFs (zeros on constrained slots)
        and pressure on all patch cells."""
        xe = np.append(x, 0.0)
        ubar = xe[self.full_map_v]
        pbar = x[self.p_map]
        return ubar, pbar

    def interior_residual(self, x: np.ndarray, b: np.ndarray) -> np.ndarray:
        """r_j = Pi_j b - Pi_j Abar_j ubar_j, pressure part patch-mean-zero."""
        core = self.core
        ubar, pbar = self.gather_full(x)
        d = core.submesh.dim
        ns = core.n_scalar_full
        ni = len(core.interior_scalars)
        ru = np.empty(d * ni)
        for c in range(d):
            ru[c * ni : (c + 1) * ni] = core.A_if_s @ ubar[c * ns : (c + 1) * ns]
        ru += core.op.Bt @ pbar
        rp = core.B_fullv @ ubar
        r = b[self.int_map] - np.concatenate([ru, rp])
        nu = d * ni
        r[nu:] = core.op.project_mean_zero(r[nu:])
        return r


class LocalSolveError(RuntimeError):
    """Local solver failure, tagged with the patch center vertex."""

    def __init__(self, patch: Patch, cause: Exception):
        self.patch = patch
        super().__init__(f"local solve failed on patch at vertex {patch.center_vertex}: {cause}")


def _submesh(mesh: MeshLevel, patch: Patch) -> MeshLevel:
    old_ids = sorted({v for c in patch.cells for v in mesh.cells[c].vertices})
    renum = {v: i for i, v in enumerate(old_ids)}
    cells = [
        Cell(tuple(renum[v] for v in mesh.cells[c].vertices),
             mu=mesh.cells[c].mu, rho=mesh.cells[c].rho)
        for c in patch.cells
    ]
    return MeshLevel(mesh.dim, mesh.vertices[old_ids], cells, check=False)


def geometry_signature(mesh: MeshLevel, patch: Patch, p: int, include_mass: bool):
    """Congruence-class key: patch shape relative to its center, degree, coefficients.

    Congruent (translated) patches share assembled operators and solver data.
    """
    center = mesh.vertices[patch.center_vertex]
    sig = [p, include_mass, mesh.dim]
    for c in patch.cells:
        cell = mesh.cells[c]
        rel = mesh.vertices[list(cell.vertices)] - center
        sig.append((tuple(np.round(rel, 12).ravel()), round(cell.mu, 12), round(cell.rho, 12)))
    return tuple(sig)


def extract_patch_system(
    mesh: MeshLevel,
    patch: Patch,
    p: int,
    global_op: fem.StokesOperator,
    include_mass: bool = False,
    core_cache: dict | None = None,
) -> PatchSystem:
    """Assemble (or reuse) the patch-local system and build its global maps."""
    core = None
    key = None
    if core_cache is not None:
        key = geometry_signature(mesh, patch, p, include_mass)
        core = core_cache.get(key)
    if core is None:
        core = PatchCore(_submesh(mesh, patch), p, include_mass)
        if core_cache is not None:
            core_cache[key] = core

    gspace = global_op.space.velocity
    lspace = core.op.space.velocity
    loc2glob = np.full(core.n_scalar_full, -1, dtype=np.int64)
    for ci, cid in enumerate(patch.cells):
        loc2glob[lspace.cell_dofs[ci]] = gspace.cell_dofs[cid]
    if np.any(loc2glob < 0):
        raise RuntimeError("patch scalar map incomplete")

    r_of_scalar = np.full(gspace.n_dofs, -1, dtype=np.int64)
    r_of_scalar[global_op.unconstrained] = np.arange(global_op.n_scalar)

    d = mesh.dim
    niu = global_op.n_scalar
    glob_r = r_of_scalar[loc2glob]
    full_map_v = np.concatenate(
        [np.where(glob_r >= 0, glob_r + c * niu, -1) for c in range(d)]
    )
    int_r = glob_r[core.interior_scalars]
    if np.any(int_r < 0):
        raise RuntimeError("patch-interior node constrained globally")
    int_map_v = np.concatenate([int_r + c * niu for c in range(d)])

    npb = global_op.Mp_blocks.shape[1]
    p_map = np.concatenate(
        [global_op.n_u + cid * npb + np.arange(npb) for cid in patch.cells]
    )
    return PatchSystem(patch, core, full_map_v, int_map_v, p_map)


def local_update(system: PatchSystem, u: np.ndarray, b: np.ndarray, solver=None) -> np.ndarray:
    """One patch update: gather, evaluate, solve, scatter.

    Returns the global-length correction Pi_j^T d_j (zeros off-patch).
    """
    solver = solver if solver is not None else system.solver
    r = system.interior_residual(u, b)
    try:
        d = solver.apply(r)
    except Exception as exc:  # attach the failing patch
        raise LocalSolveError(system.patch, exc) from exc
    out = np.zeros_like(u)
    out[system.int_map] += d
    return out


def smoother_sweep(u, b, systems, solver=None, reverse=False):
    """Multiplicative (Gauss-Seidel-like) sweep over the patches.

    Sequential by construction: each local residual sees all previous
    corrections of the same sweep.  Returns the updated vector.
    """
    u = u.copy()
    order = reversed(systems) if reverse else systems
    for system in order:
        slv = solver if solver is not None else system.solver
        r = system.interior_residual(u, b)
        try:
            d = slv.apply(r)
        except Exception as exc:
            raise LocalSolveError(system.patch, exc) from exc
        u[system.int_map] += d
    return u
