"""Mixed Q_p / discontinuous P_{p-1} discretization of the Stokes system.

Velocity: continuous nodal Lagrange elements on Gauss-Lobatto points, one
scalar space shared by the d components (component-major vector layout).
Pressure: discontinuous total-degree Legendre basis on the reference cell,
mapped by pullback.  Assembly uses tensor Gauss quadrature with p+1 points
per direction, and homogeneous Dirichlet velocity constraints are eliminated
symmetrically (constrained rows/columns dropped).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np
import scipy.sparse as sp

from . import kron
from .mesh import DegenerateMeshError, MeshLevel

__all__ = [
    "ScalarSpace",
    "PressureBasis",
    "SpacePair",
    "StokesOperator",
    "MeanConstraint",
    "OpCounters",
    "assemble",
    "dump_operator",
]


@dataclass
class OpCounters:
    """Operator application counters.

    ``n_A`` counts applications of the velocity block A.  ``n_B`` counts
    applications of the divergence block B; every B^T application in the
    solvers pairs one-for-one with a B application and is not counted
    separately, so n_B matches the per-cycle cost accounting N_B = 4m+1.
    """

    n_A: int = 0
    n_B: int = 0

    def snapshot(self):
        return (self.n_A, self.n_B)

    def reset(self):
        self.n_A = 0
        self.n_B = 0


# --------------------------------------------------------------------------
# scalar Q_p space


@lru_cache(maxsize=None)
def _local_multi_indices(p: int, d: int) -> np.ndarray:
    return np.array(list(np.ndindex(*(p + 1,) * d)))


@lru_cache(maxsize=None)
def _reference_nodes(p: int, d: int) -> np.ndarray:
    gll = kron.gauss_lobatto_nodes(p)
    return gll[_local_multi_indices(p, d)]


def _canonical_face(q00, q10, q01, q11, s, t, p):
    """Canonical key for a 3D face node under the 8 square symmetries.

    The face corner ids at local (s, t) extremes are given; returns the
    lexicographically smallest corner stamp together with the transformed
    local index, identical from every adjacent cell.
    """
    best = None
    for swap in (False, True):
        a, b = (t, s) if swap else (s, t)
        Q = np.array([[q00, q01], [q10, q11]])
        if swap:
            Q = Q.T
        for fs in (False, True):
            a2 = p - a if fs else a
            Qs = Q[::-1, :] if fs else Q
            for ft in (False, True):
                b2 = p - b if ft else b
                Qf = Qs[:, ::-1] if ft else Qs
                stamp = (int(Qf[0, 0]), int(Qf[1, 0]), int(Qf[0, 1]), int(Qf[1, 1]))
                cand = (stamp, (a2, b2))
                if best is None or cand[0] < best[0]:
                    best = cand
    return best


class ScalarSpace:
    """Continuous nodal Q_p space on a mesh level (single component).

    Shared nodes on vertices, edges and (in 3D) faces are identified
    topologically, with edge directions and face orientations canonicalized
    by vertex-id order so that adjacent cells agree.
    """

    def __init__(self, mesh: MeshLevel, p: int):
        if p < 1:
            raise ValueError("p must be >= 1")
        self.mesh = mesh
        self.p = p
        d = mesh.dim
        multi = _local_multi_indices(p, d)
        nloc = len(multi)
        corner_bits = list(itertools.product((0, 1), repeat=d))
        corner_pos = {b: i for i, b in enumerate(corner_bits)}

        key_to_id: dict = {}
        cell_dofs = np.empty((mesh.n_cells, nloc), dtype=np.int64)
        coords: list = []
        ref = _reference_nodes(p, d)

        for cid, cell in enumerate(mesh.cells):
            verts = cell.vertices
            phys = mesh.map_points(cid, ref)
            for li in range(nloc):
                mi = multi[li]
                free = [k for k in range(d) if 0 < mi[k] < p]
                bits = tuple(1 if mi[k] == p else 0 for k in range(d))
                if not free:
                    key = ("v", verts[corner_pos[bits]])
                elif len(free) == 1:
                    k = free[0]
                    b0 = list(bits)
                    b0[k] = 0
                    b1 = list(bits)
                    b1[k] = 1
                    e0 = verts[corner_pos[tuple(b0)]]
                    e1 = verts[corner_pos[tuple(b1)]]
                    t = int(mi[k])
                    if e0 <= e1:
                        key = ("e", e0, e1, t)
                    else:
                        key = ("e", e1, e0, p - t)
                elif len(free) == 2 and d == 3:
                    k1, k2 = free
                    fixed = [k for k in range(d) if k not in free][0]

                    def corner(sb, tb):
                        b = [0] * d
                        b[fixed] = bits[fixed]
                        b[k1] = sb
                        b[k2] = tb
                        return verts[corner_pos[tuple(b)]]

                    stamp, (a, b) = _canonical_face(
                        corner(0, 0), corner(1, 0), corner(0, 1), corner(1, 1),
                        int(mi[k1]), int(mi[k2]), p,
                    )
                    key = ("f", stamp, a, b)
                else:
                    key = ("c", cid, tuple(int(x) for x in mi))
                dof = key_to_id.get(key)
                if dof is None:
                    dof = len(key_to_id)
                    key_to_id[key] = dof
                    coords.append(phys[li])
                cell_dofs[cid, li] = dof

        self.cell_dofs = cell_dofs
        self.n_dofs = len(key_to_id)
        self.node_coords = np.array(coords)

        boundary = np.zeros(self.n_dofs, dtype=bool)
        bfacets = mesh.boundary_facets()
        for cid in range(mesh.n_cells):
            facets = mesh.cell_facets(cid)
            fi = 0
            for axis in range(d):
                for extreme in (0, 1):
                    if facets[fi] in bfacets:
                        on = multi[:, axis] == (p if extreme else 0)
                        boundary[cell_dofs[cid, on]] = True
                    fi += 1
        self.boundary_mask = boundary


# --------------------------------------------------------------------------
# discontinuous pressure basis


class PressureBasis:
    """Shifted-Legendre basis of total degree <= ``degree`` on [0,1]^d.

    Graded ordering (by total degree, then lexicographic), so the basis of a
    lower degree is an exact prefix of a higher one; the constant mode is the
    first function and has value one everywhere.
    """

    def __init__(self, d: int, degree: int):
        if degree < 0:
            raise ValueError("degree must be >= 0")
        self.d = d
        self.degree = degree
        multis = [
            m
            for m in itertools.product(range(degree + 1), repeat=d)
            if sum(m) <= degree
        ]
        self.indices = sorted(multis, key=lambda m: (sum(m), m))
        self.n = len(self.indices)
        assert self.n == comb(degree + d, d)

    def eval(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        vander = [
            np.polynomial.legendre.legvander(2.0 * points[:, k] - 1.0, self.degree)
            for k in range(self.d)
        ]
        out = np.ones((points.shape[0], self.n))
        for j, m in enumerate(self.indices):
            for k in range(self.d):
                out[:, j] *= vander[k][:, m[k]]
        return out


@dataclass
class SpacePair:
    """Velocity/pressure space pair with the Dirichlet velocity mask."""

    velocity: ScalarSpace
    pressure: PressureBasis
    dirichlet_mask: np.ndarray  # per scalar node

    @property
    def p(self):
        return self.velocity.p


@dataclass
class MeanConstraint:
    """Weights of the mean-value functional on the pressure space."""

    weights: np.ndarray
    const_coeffs: np.ndarray  # coefficient vector of pressure == 1

    @property
    def measure(self):
        return float(self.weights @ self.const_coeffs)

    def project_mean_zero(self, p_vec: np.ndarray) -> np.ndarray:
        """Remove the constant pressure component: output has zero mean."""
        scale = (self.weights @ p_vec) / self.measure
        return p_vec - scale * self.const_coeffs


# --------------------------------------------------------------------------
# Stokes block operator


class StokesOperator:
    """Assembled block system {A, B, B^T} on the unconstrained DoFs.

    Vector layout: x = [u_0, ..., u_{d-1}, p] with each velocity component
    over the unconstrained scalar nodes.  ``apply_block`` computes
    (A u + B^T p, B u) and feeds the operator counters.
    """

    def __init__(self, mesh, space, A_scalar_full, B_full_comps, Mp_blocks, weights):
        self.mesh = mesh
        self.space = space
        self.d = mesh.dim
        self.A_scalar_full = A_scalar_full
        self.B_full_comps = B_full_comps

        iu = np.flatnonzero(~space.dirichlet_mask)
        self.unconstrained = iu
        self.n_scalar = len(iu)
        self.n_u = self.d * self.n_scalar
        self.n_p = B_full_comps[0].shape[0]
        self.dim = self.n_u + self.n_p

        self.A_s = A_scalar_full[iu][:, iu].tocsr()
        self.B = sp.hstack([Bc[:, iu] for Bc in B_full_comps], format="csr")
        self.Bt = self.B.T.tocsr()
        self.Mp_blocks = Mp_blocks
        self._Mp_chol = None

        const = np.zeros(self.n_p)
        const[0 :: Mp_blocks.shape[1]] = 1.0
        self.mean = MeanConstraint(weights=weights, const_coeffs=const)
        self.counters = OpCounters()
        self._A_cache = None

    # -- matrices ---------------------------------------------------------

    @property
    def A(self) -> sp.csr_matrix:
        """Velocity block over all d components (block diagonal in A_s)."""
        if self._A_cache is None:
            self._A_cache = sp.block_diag([self.A_s] * self.d, format="csr")
        return self._A_cache

    def block_matrix(self) -> sp.csr_matrix:
        """Full saddle matrix [[A, B^T], [B, 0]] (for dense checks)."""
        return sp.bmat([[self.A, self.Bt], [self.B, None]], format="csr")

    # -- vector layout ----------------------------------------------------

    def split(self, x):
        return x[: self.n_u], x[self.n_u :]

    def join(self, u, p):
        return np.concatenate([u, p])

    # -- counted applications ----------------------------------------------

    def apply_A(self, u: np.ndarray) -> np.ndarray:
        self.counters.n_A += 1
        out = np.empty_like(u)
        n = self.n_scalar
        for c in range(self.d):
            out[c * n : (c + 1) * n] = self.A_s @ u[c * n : (c + 1) * n]
        return out

    def apply_B(self, u: np.ndarray) -> np.ndarray:
        self.counters.n_B += 1
        return self.B @ u

    def apply_Bt(self, p: np.ndarray) -> np.ndarray:
        # adjoint of a counted B application; the pair counts once via apply_B
        return self.Bt @ p

    def apply_block(self, x: np.ndarray) -> np.ndarray:
        if x.shape != (self.dim,):
            raise ValueError(f"expected block vector of length {self.dim}")
        u, p = self.split(x)
        ru = self.apply_A(u)
        ru += self.Bt @ p
        rp = self.apply_B(u)
        return self.join(ru, rp)

    # -- pressure mass ------------------------------------------------------

    def pressure_mass_apply(self, r_p: np.ndarray) -> np.ndarray:
        nb = self.Mp_blocks.shape[1]
        return np.einsum(
            "cij,cj->ci", self.Mp_blocks, r_p.reshape(-1, nb)
        ).reshape(-1)

    def pressure_mass_inverse(self, r_p: np.ndarray) -> np.ndarray:
        """Exact solve with the block-diagonal (per-cell) pressure mass matrix."""
        if self._Mp_chol is None:
            try:
                self._Mp_chol = np.linalg.cholesky(self.Mp_blocks)
            except np.linalg.LinAlgError as exc:
                raise RuntimeError("singular pressure mass block") from exc
        nb = self.Mp_blocks.shape[1]
        rhs = r_p.reshape(-1, nb)
        L = self._Mp_chol
        y = np.linalg.solve(L, rhs[..., None]).squeeze(-1)
        x = np.linalg.solve(np.transpose(L, (0, 2, 1)), y[..., None]).squeeze(-1)
        return x.reshape(-1)

    def project_mean_zero(self, p_vec: np.ndarray) -> np.ndarray:
        return self.mean.project_mean_zero(p_vec)


# --------------------------------------------------------------------------
# assembly


@lru_cache(maxsize=None)
def _velocity_tables(p: int, d: int):
    """Value/gradient tables of the Q_p basis at tensor Gauss points."""
    x1, w1 = kron.gauss_quadrature(p + 1)
    gll = kron.gauss_lobatto_nodes(p)
    V1 = kron.lagrange_values(gll, x1)
    D1 = kron.lagrange_derivatives(gll, x1)
    qmulti = _local_multi_indices(p, d)  # also indexes tensor quad points
    nq = len(qmulti)
    nloc = nq
    V = np.ones((nq, nloc))
    G = np.ones((nq, nloc, d))
    for k in range(d):
        # value/derivative along axis k of node j at tensor point q
        Vax = V1[np.ix_(qmulti[:, k], qmulti[:, k])]
        Dax = D1[np.ix_(qmulti[:, k], qmulti[:, k])]
        V *= Vax
        for a in range(d):
            G[:, :, a] *= Dax if a == k else Vax
    w = np.ones(nq)
    for k in range(d):
        w *= w1[qmulti[:, k]]
    qpoints = kron.gauss_quadrature(p + 1)[0][qmulti]
    return qpoints, w, V, G


def assemble(mesh: MeshLevel, p: int, include_mass: bool = False) -> StokesOperator:
    """Assemble the Stokes block operator on a mesh level.

    A carries the per-cell viscosity-weighted grad-grad form plus, when
    ``include_mass`` is set, the per-cell rho-weighted velocity mass.  The
    divergence rows are B[k, (c, j)] = -int q_k d_c phi_j, so the assembled
    block matrix [[A, B^T], [B, 0]] is symmetric.
    """
    if p < 2:
        raise ValueError("the mixed pair needs p >= 2")
    d = mesh.dim
    space = ScalarSpace(mesh, p)
    pbasis = PressureBasis(d, p - 1)
    qpoints, wq, V, G = _velocity_tables(p, d)
    P = pbasis.eval(qpoints)
    npb = pbasis.n
    nloc = V.shape[1]

    rows_A, cols_A, vals_A = [], [], []
    rows_B = [[] for _ in range(d)]
    cols_B = [[] for _ in range(d)]
    vals_B = [[] for _ in range(d)]
    Mp_blocks = np.empty((mesh.n_cells, npb, npb))
    weights = np.empty(mesh.n_cells * npb)

    for cid, cell in enumerate(mesh.cells):
        J, det = mesh.jacobians(cid, qpoints)
        if np.any(det <= 0):
            raise DegenerateMeshError([cid], "during assembly")
        Jinv = np.linalg.inv(J)
        wdet = wq * det
        Gphys = np.einsum("qib,qba->qia", G, Jinv)

        Gw = Gphys * (cell.mu * wdet)[:, None, None]
        K = np.tensordot(Gphys, Gw, axes=([0, 2], [0, 2]))
        if include_mass and cell.rho != 0.0:
            K = K + cell.rho * (V.T @ (V * wdet[:, None]))

        dofs = space.cell_dofs[cid]
        rows_A.append(np.repeat(dofs, nloc))
        cols_A.append(np.tile(dofs, nloc))
        vals_A.append(K.reshape(-1))

        Pw = P * wdet[:, None]
        pr = cid * npb + np.arange(npb)
        for c in range(d):
            Bc = -(Pw.T @ Gphys[:, :, c])
            rows_B[c].append(np.repeat(pr, nloc))
            cols_B[c].append(np.tile(dofs, npb))
            vals_B[c].append(Bc.reshape(-1))

        Mp_blocks[cid] = P.T @ Pw
        weights[pr] = Pw.sum(axis=0)

    ns = space.n_dofs
    n_p = mesh.n_cells * npb
    A_full = sp.coo_matrix(
        (np.concatenate(vals_A), (np.concatenate(rows_A), np.concatenate(cols_A))),
        shape=(ns, ns),
    ).tocsr()
    B_comps = []
    for c in range(d):
        B_comps.append(
            sp.coo_matrix(
                (
                    np.concatenate(vals_B[c]),
                    (np.concatenate(rows_B[c]), np.concatenate(cols_B[c])),
                ),
                shape=(n_p, ns),
            ).tocsc()
        )

    pair = SpacePair(velocity=space, pressure=pbasis, dirichlet_mask=space.boundary_mask)
    return StokesOperator(mesh, pair, A_full, B_comps, Mp_blocks, weights)


def dump_operator(op: StokesOperator) -> str:
    """Coordinate-format (row, col, value) dump of the assembled blocks."""
    lines = [f"# stokes operator  n_u {op.n_u}  n_p {op.n_p}"]
    for name, M in (("A", op.A), ("B", op.B)):
        C = M.tocoo()
        lines.append(f"# block {name} shape {C.shape[0]} {C.shape[1]} nnz {C.nnz}")
        for r, c, v in zip(C.row, C.col, C.data):
            lines.append(f"{name} {r} {c} {v:.17g}")
    return "\n".join(lines) + "\n"
