"""Local patch solvers: p-multigrid with Braess-Sarazin smoothing and friends.

The patch problem is solved by a V-cycle over a hierarchy of polynomial
degrees 1, 3, 7, ... (doubling-plus-one, capped at the target degree).  On
levels with degree > 1 the smoother is a Braess-Sarazin step: damped-Jacobi
velocity approximation, an inexact inner solve of the diagonal-preconditioned
Schur system (Richardson with autotuned relaxation, or CG), and a velocity
update.  The coarsest level has an empty pressure space and is solved exactly
for the velocity alone.

Alternative local solvers share the infrastructure: a symmetric block
preconditioner using the velocity-only p-multigrid (or an exact velocity
inverse) with a pressure-mass Schur approximation, and a blockwise Schur
elimination with fast-diagonalization velocity inverses on Cartesian patches.
Closed-form dense materializations of the smoother and the V-cycle are
provided for equivalence checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import reduce

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem, kron, krylov
from .fem import OpCounters
from .mesh import MeshLevel
from .patches import PatchCore

__all__ = [
    "BSConfig",
    "LocalSolverConfig",
    "PHierarchy",
    "degree_ladder",
    "build_p_hierarchy",
    "bs_smooth",
    "p_vcycle",
    "local_solve_richardson",
    "block_preconditioner_apply",
    "local_block_gmres",
    "blockwise_elimination",
    "FDMSolver",
    "eig_estimate",
    "closed_form_bs_inverse",
    "closed_form_vcycle",
    "make_local_solver",
    "counter_snapshots",
]

AUTOTUNE_SEED = 0x5EED
AUTOTUNE_STEPS = 10


@dataclass(frozen=True)
class BSConfig:
    """Braess-Sarazin smoother configuration.

    ``omega`` damps the Jacobi velocity approximation (A~^{-1} = omega
    diag(A)^{-1}); the Schur system S = B A~^{-1} B^T is solved with ``n_s``
    steps of the chosen inner solver, preconditioned by diag(S)^{-1} (the
    Richardson relaxation is autotuned from an eigenvalue estimate).
    ``m`` smoothing steps are applied per level; ``half_cycle`` drops the
    post-smoothing of the V-cycle.
    """

    m: int = 1
    omega: float = 0.7
    schur_solver: str = "richardson"  # or "cg"
    n_s: int = 1
    half_cycle: bool = False

    def __post_init__(self):
        if self.m not in (1, 2):
            raise ValueError("m must be 1 or 2")
        if self.n_s < 1:
            raise ValueError("n_s must be >= 1")
        if not 0 < self.omega <= 1:
            raise ValueError("omega must be in (0, 1]")
        if self.schur_solver not in ("richardson", "cg"):
            raise ValueError("schur_solver must be 'richardson' or 'cg'")


@dataclass(frozen=True)
class LocalSolverConfig:
    """Which local solver runs on each patch, and how often.

    ``n_mg`` is the number of local iterations (V-cycles / preconditioner
    applications) of the local Richardson wrapper.  ``n_v`` is the number of
    velocity V-cycles inside the block preconditioner.  The Schur CG knobs
    apply to the blockwise elimination variant only.
    """

    variant: str = "bs_pmg"  # bs_pmg | block_mg | blockwise_fdm | exact_dense
    n_mg: int = 1
    bs: BSConfig = field(default_factory=BSConfig)
    vel_inverse: str = "pmg"  # pmg | exact (block_mg variant)
    n_v: int = 1
    schur_cg_tol: float = 0.3
    schur_cg_maxit: int = 50

    def __post_init__(self):
        if self.variant not in ("bs_pmg", "block_mg", "blockwise_fdm", "exact_dense"):
            raise ValueError(f"unknown local solver variant {self.variant!r}")
        if self.n_mg < 1:
            raise ValueError("n_mg must be >= 1")
        if self.vel_inverse not in ("pmg", "exact"):
            raise ValueError("vel_inverse must be 'pmg' or 'exact'")


def degree_ladder(target_p: int) -> tuple[int, ...]:
    """Degrees 1, 3, 7, ... (p_{k+1} = 2 p_k + 1), capped at the target."""
    if target_p < 2:
        raise ValueError("target degree must be >= 2")
    ladder = [1]
    while 2 * ladder[-1] + 1 < target_p:
        ladder.append(2 * ladder[-1] + 1)
    ladder.append(target_p)
    return tuple(ladder)


# --------------------------------------------------------------------------
# velocity-only degree-1 coarse level


class CoarseVelocityLevel:
    """Exact velocity solve on the degree-1 space (empty pressure)."""

    def __init__(self, submesh: MeshLevel, include_mass: bool):
        space = fem.ScalarSpace(submesh, 1)
        A_s, _ = _assemble_scalar(submesh, 1, include_mass)
        iu = np.flatnonzero(~space.boundary_mask)
        A_int = A_s[iu][:, iu].toarray()
        d = submesh.dim
        self.degree = 1
        self.n_scalar = len(iu)
        self.n_u = d * self.n_scalar
        self.n_p = 0
        self.dim = self.n_u
        self.space = space
        self.unconstrained = iu
        self._inv = np.linalg.inv(A_int)
        self.velocity_only = True

    def solve(self, r: np.ndarray) -> np.ndarray:
        n = self.n_scalar
        out = np.empty_like(r)
        for c in range(r.size // n):
            out[c * n : (c + 1) * n] = self._inv @ r[c * n : (c + 1) * n]
        return out


def _assemble_scalar(mesh: MeshLevel, p: int, include_mass: bool):
    """Scalar stiffness (+ rho mass) with per-cell coefficients; full space."""
    space = fem.ScalarSpace(mesh, p)
    qpoints, wq, V, G = fem._velocity_tables(p, mesh.dim)
    rows, cols, vals = [], [], []
    nloc = V.shape[1]
    for cid, cell in enumerate(mesh.cells):
        J, det = mesh.jacobians(cid, qpoints)
        Jinv = np.linalg.inv(J)
        wdet = wq * det
        Gphys = np.einsum("qib,qba->qia", G, Jinv)
        K = np.tensordot(Gphys, Gphys * (cell.mu * wdet)[:, None, None], axes=([0, 2], [0, 2]))
        if include_mass and cell.rho != 0.0:
            K = K + cell.rho * (V.T @ (V * wdet[:, None]))
        dofs = space.cell_dofs[cid]
        rows.append(np.repeat(dofs, nloc))
        cols.append(np.tile(dofs, nloc))
        vals.append(K.reshape(-1))
    n = space.n_dofs
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    return A, space


# --------------------------------------------------------------------------
# p-multigrid levels


class PLevel:
    """One p-multigrid level above the coarse space."""

    def __init__(self, op: fem.StokesOperator, velocity_only: bool,
                 P_vel: sp.csr_matrix, coarse_n_scalar: int, coarse_n_pb: int):
        self.op = op
        self.degree = op.space.p
        self.velocity_only = velocity_only
        self.P_vel = P_vel
        self.R_vel = P_vel.T.tocsr()
        self.coarse_n_scalar = coarse_n_scalar
        self.coarse_n_pb = coarse_n_pb  # pressure prefix length per cell below
        self.n_pb = op.Mp_blocks.shape[1]
        self.n_u = op.n_u
        self.n_p = 0 if velocity_only else op.n_p
        self.dim = self.n_u + self.n_p

        diag_s = op.A_s.diagonal()
        self.diagA = np.tile(diag_s, op.d)
        if velocity_only:
            self.diagS_unit = None
            self.omega_s = None
        else:
            B2 = op.B.copy()
            B2.data = B2.data**2
            self.diagS_unit = np.asarray(B2 @ (1.0 / self.diagA)).ravel()
            self.omega_s = None  # autotuned later

    # -- counted block application -----------------------------------------

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.velocity_only:
            return self.op.apply_A(x)
        return self.op.apply_block(x)

    def diag_schur(self, omega_a: float) -> np.ndarray:
        return omega_a * self.diagS_unit

    def schur_apply(self, omega_a: float, x: np.ndarray) -> np.ndarray:
        return self.op.apply_B(omega_a * self.op.apply_Bt(x) / self.diagA)

    # -- transfers -----------------------------------------------------------

    def restrict(self, r: np.ndarray, coarse_velocity_only: bool) -> np.ndarray:
        op = self.op
        ru = r[: self.n_u]
        n = op.n_scalar
        nc = self.coarse_n_scalar
        out_u = np.empty(op.d * nc)
        for c in range(op.d):
            out_u[c * nc : (c + 1) * nc] = self.R_vel @ ru[c * n : (c + 1) * n]
        if coarse_velocity_only or self.velocity_only:
            return out_u
        rp = r[self.n_u :].reshape(-1, self.n_pb)
        return np.concatenate([out_u, rp[:, : self.coarse_n_pb].reshape(-1)])

    def prolong(self, e: np.ndarray, coarse_velocity_only: bool) -> np.ndarray:
        op = self.op
        n = op.n_scalar
        nc = self.coarse_n_scalar
        out = np.zeros(self.dim)
        for c in range(op.d):
            out[c * n : (c + 1) * n] = self.P_vel @ e[c * nc : (c + 1) * nc]
        if not (coarse_velocity_only or self.velocity_only):
            ep = e[op.d * nc :].reshape(-1, self.coarse_n_pb)
            out_p = out[self.n_u :].reshape(-1, self.n_pb)
            out_p[:, : self.coarse_n_pb] = ep
        return out


@dataclass
class PHierarchy:
    """Per-patch p-multigrid data: coarse level first."""

    levels: list
    velocity_only: bool

    @property
    def top(self) -> PLevel:
        return self.levels[-1]

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(lv.degree for lv in self.levels)


def _scalar_embedding(space_c: fem.ScalarSpace, space_f: fem.ScalarSpace) -> sp.csr_matrix:
    """Nodal embedding between Q_p spaces on the same mesh (full nodes)."""
    d = space_c.mesh.dim
    E1 = kron.embedding_1d(space_c.p, space_f.p)
    Eloc = reduce(np.kron, [E1] * d)
    rows, cols, vals = [], [], []
    for ci in range(space_c.mesh.n_cells):
        rows.append(np.repeat(space_f.cell_dofs[ci], Eloc.shape[1]))
        cols.append(np.tile(space_c.cell_dofs[ci], Eloc.shape[0]))
        vals.append(Eloc.reshape(-1))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    lin = rows * space_c.n_dofs + cols
    _, first = np.unique(lin, return_index=True)
    return sp.coo_matrix(
        (vals[first], (rows[first], cols[first])),
        shape=(space_f.n_dofs, space_c.n_dofs),
    ).tocsr()


def build_p_hierarchy(
    core: PatchCore,
    *,
    velocity_only: bool = False,
    omega: float = 0.7,
    autotune: bool = True,
) -> PHierarchy:
    """Assemble the degree ladder, transfers and smoother data for a patch.

    The operators at the target degree reuse the patch core's assembly; lower
    degrees are re-discretized on the patch geometry.  The coarsest level
    (degree 1) carries the velocity space only.  With ``velocity_only`` the
    whole hierarchy acts on the velocity block alone (block preconditioners).
    """
    ladder = degree_ladder(core.p)
    coarse = _cached(core, ("coarse",),
                     lambda: CoarseVelocityLevel(core.submesh, core.include_mass))
    levels: list = [coarse]
    prev_space = coarse.space
    prev_iu = coarse.unconstrained
    prev_npb = 0
    for q in ladder[1:]:
        op = _cached(core, ("levelop", q),
                     lambda: fem.assemble(core.submesh, q, include_mass=core.include_mass)
                     if q != core.p else core.op)
        space = op.space.velocity
        P_int = _cached(
            core, ("embed", prev_space.p, q),
            lambda: _scalar_embedding(prev_space, space)[op.unconstrained][:, prev_iu].tocsr(),
        )
        level = PLevel(op, velocity_only, P_int, len(prev_iu), prev_npb)
        levels.append(level)
        prev_space, prev_iu, prev_npb = space, op.unconstrained, level.n_pb

    h = PHierarchy(levels=levels, velocity_only=velocity_only)
    if not velocity_only and autotune:
        for k, level in enumerate(levels[1:], start=1):
            d_s = level.diag_schur(omega)
            lam = eig_estimate(
                lambda x: level.schur_apply(omega, x),
                lambda x: x / d_s,
                steps=AUTOTUNE_STEPS,
                seed=AUTOTUNE_SEED + k,
                n=level.op.n_p,
            )
            level.omega_s = 1.0 / lam
    return h


# --------------------------------------------------------------------------
# Braess-Sarazin smoothing and the V-cycle


def bs_smooth(level: PLevel, r: np.ndarray, cfg: BSConfig) -> np.ndarray:
    """One Braess-Sarazin step: velocity Jacobi, inexact Schur solve, update.

    On velocity-only levels this degenerates to the damped Jacobi step.
    With the Richardson inner solver the result is a fixed linear operator;
    with CG it is not (the outer Krylov method must be flexible).
    """
    op = level.op
    omega = cfg.omega
    if level.velocity_only:
        return omega * r / level.diagA
    nu = level.n_u
    ru, rp = r[:nu], r[nu:]
    du1 = omega * ru / level.diagA
    rhs = op.apply_B(du1) - rp
    diag_s = level.diag_schur(omega)
    if cfg.schur_solver == "richardson":
        omega_s = level.omega_s if level.omega_s is not None else 1.0
        dp = krylov.richardson(
            lambda x: level.schur_apply(omega, x),
            lambda x: x / diag_s,
            rhs,
            n_steps=cfg.n_s,
            omega=omega_s,
        )
    else:
        dp, _ = krylov.cg(
            lambda x: level.schur_apply(omega, x),
            lambda x: x / diag_s,
            rhs,
            fixed_iterations=cfg.n_s,
        )
    du = du1 - omega * op.apply_Bt(dp) / level.diagA
    return np.concatenate([du, dp])


def p_vcycle(h: PHierarchy, k: int, r: np.ndarray, cfg: BSConfig) -> np.ndarray:
    """V-cycle on level k (0 = exact coarse velocity solve).

    Each of the m pre/post smoothing steps evaluates the level operator for
    the current residual, the defect is restricted, the coarse correction
    prolongated and added, and post-smoothing is skipped in half-cycle mode.
    Restriction to the coarsest level keeps the velocity only; prolongated
    coarse corrections carry a zero pressure increment.
    """
    level = h.levels[k]
    if k == 0:
        return level.solve(r)
    d = np.zeros_like(r)
    for _ in range(cfg.m):
        res = r - level.apply(d)
        d += bs_smooth(level, res, cfg)
    res = r - level.apply(d)
    rc = level.restrict(res, coarse_velocity_only=(k - 1 == 0))
    ec = p_vcycle(h, k - 1, rc, cfg)
    d += level.prolong(ec, coarse_velocity_only=(k - 1 == 0))
    if not cfg.half_cycle:
        for _ in range(cfg.m):
            res = r - level.apply(d)
            d += bs_smooth(level, res, cfg)
    return d


def local_solve_richardson(h: PHierarchy, r: np.ndarray, n_iter: int, cfg: BSConfig) -> np.ndarray:
    """Local preconditioned Richardson: V-cycle first, then defect corrections.

    The first iteration applies no operator (zero initial correction).
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    top = len(h.levels) - 1
    d = p_vcycle(h, top, r, cfg)
    for _ in range(n_iter - 1):
        res = r - h.top.apply(d)
        d += p_vcycle(h, top, res, cfg)
    return d


def counter_snapshots(h: PHierarchy):
    """(degree, n_A, n_B) per level, coarse level excluded (exact solve)."""
    return [(lv.degree, lv.op.counters.n_A, lv.op.counters.n_B) for lv in h.levels[1:]]


# --------------------------------------------------------------------------
# eigenvalue estimation (autotuning)


def eig_estimate(op, precond, steps: int, seed: int, n: int) -> float:
    """Power iteration on precond o op; Rayleigh-quotient estimate of lambda_max."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    apply_op = op if callable(op) else (lambda x: op @ x)
    apply_pc = precond if callable(precond) else (lambda x: precond @ x)
    rng = np.random.default_rng(seed)
    for _ in range(3):
        x = rng.standard_normal(n)
        nx = np.linalg.norm(x)
        if nx > 0:
            x /= nx
            break
    else:
        raise RuntimeError("could not draw a nonzero start vector")
    lam = 1.0
    for _ in range(steps):
        y = apply_pc(apply_op(x))
        lam = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            for _ in range(3):
                x = rng.standard_normal(n)
                nx = np.linalg.norm(x)
                if nx > 0:
                    x /= nx
                    break
            else:
                raise RuntimeError("power iteration collapsed to zero")
            continue
        x = y / ny
    return lam


# --------------------------------------------------------------------------
# closed forms (appendix equivalence)


def closed_form_bs_inverse(op: fem.StokesOperator, omega_a: float, omega_s_rel: float) -> np.ndarray:
    """Dense block matrix of one Braess-Sarazin step.

    [[A~i - A~i B^T S~i B A~i, A~i B^T S~i], [S~i B A~i, -S~i]] with
    A~i = omega_a diag(A)^{-1} and S~i = omega_s diag(S)^{-1},
    S = B A~i B^T.
    """
    diagA = np.tile(op.A_s.diagonal(), op.d)
    Ainv = omega_a / diagA
    B = op.B.toarray()
    if B.size:
        diagS = np.einsum("kj,kj,j->k", B, B, Ainv)
        Sinv = omega_s_rel / diagS
    else:
        Sinv = np.zeros(0)
    n_u, n_p = op.n_u, op.n_p
    M = np.zeros((n_u + n_p, n_u + n_p))
    BA = B * Ainv[None, :]
    M[:n_u, :n_u] = np.diag(Ainv) - BA.T @ (Sinv[:, None] * BA)
    M[:n_u, n_u:] = BA.T * Sinv[None, :]
    M[n_u:, :n_u] = Sinv[:, None] * BA
    M[n_u:, n_u:] = -np.diag(Sinv)
    return M


def _dense_level(level: PLevel) -> np.ndarray:
    if level.velocity_only:
        return level.op.A.toarray()
    return level.op.block_matrix().toarray()


def _dense_smoother(level: PLevel, cfg: BSConfig) -> np.ndarray:
    if level.velocity_only:
        return np.diag(cfg.omega / level.diagA)
    return closed_form_bs_inverse(level.op, cfg.omega, level.omega_s)


def _dense_prolong(level: PLevel, coarse_velocity_only: bool) -> np.ndarray:
    op = level.op
    n, nc = op.n_scalar, level.coarse_n_scalar
    Pv = level.P_vel.toarray()
    cols_u = op.d * nc
    cols = cols_u if (coarse_velocity_only or level.velocity_only) else (
        cols_u + level.op.mesh.n_cells * level.coarse_n_pb
    )
    P = np.zeros((level.dim, cols))
    for c in range(op.d):
        P[c * n : (c + 1) * n, c * nc : (c + 1) * nc] = Pv
    if not (coarse_velocity_only or level.velocity_only):
        ncells = level.op.mesh.n_cells
        for cell in range(ncells):
            rf = level.n_u + cell * level.n_pb
            cc = cols_u + cell * level.coarse_n_pb
            for i in range(level.coarse_n_pb):
                P[rf + i, cc + i] = 1.0
    return P


def closed_form_vcycle(h: PHierarchy, cfg: BSConfig) -> np.ndarray:
    """Dense V-cycle operator via the two-grid recursion.

    M_1^{-1} = A_1^{-1} exactly (velocity-only coarse level); above that
    M_k^{-1} = (2I - S_k^{-1} A_k) S_k^{-1}
             + (I - S_k^{-1} A_k) P M_{k-1}^{-1} R (I - A_k S_k^{-1}).
    Valid for one smoothing step per level with the Richardson inner solve.
    """
    coarse = h.levels[0]
    d = coarse.n_u // coarse.n_scalar
    M = scipy.linalg.block_diag(*([coarse._inv] * d))
    for k in range(1, len(h.levels)):
        level = h.levels[k]
        A = _dense_level(level)
        S = _dense_smoother(level, cfg)
        P = _dense_prolong(level, coarse_velocity_only=(k - 1 == 0))
        R = P.T
        I = np.eye(level.dim)
        SA = S @ A
        M = (2 * I - SA) @ S + (I - SA) @ P @ M @ R @ (I - A @ S)
    return M


# --------------------------------------------------------------------------
# fast diagonalization (Cartesian patches)


class SeparabilityError(RuntimeError):
    """The patch is not separable; use the other local solver variants."""


class FDMSolver:
    """Exact velocity-block inverse on an axis-aligned tensor-product patch.

    Builds per-direction generalized eigendecompositions K Z = M Z Lambda of
    the 1D stiffness/mass pair and inverts A = mu * sum_k (M x..x K x..x M)
    [+ rho M x..x M] per velocity component in the eigenbasis.
    """

    def __init__(self, submesh: MeshLevel, p: int, include_mass: bool = False):
        d = submesh.dim
        mus = {c.mu for c in submesh.cells}
        rhos = {c.rho for c in submesh.cells}
        if len(mus) != 1 or len(rhos) != 1:
            raise SeparabilityError("coefficients vary across the patch")
        self.mu = mus.pop()
        self.rho = rhos.pop() if include_mass else 0.0

        breaks = []
        for k in range(d):
            vals = np.unique(np.round(submesh.vertices[:, k], 12))
            breaks.append(vals)
        for cid in range(submesh.n_cells):
            coords = submesh.corner_coords(cid)
            lo, hi = coords.min(axis=0), coords.max(axis=0)
            J, _ = submesh.jacobians(cid, np.full((1, d), 0.5))
            if not np.allclose(J[0], np.diag(hi - lo), atol=1e-12 * float((hi - lo).max())):
                raise SeparabilityError(f"cell {cid} is not axis-aligned")

        space = fem.ScalarSpace(submesh, p)
        iu = np.flatnonzero(~space.boundary_mask)
        coords = space.node_coords[iu]

        self.Z = []
        self.lam = []
        axes_nodes = []
        for k in range(d):
            K1, M1, nodes = _assemble_1d(breaks[k], p)
            lam, Z = scipy.linalg.eigh(K1, M1)
            self.Z.append(Z)
            self.lam.append(lam)
            axes_nodes.append(nodes)

        dims = tuple(len(n) for n in axes_nodes)
        tix = np.empty(len(iu), dtype=np.int64)
        for s in range(len(iu)):
            idx = []
            for k in range(d):
                j = np.searchsorted(axes_nodes[k], coords[s, k] - 1e-9)
                if j >= dims[k] or abs(axes_nodes[k][j] - coords[s, k]) > 1e-8:
                    raise SeparabilityError("node does not sit on the tensor grid")
                idx.append(j)
            tix[s] = np.ravel_multi_index(tuple(idx), dims)
        if len(np.unique(tix)) != len(tix) or len(tix) != int(np.prod(dims)):
            raise SeparabilityError("interior nodes do not form a tensor grid")
        self.tix = tix
        self.dims = dims
        self.d = d
        self.n = int(np.prod(dims))

        grids = np.meshgrid(*self.lam, indexing="ij")
        D = self.mu * sum(grids) + self.rho
        self.Dinv = (1.0 / D).reshape(-1)

    def solve_component(self, r: np.ndarray) -> np.ndarray:
        t = np.zeros(self.n)
        t[self.tix] = r
        fwd = kron.KroneckerOp([Z.T for Z in self.Z])
        bwd = kron.KroneckerOp(self.Z)
        t = kron.kron_apply(fwd, t)
        t *= self.Dinv
        t = kron.kron_apply(bwd, t)
        return t[self.tix]

    def solve(self, r_u: np.ndarray) -> np.ndarray:
        n = len(self.tix)
        out = np.empty_like(r_u)
        for c in range(r_u.size // n):
            out[c * n : (c + 1) * n] = self.solve_component(r_u[c * n : (c + 1) * n])
        return out


def _assemble_1d(breaks: np.ndarray, p: int):
    """Continuous 1D GLL stiffness/mass on the interval partition, zero BCs."""
    gll = kron.gauss_lobatto_nodes(p)
    xq, wq = kron.gauss_quadrature(p + 1)
    V1 = kron.lagrange_values(gll, xq)
    D1 = kron.lagrange_derivatives(gll, xq)
    ncell = len(breaks) - 1
    n = ncell * p + 1
    K = np.zeros((n, n))
    M = np.zeros((n, n))
    nodes = np.empty(n)
    for c in range(ncell):
        a, b = breaks[c], breaks[c + 1]
        hcell = b - a
        idx = np.arange(c * p, c * p + p + 1)
        nodes[idx] = a + hcell * gll
        K[np.ix_(idx, idx)] += (D1.T @ (D1 * wq[:, None])) / hcell
        M[np.ix_(idx, idx)] += (V1.T @ (V1 * wq[:, None])) * hcell
    return K[1:-1, 1:-1], M[1:-1, 1:-1], nodes[1:-1]


def fdm_solve(solver: FDMSolver, r_u: np.ndarray) -> np.ndarray:
    """Exact A^{-1} r_u via the prebuilt fast-diagonalization solver."""
    return solver.solve(r_u)


# --------------------------------------------------------------------------
# block preconditioner and blockwise elimination


def block_preconditioner_apply(op: fem.StokesOperator, vel_inv, r: np.ndarray) -> np.ndarray:
    """Symmetric block elimination with an approximate velocity inverse.

    du1 = V~ r_u; dp = M_p^{-1} (B du1 - r_p); du = du1 - V~ B^T dp,
    where V~ is any velocity-inverse approximation (p-MG V-cycles, FDM,
    dense factorization) and the Schur approximation is the pressure mass.
    """
    nu = op.n_u
    ru, rp = r[:nu], r[nu:]
    du1 = vel_inv(ru)
    dp = op.pressure_mass_inverse(op.apply_B(du1) - rp)
    du = du1 - vel_inv(op.apply_Bt(dp))
    return np.concatenate([du, dp])


def local_block_gmres(op: fem.StokesOperator, vel_inv, r: np.ndarray,
                      tol: float = 1e-8, max_it: int = 150):
    """Solve the patch saddle system by FGMRES with the block preconditioner.

    Returns (correction, SolveStats); non-convergence is flagged, not raised.
    """
    x, stats = krylov.fgmres(
        op.apply_block,
        lambda v: block_preconditioner_apply(op, vel_inv, v),
        r,
        tol=tol,
        max_it=max_it,
    )
    return x, stats


def blockwise_elimination(op: fem.StokesOperator, vel_exact, r: np.ndarray,
                          schur_cg_tol: float = 0.3, schur_cg_maxit: int = 50):
    """Three-stage elimination with the exact velocity inverse.

    The pressure comes from CG on S = B A^{-1} B^T restricted to mean-zero
    pressures, preconditioned by the pressure mass inverse.  Returns the
    correction and the Schur iteration count.
    """
    nu = op.n_u
    ru, rp = r[:nu], r[nu:]
    du1 = vel_exact(ru)
    rhs = op.project_mean_zero(op.apply_B(du1) - rp)

    def schur(x):
        return op.apply_B(vel_exact(op.apply_Bt(x)))

    def precond(x):
        return op.project_mean_zero(op.pressure_mass_inverse(x))

    dp, stats = krylov.cg(schur, precond, rhs, tol=schur_cg_tol, max_it=schur_cg_maxit)
    du = du1 - vel_exact(op.apply_Bt(dp))
    return np.concatenate([du, dp]), stats.iterations


# --------------------------------------------------------------------------
# solver objects bound to a patch core


class BSPMGSolver:
    """Braess-Sarazin p-multigrid local solver (Algorithm-2 wrapper)."""

    def __init__(self, core: PatchCore, cfg: LocalSolverConfig):
        self.h = _cached_hierarchy(core, velocity_only=False, omega=cfg.bs.omega)
        self.cfg = cfg

    def apply(self, r: np.ndarray) -> np.ndarray:
        return local_solve_richardson(self.h, r, self.cfg.n_mg, self.cfg.bs)


class _ExactVelocityInverse:
    """Dense Cholesky of the scalar velocity block, applied per component."""

    def __init__(self, op: fem.StokesOperator):
        self._factor = scipy.linalg.cho_factor(op.A_s.toarray())
        self.n = op.n_scalar

    def __call__(self, r_u: np.ndarray) -> np.ndarray:
        out = np.empty_like(r_u)
        n = self.n
        for c in range(r_u.size // n):
            out[c * n : (c + 1) * n] = scipy.linalg.cho_solve(
                self._factor, r_u[c * n : (c + 1) * n]
            )
        return out


class BlockMGSolver:
    """Block preconditioner with p-MG (or exact) velocity inverse."""

    def __init__(self, core: PatchCore, cfg: LocalSolverConfig):
        self.op = core.op
        self.cfg = cfg
        if cfg.vel_inverse == "exact":
            self._exact = _ExactVelocityInverse(core.op)
            self.h = None
        else:
            self.h = _cached_hierarchy(core, velocity_only=True, omega=cfg.bs.omega)
            self._exact = None

    def _vel_inv(self, ru: np.ndarray) -> np.ndarray:
        if self._exact is not None:
            return self._exact(ru)
        top = len(self.h.levels) - 1
        d = p_vcycle(self.h, top, ru, self.cfg.bs)
        for _ in range(self.cfg.n_v - 1):
            res = ru - self.h.top.apply(d)
            d += p_vcycle(self.h, top, res, self.cfg.bs)
        return d

    def precond(self, r: np.ndarray) -> np.ndarray:
        return block_preconditioner_apply(self.op, self._vel_inv, r)

    def apply(self, r: np.ndarray) -> np.ndarray:
        d = self.precond(r)
        for _ in range(self.cfg.n_mg - 1):
            res = r - self.op.apply_block(d)
            d += self.precond(res)
        return d


class BlockwiseFDMSolver:
    """Blockwise Schur elimination with FDM velocity inverses."""

    def __init__(self, core: PatchCore, cfg: LocalSolverConfig):
        self.op = core.op
        self.cfg = cfg
        self.fdm = FDMSolver(core.submesh, core.p, include_mass=core.include_mass)
        self.last_schur_iterations = 0

    def precond(self, r: np.ndarray) -> np.ndarray:
        d, its = blockwise_elimination(
            self.op, self.fdm.solve, r,
            schur_cg_tol=self.cfg.schur_cg_tol,
            schur_cg_maxit=self.cfg.schur_cg_maxit,
        )
        self.last_schur_iterations = its
        return d

    def apply(self, r: np.ndarray) -> np.ndarray:
        d = self.precond(r)
        for _ in range(self.cfg.n_mg - 1):
            res = r - self.op.apply_block(d)
            d += self.precond(res)
        return d


class ExactDenseSolver:
    """Exact patch solve: sparse LU of the mean-constrained saddle system."""

    def __init__(self, core: PatchCore, cfg: LocalSolverConfig | None = None):
        op = core.op
        w = op.mean.weights
        K = sp.bmat(
            [
                [op.A, op.Bt, None],
                [op.B, None, w[:, None]],
                [None, w[None, :], None],
            ],
            format="csc",
        )
        self._lu = spla.splu(K)
        self.op = op

    def apply(self, r: np.ndarray) -> np.ndarray:
        rhs = np.concatenate([r, [0.0]])
        sol = self._lu.solve(rhs)
        return sol[:-1]


_SOLVER_CLASSES = {
    "bs_pmg": BSPMGSolver,
    "block_mg": BlockMGSolver,
    "blockwise_fdm": BlockwiseFDMSolver,
    "exact_dense": ExactDenseSolver,
}


def _cached(core: PatchCore, key, build):
    obj = core.solvers.get(key)
    if obj is None:
        obj = build()
        core.solvers[key] = obj
    return obj


def _cached_hierarchy(core: PatchCore, velocity_only: bool, omega: float) -> PHierarchy:
    return _cached(
        core, ("phier", velocity_only, round(omega, 12)),
        lambda: build_p_hierarchy(core, velocity_only=velocity_only, omega=omega),
    )


def make_local_solver(core: PatchCore, cfg: LocalSolverConfig):
    """Build (or fetch from the core's cache) the solver for a config."""
    key = ("solver", cfg)
    solver = core.solvers.get(key)
    if solver is None:
        solver = _SOLVER_CLASSES[cfg.variant](core, cfg)
        core.solvers[key] = solver
    return solver
