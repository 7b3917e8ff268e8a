"""Outer and inner iterative solvers: flexible GMRES, CG, Richardson."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["SolveStats", "fgmres", "cg", "richardson", "NonSPDError"]


class NonSPDError(RuntimeError):
    """CG met a direction of nonpositive curvature (operator not SPD)."""


@dataclass
class SolveStats:
    iterations: int
    converged: bool
    final_relative_residual: float
    history: list[float] = field(default_factory=list)


def _as_apply(op):
    if callable(op):
        return op
    return lambda x: op @ x


def fgmres(op, precond, b, x0=None, tol=1e-8, max_it=150):
    """Right-preconditioned flexible GMRES without restart.

    The preconditioner may vary between iterations (or be nonlinear).
    Convergence is measured by the plain relative residual
    ||b - A x|| / ||b - A x0||; the history is monotone nonincreasing.
    Modified Gram-Schmidt with one reorthogonalization pass when the
    projected mass exceeds 1e-8 of the vector norm keeps counts
    reproducible at high iteration numbers.
    """
    if max_it < 1:
        raise ValueError("max_it must be >= 1")
    apply_op = _as_apply(op)
    apply_pc = _as_apply(precond) if precond is not None else (lambda x: x)
    b = np.asarray(b, dtype=float)
    x0 = np.zeros_like(b) if x0 is None else np.asarray(x0, dtype=float)

    r0 = b - apply_op(x0) if np.any(x0) else b.copy()
    beta = np.linalg.norm(r0)
    if beta == 0.0:
        return x0.copy(), SolveStats(0, True, 0.0, [0.0])

    V = [r0 / beta]
    Z = []
    R = np.zeros((max_it, max_it))  # triangularized Hessenberg
    cs = np.zeros(max_it)
    sn = np.zeros(max_it)
    g = np.zeros(max_it + 1)
    g[0] = beta
    history = []
    converged = False
    n_cols = 0

    for k in range(max_it):
        z = apply_pc(V[k])
        w = apply_op(z)
        Z.append(z)

        wnorm0 = np.linalg.norm(w)
        h = np.zeros(k + 2)
        for i in range(k + 1):
            h[i] = V[i] @ w
            w -= h[i] * V[i]
        if wnorm0 > 0 and np.linalg.norm(w) < 1e-8 * wnorm0:
            # one reorthogonalization pass against severe cancellation
            for i in range(k + 1):
                corr = V[i] @ w
                h[i] += corr
                w -= corr * V[i]
        h[k + 1] = np.linalg.norm(w)
        happy = h[k + 1] <= 1e-14 * max(wnorm0, beta)

        for i in range(k):
            t = cs[i] * h[i] + sn[i] * h[i + 1]
            h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1]
            h[i] = t
        denom = np.hypot(h[k], h[k + 1])
        if denom == 0.0:
            # the new column is linearly dependent: nothing more to gain
            converged = True
            break
        cs[k] = h[k] / denom
        sn[k] = h[k + 1] / denom
        R[: k + 1, k] = h[: k + 1]
        R[k, k] = denom
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]
        n_cols = k + 1

        rel = abs(g[k + 1]) / beta
        history.append(rel)
        if rel <= tol or happy:
            converged = True
            break
        V.append(w / h[k + 1])

    y = np.zeros(n_cols)
    for i in range(n_cols - 1, -1, -1):
        y[i] = (g[i] - R[i, i + 1 : n_cols] @ y[i + 1 : n_cols]) / R[i, i]
    x = x0.copy()
    for i in range(n_cols):
        x += y[i] * Z[i]

    final = history[-1] if history else 1.0
    return x, SolveStats(n_cols, converged, final, history)


def cg(op, precond, b, tol=1e-8, max_it=200, fixed_iterations=None):
    """Preconditioned conjugate gradients.

    With ``fixed_iterations`` set, runs exactly that many steps with no
    tolerance check (the inner-solver mode for Schur systems); each step
    beyond the initial residual performs exactly one operator application.
    Raises :class:`NonSPDError` on nonpositive curvature.
    """
    apply_op = _as_apply(op)
    apply_pc = _as_apply(precond) if precond is not None else (lambda x: x)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    rnorm0 = np.linalg.norm(r)
    history = [1.0] if rnorm0 > 0 else [0.0]
    if rnorm0 == 0.0:
        return x, SolveStats(0, True, 0.0, history)

    z = apply_pc(r)
    rho = r @ z
    p = z.copy()
    n_steps = fixed_iterations if fixed_iterations is not None else max_it
    it = 0
    for it in range(1, n_steps + 1):
        Ap = apply_op(p)
        curv = p @ Ap
        if curv <= 0.0:
            raise NonSPDError(f"curvature {curv:.3e} at iteration {it}")
        alpha = rho / curv
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / rnorm0
        history.append(rel)
        if fixed_iterations is None and rel <= tol:
            return x, SolveStats(it, True, rel, history)
        if it < n_steps:
            z = apply_pc(r)
            rho_new = r @ z
            p = z + (rho_new / rho) * p
            rho = rho_new
    final = history[-1]
    return x, SolveStats(it, fixed_iterations is not None or final <= tol, final, history)


def richardson(op, precond, b, n_steps, omega=1.0):
    """Damped preconditioned Richardson iteration from a zero initial guess.

    The first step needs no operator application (the residual is ``b``);
    each later step applies the operator once.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    apply_op = _as_apply(op)
    apply_pc = _as_apply(precond) if precond is not None else (lambda x: x)
    x = omega * apply_pc(b)
    for _ in range(n_steps - 1):
        x = x + omega * apply_pc(b - apply_op(x))
    return x
