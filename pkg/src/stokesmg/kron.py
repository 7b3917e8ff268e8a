"""Tensor-product (Kronecker) operator utilities and 1D nodal building blocks.

Everything here is expressed on the reference interval [0, 1].  The factor
ordering convention used throughout the package: the first factor of a
Kronecker product acts on the slowest-varying (outermost) index of the
flattened vector, i.e. flattening follows NumPy C order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache, reduce

import numpy as np

__all__ = [
    "KroneckerOp",
    "KronDimensionError",
    "kron_apply",
    "kron_materialize",
    "embedding_1d",
    "gauss_lobatto_nodes",
    "gauss_quadrature",
    "lagrange_values",
    "lagrange_derivatives",
]

DEFAULT_MATERIALIZE_CAP = 10_000


class KronDimensionError(ValueError):
    """Dimension mismatch in a Kronecker application, with factor index."""

    def __init__(self, factor_index, expected, got):
        self.factor_index = factor_index
        super().__init__(
            f"factor {factor_index}: expected input extent {expected}, got {got}"
        )


@dataclass(frozen=True)
class KroneckerOp:
    """Kronecker product F_1 x ... x F_d of dense 1D factors.

    ``factors[0]`` is the outermost factor (slowest index).  Output dimension
    is the product of factor row counts, input dimension the product of the
    column counts.
    """

    factors: tuple[np.ndarray, ...]

    def __init__(self, factors):
        mats = tuple(np.ascontiguousarray(F, dtype=float) for F in factors)
        if not mats:
            raise ValueError("need at least one factor")
        for k, F in enumerate(mats):
            if F.ndim != 2:
                raise ValueError(f"factor {k} is not a matrix")
            if not np.all(np.isfinite(F)):
                raise ValueError(f"factor {k} has non-finite entries")
        object.__setattr__(self, "factors", mats)

    @property
    def shape(self):
        rows = int(np.prod([F.shape[0] for F in self.factors]))
        cols = int(np.prod([F.shape[1] for F in self.factors]))
        return (rows, cols)

    @property
    def T(self):
        return KroneckerOp(tuple(F.T for F in self.factors))


def kron_apply(op: KroneckerOp, x: np.ndarray) -> np.ndarray:
    """Apply ``op`` to ``x`` factor by factor (sum factorization).

    Cost is O(n * sum_k m_k) instead of the O(n * prod_k m_k) of a
    materialized product.  Deterministic: the contraction order is fixed.
    """
    x = np.asarray(x, dtype=float)
    dims_in = [F.shape[1] for F in op.factors]
    if x.shape != (int(np.prod(dims_in)),):
        # identify the first factor whose extent cannot be matched
        size = x.size
        for k, n in enumerate(dims_in):
            if size % n != 0:
                raise KronDimensionError(k, n, size)
            size //= n
        raise KronDimensionError(len(dims_in) - 1, dims_in[-1], x.size)
    t = x.reshape(dims_in)
    for axis, F in enumerate(op.factors):
        t = np.moveaxis(np.tensordot(F, t, axes=(1, axis)), 0, axis)
    return t.reshape(-1)


def kron_materialize(op: KroneckerOp, cap: int = DEFAULT_MATERIALIZE_CAP) -> np.ndarray:
    """Dense matrix of the Kronecker product; refuses to exceed ``cap`` rows/cols."""
    rows, cols = op.shape
    if rows > cap or cols > cap:
        raise ValueError(f"materialized size {rows}x{cols} exceeds cap {cap}")
    return reduce(np.kron, op.factors)


@lru_cache(maxsize=None)
def gauss_lobatto_nodes(p: int) -> np.ndarray:
    """The p+1 Gauss-Lobatto-Legendre points on [0, 1], ascending."""
    if p < 1:
        raise ValueError("degree must be >= 1")
    if p == 1:
        pts = np.array([-1.0, 1.0])
    else:
        # interior GLL points are the roots of P_p'
        coeffs = np.zeros(p + 1)
        coeffs[p] = 1.0
        interior = np.polynomial.legendre.legroots(
            np.polynomial.legendre.legder(coeffs)
        )
        pts = np.concatenate(([-1.0], np.sort(interior.real), [1.0]))
    pts = 0.5 * (pts + 1.0)
    pts.setflags(write=False)
    return pts


@lru_cache(maxsize=None)
def gauss_quadrature(n: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss-Legendre rule on [0, 1]; exact for degree 2n-1."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / diff.prod(axis=1)


def lagrange_values(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the Lagrange basis on ``nodes`` at points ``x``.

    Returns an array of shape (len(x), len(nodes)) via the barycentric
    formula; evaluation points coinciding with nodes are handled exactly.
    """
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    w = _barycentric_weights(nodes)
    diff = x[:, None] - nodes[None, :]
    exact = np.abs(diff) < 1e-14
    on_node = exact.any(axis=1)
    vals = np.empty_like(diff)
    if np.any(~on_node):
        terms = w[None, :] / diff[~on_node]
        vals[~on_node] = terms / terms.sum(axis=1, keepdims=True)
    vals[on_node] = exact[on_node].astype(float)
    return vals


def lagrange_derivatives(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Derivatives of the Lagrange basis on ``nodes`` at points ``x``.

    Shape (len(x), len(nodes)).  Off-node points use the barycentric
    derivative formula; on-node points fall back to the spectral
    differentiation matrix, so mixed point sets are fine.
    """
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    w = _barycentric_weights(nodes)
    n = len(nodes)
    out = np.empty((len(x), n))

    diff = x[:, None] - nodes[None, :]
    exact = np.abs(diff) < 1e-14
    on_node = exact.any(axis=1)

    if np.any(~on_node):
        d = diff[~on_node]
        terms = w[None, :] / d
        s = terms.sum(axis=1, keepdims=True)
        vals = terms / s
        sum_inv = (1.0 / d).sum(axis=1, keepdims=True)
        out[~on_node] = vals * (sum_inv - 1.0 / d)

    if np.any(on_node):
        # D[i, j] = l_j'(x_i) on the node set itself
        D = np.empty((n, n))
        for i in range(n):
            di = nodes[i] - nodes
            di[i] = 1.0
            D[i] = (w / w[i]) / di
            D[i, i] = 0.0
            D[i, i] = -D[i].sum()
        idx = exact[on_node].argmax(axis=1)
        out[on_node] = D[idx]

    return out


def embedding_1d(p_coarse: int, p_fine: int) -> np.ndarray:
    """1D embedding matrix between nodal Lagrange spaces on GLL points.

    Entry (i, j) is the j-th degree-``p_coarse`` basis function evaluated at
    the i-th GLL node of degree ``p_fine``; the map reproduces polynomials of
    degree <= ``p_coarse`` exactly.
    """
    if not 1 <= p_coarse <= p_fine:
        raise ValueError("need 1 <= p_coarse <= p_fine")
    if p_coarse == p_fine:
        return np.eye(p_coarse + 1)
    return lagrange_values(gauss_lobatto_nodes(p_coarse), gauss_lobatto_nodes(p_fine))
