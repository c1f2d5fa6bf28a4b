"""Polynomial bases on the reference triangle.

Two families are provided:

* `DubinerBasis` -- L2-orthonormal modal basis (collapsed-coordinate Jacobi
  construction), used for broken projections, Raviart-Thomas generators and
  patch multipliers.  Orthogonality keeps every local solve well conditioned.
* `LagrangeBasis` -- nodal basis on the principal lattice with the node
  ordering (vertices, then edge chains, then interior) that the global dof
  enumeration relies on.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import eval_jacobi

from .quadrature import triangle_rule

_TINY = 1e-300


def _jacobi_deriv(n, alpha, beta, x):
    if n == 0:
        return np.zeros_like(x)
    return 0.5 * (n + alpha + beta + 1) * eval_jacobi(n - 1, alpha + 1, beta + 1, x)


class DubinerBasis:
    """Orthonormal modal basis of P_q on the reference triangle.

    Modes are graded: all modes of total degree d are contiguous, so the
    leading block of dimension (d+1)(d+2)/2 spans P_d for every d <= q.
    """

    def __init__(self, q: int):
        self.q = q
        self.indices = [(i, d - i) for d in range(q + 1) for i in range(d + 1)]
        self.dim = len(self.indices)
        pts, wts = triangle_rule(2 * q + 2)
        raw = self._eval_raw(pts)
        norms = np.sqrt((raw**2 * wts).sum(axis=1))
        self._scale = 1.0 / norms

    def degree_dim(self, d: int) -> int:
        return (d + 1) * (d + 2) // 2

    def top_degree_slice(self):
        """Indices of the modes of total degree exactly q."""
        return slice(self.dim - (self.q + 1), self.dim)

    def _collapsed(self, pts):
        xi = pts[..., 0]
        eta = pts[..., 1]
        om = 1.0 - eta
        safe = np.where(np.abs(om) > 1e-13, om, 1.0)
        a = np.where(np.abs(om) > 1e-13, 2.0 * xi / safe - 1.0, -1.0)
        b = 2.0 * eta - 1.0
        return a, b, om

    def _eval_raw(self, pts):
        a, b, om = self._collapsed(np.asarray(pts, dtype=float))
        out = np.empty((self.dim,) + a.shape)
        for m, (i, j) in enumerate(self.indices):
            out[m] = eval_jacobi(i, 0.0, 0.0, a) * om**i * eval_jacobi(j, 2 * i + 1, 0.0, b)
        return out

    def eval(self, pts):
        """Values, shape (dim, ...) for pts shape (..., 2)."""
        return self._eval_raw(pts) * self._scale.reshape((-1,) + (1,) * (np.ndim(pts) - 1))

    def grad(self, pts):
        """Reference gradients, shape (dim, ..., 2)."""
        pts = np.asarray(pts, dtype=float)
        a, b, om = self._collapsed(pts)
        out = np.empty((self.dim,) + a.shape + (2,))
        for m, (i, j) in enumerate(self.indices):
            Pi = eval_jacobi(i, 0.0, 0.0, a)
            Pj = eval_jacobi(j, 2 * i + 1, 0.0, b)
            dPi = _jacobi_deriv(i, 0.0, 0.0, a)
            dPj = _jacobi_deriv(j, 2 * i + 1, 0.0, b)
            if i == 0:
                out[m, ..., 0] = 0.0
                out[m, ..., 1] = 2.0 * dPj
            else:
                omi1 = om ** (i - 1)
                out[m, ..., 0] = 2.0 * dPi * omi1 * Pj
                out[m, ..., 1] = (dPi * (a + 1.0) * omi1 * Pj
                                  - i * Pi * omi1 * Pj
                                  + 2.0 * Pi * omi1 * om * dPj)
        return out * self._scale.reshape((-1,) + (1,) * (out.ndim - 1))


@lru_cache(maxsize=None)
def dubiner(q: int) -> DubinerBasis:
    return DubinerBasis(q)


def principal_lattice(p: int):
    """Reference nodes ordered (vertices, edge0, edge1, edge2, interior).

    Edge nodes run from the first to the second vertex of the local edge
    (edges are (0,1), (1,2), (2,0)); interior nodes are lexicographic.
    """
    V = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    nodes = [V[0], V[1], V[2]]
    for e0, e1 in ((0, 1), (1, 2), (2, 0)):
        for t in range(1, p):
            nodes.append(V[e0] + (V[e1] - V[e0]) * (t / p))
    for j in range(1, p):
        for i in range(1, p - j):
            nodes.append(np.array([i / p, j / p]))
    return np.array(nodes)


class LagrangeBasis:
    """Nodal P_p basis on the principal lattice of the reference triangle."""

    def __init__(self, p: int):
        self.p = p
        self.nodes = principal_lattice(p)
        self.dim = len(self.nodes)
        self.n_edge = p - 1
        self.n_interior = self.dim - 3 - 3 * self.n_edge
        D = dubiner(p)
        vand = D.eval(self.nodes).T  # (nodes, modes)
        self._coeff = np.linalg.inv(vand)  # columns: modal coeffs per nodal fn

    def eval(self, pts):
        """Values, shape (dim, ...) for pts shape (..., 2)."""
        return np.tensordot(self._coeff, dubiner(self.p).eval(np.asarray(pts)),
                            axes=(0, 0))

    def grad(self, pts):
        """Reference gradients, shape (dim, ..., 2)."""
        G = dubiner(self.p).grad(np.asarray(pts))
        return np.tensordot(self._coeff, G, axes=(0, 0))


@lru_cache(maxsize=None)
def lagrange(p: int) -> LagrangeBasis:
    return LagrangeBasis(p)
