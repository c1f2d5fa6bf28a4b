"""Quadrature rules on the reference triangle and on segments.

The triangle rules are conical-product Gauss rules (Gauss-Legendre in the
collapsed direction, Gauss-Jacobi with weight (1-y) in the other), so a rule
of requested degree d integrates every bivariate polynomial of total degree
<= d exactly, with interior points and positive weights.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

# Reference triangle: vertices (0,0), (1,0), (0,1), area 1/2.
REF_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


@lru_cache(maxsize=None)
def gauss1d(n: int):
    """n-point Gauss-Legendre rule on [-1, 1], exact to degree 2n-1."""
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


@lru_cache(maxsize=None)
def segment_rule(degree: int):
    """Rule on [-1, 1] exact for polynomials up to `degree`."""
    n = max(1, (degree + 2) // 2)
    return gauss1d(n)


@lru_cache(maxsize=None)
def triangle_rule(degree: int):
    """Points (m, 2) and weights (m,) on the reference triangle.

    Exact for all polynomials of total degree <= `degree`; weights sum to 1/2.
    """
    degree = max(degree, 1)
    n = (degree + 2) // 2  # Gauss-Legendre count in x-direction
    m = (degree + 2) // 2  # Gauss-Jacobi count in y-direction
    xg, wg = gauss1d(n)
    # weight (1-y) on [0,1] absorbs the collapse Jacobian
    yj, wj = roots_jacobi(m, 1.0, 0.0)
    y01 = 0.5 * (yj + 1.0)
    wy = wj / 4.0  # (1/2)^2 from mapping [-1,1] -> [0,1] with weight (1-y)
    u01 = 0.5 * (xg + 1.0)
    wu = wg / 2.0

    U, Y = np.meshgrid(u01, y01, indexing="ij")
    WU, WY = np.meshgrid(wu, wy, indexing="ij")
    pts = np.column_stack([(U * (1.0 - Y)).ravel(), Y.ravel()])
    wts = (WU * WY).ravel()
    return pts, wts


def physical_points(verts, ref_pts):
    """Map reference points into the triangle(s) `verts`.

    verts: (..., 3, 2); ref_pts: (m, 2). Returns (..., m, 2).
    """
    v = np.asarray(verts, dtype=float)
    v0 = v[..., 0, :]
    e1 = v[..., 1, :] - v0
    e2 = v[..., 2, :] - v0
    return (v0[..., None, :]
            + ref_pts[..., :, 0, None] * e1[..., None, :]
            + ref_pts[..., :, 1, None] * e2[..., None, :])


def jacobians(verts):
    """Affine data for triangle(s): J (.., 2, 2), det J (= 2*area), J^{-T}."""
    v = np.asarray(verts, dtype=float)
    J = np.stack([v[..., 1, :] - v[..., 0, :], v[..., 2, :] - v[..., 0, :]], axis=-1)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    inv = np.empty_like(J)
    inv[..., 0, 0] = J[..., 1, 1]
    inv[..., 0, 1] = -J[..., 0, 1]
    inv[..., 1, 0] = -J[..., 1, 0]
    inv[..., 1, 1] = J[..., 0, 0]
    inv = inv / det[..., None, None]
    JinvT = np.swapaxes(inv, -1, -2)
    return J, det, JinvT
