import math

import numpy as np
import pytest

from truncafem.basis import dubiner, lagrange, principal_lattice
from truncafem.quadrature import gauss1d, jacobians, physical_points, triangle_rule


def exact_monomial_integral(i, j):
    # int_T x^i y^j over the unit reference triangle
    return math.factorial(i) * math.factorial(j) / math.factorial(i + j + 2)


@pytest.mark.parametrize("degree", [1, 2, 4, 7, 10, 14, 18])
def test_triangle_rule_exactness(degree):
    pts, w = triangle_rule(degree)
    assert w.sum() == pytest.approx(0.5, abs=1e-14)
    assert (w > 0).all()
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            val = (pts[:, 0] ** i * pts[:, 1] ** j * w).sum()
            assert val == pytest.approx(exact_monomial_integral(i, j), rel=1e-12)


def test_gauss1d_exactness():
    x, w = gauss1d(6)
    for d in range(12):
        exact = (1 - (-1) ** (d + 1)) / (d + 1)
        assert (x**d * w).sum() == pytest.approx(exact, abs=1e-13)


def test_dubiner_orthonormal():
    for q in (2, 5, 6):
        D = dubiner(q)
        pts, w = triangle_rule(2 * q + 2)
        V = D.eval(pts)
        M = np.einsum("iq,jq,q->ij", V, V, w)
        assert np.abs(M - np.eye(D.dim)).max() < 1e-12


def test_dubiner_gradients_match_fd():
    D = dubiner(4)
    p0 = np.array([[0.31, 0.22], [0.05, 0.71]])
    h = 1e-6
    g = D.grad(p0)
    for d, step in enumerate(([h, 0.0], [0.0, h])):
        fd = (D.eval(p0 + step) - D.eval(p0 - step)) / (2 * h)
        assert np.abs(g[..., d] - fd).max() < 1e-6


def test_dubiner_grad_at_apex_finite():
    D = dubiner(3)
    g = D.grad(np.array([[0.0, 1.0]]))
    assert np.isfinite(g).all()
    # cross-check against a nearby point, polynomials are smooth
    g2 = D.grad(np.array([[1e-9, 1.0 - 1e-9]]))
    assert np.abs(g - g2).max() < 1e-5


def test_lagrange_nodal_and_partition():
    for p in (1, 2, 3, 5):
        B = lagrange(p)
        V = B.eval(B.nodes)
        assert np.abs(V - np.eye(B.dim)).max() < 1e-10
        pts, _ = triangle_rule(4)
        assert np.abs(B.eval(pts).sum(axis=0) - 1.0).max() < 1e-12


def test_principal_lattice_layout():
    nodes = principal_lattice(3)
    assert len(nodes) == 10
    # vertices first, then edge chains (0,1),(1,2),(2,0), then interior
    assert np.allclose(nodes[:3], [[0, 0], [1, 0], [0, 1]])
    assert np.allclose(nodes[3], [1 / 3, 0])
    assert np.allclose(nodes[-1], [1 / 3, 1 / 3])


def test_jacobians_orientation():
    verts = np.array([[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]])
    J, det, JinvT = jacobians(verts)
    assert det[0] == pytest.approx(1.0)
    assert np.allclose(JinvT[0] @ J[0].T, np.eye(2))
    pts = physical_points(verts, np.array([[0.25, 0.5]]))
    assert np.allclose(pts[0, 0], [0.25, 0.5])
