"""Continuous Lagrange spaces on a mesh, with homogeneous Dirichlet
constraints on the whole mesh boundary (physical and artificial alike).

Dof layout: one dof per vertex, (p-1) per face ordered from the lower to the
higher vertex id, then element-interior dofs.  Fields store coefficients over
the free dofs only; constrained dofs are identically zero and evaluation
outside the covered region reads as zero (extension by zero).
"""

from __future__ import annotations

import numpy as np

from .basis import lagrange
from .geometry import Mesh, MeshError
from .quadrature import triangle_rule


class SpaceError(Exception):
    pass


class LagrangeSpace:
    def __init__(self, mesh: Mesh, degree):
        self.mesh = mesh
        p_elem = np.broadcast_to(np.asarray(degree, dtype=np.int32),
                                 (mesh.n_elements,)).copy()
        if p_elem.min() < 1:
            raise SpaceError("polynomial degree must be >= 1")
        self.p_elem = p_elem
        p = int(p_elem[0])
        if np.any(p_elem != p):
            # conforming coupling of mixed degrees is out of scope for the
            # shipped experiments; the degree map itself stays per-element
            raise SpaceError("non-uniform degree maps are not supported")
        self.p = p
        self.basis = lagrange(p)
        top = mesh.topology()
        nv = mesh.n_vertices
        nf = len(top.face_verts)
        ne = mesh.n_elements
        n_edge = p - 1
        n_int = self.basis.n_interior
        self.n_dofs_total = nv + nf * n_edge + ne * n_int

        # element -> global dofs, matching the reference node ordering
        elems = mesh.elements
        loc = np.empty((ne, self.basis.dim), dtype=np.int64)
        loc[:, 0:3] = elems
        col = 3
        for k, (l0, l1) in enumerate(((0, 1), (1, 2), (2, 0))):
            f = top.elem_face[:, k]
            fwd = elems[:, l0] == top.face_verts[f, 0]
            for t in range(n_edge):
                tt = np.where(fwd, t, n_edge - 1 - t)
                loc[:, col] = nv + f * n_edge + tt
                col += 1
        for t in range(n_int):
            loc[:, col] = nv + nf * n_edge + np.arange(ne) * n_int + t
            col += 1
        self.elem_dofs = loc

        constrained = np.zeros(self.n_dofs_total, dtype=bool)
        bfaces = top.boundary_faces()
        constrained[top.face_verts[bfaces].ravel()] = True
        for f in bfaces:
            constrained[nv + f * n_edge: nv + (f + 1) * n_edge] = True
        self.constrained = constrained
        self.free_index = np.full(self.n_dofs_total, -1, dtype=np.int64)
        self.free_index[~constrained] = np.arange((~constrained).sum())
        self.n_free = int((~constrained).sum())
        self.elem_free = self.free_index[self.elem_dofs]  # -1 for constrained

    # -- derived degree quantities -----------------------------------------

    def p_vertex_minmax(self, a: int):
        elems = self.mesh.topology().vertex_elems(a)
        pk = self.p_elem[elems]
        return int(pk.min()), int(pk.max())

    def p_elem_minmax(self, K: int):
        lo = hi = self.p_elem[K]
        for a in self.mesh.elements[K]:
            mn, mx = self.p_vertex_minmax(a)
            lo, hi = min(lo, mn), max(hi, mx)
        return int(lo), int(hi)

    # -- fields -------------------------------------------------------------

    def zero_field(self, kind="real"):
        dtype = complex if kind == "complex" else float
        return ScalarField(self, np.zeros(self.n_free, dtype=dtype))

    def field_from_free(self, coeffs):
        coeffs = np.asarray(coeffs)
        if coeffs.shape != (self.n_free,):
            raise SpaceError("coefficient vector has wrong length")
        return ScalarField(self, coeffs)

    def node_coordinates(self):
        """Physical coordinates of all dofs (total numbering), (ndofs, 2)."""
        verts = self.mesh.element_verts()
        ref = self.basis.nodes
        v0 = verts[:, 0]
        e1 = verts[:, 1] - verts[:, 0]
        e2 = verts[:, 2] - verts[:, 0]
        pts = (v0[:, None, :] + ref[None, :, 0, None] * e1[:, None, :]
               + ref[None, :, 1, None] * e2[:, None, :])
        out = np.zeros((self.n_dofs_total, 2))
        out[self.elem_dofs.ravel()] = pts.reshape(-1, 2)
        return out


class ScalarField:
    """Finite element function given by its free-dof coefficients."""

    def __init__(self, space: LagrangeSpace, coeffs):
        self.space = space
        self.coeffs = np.asarray(coeffs)
        self.kind = "complex" if np.iscomplexobj(self.coeffs) else "real"

    def full(self):
        out = np.zeros(self.space.n_dofs_total, dtype=self.coeffs.dtype)
        out[~self.space.constrained] = self.coeffs
        return out

    def elem_coeffs(self):
        """Per-element local coefficient matrix (ne, ndof_local)."""
        return self.full()[self.space.elem_dofs]

    def values(self, ref_pts, elems=None):
        """Values at reference points per element, shape (ne, m)."""
        N = self.space.basis.eval(ref_pts)  # (nd, m)
        c = self.elem_coeffs()
        if elems is not None:
            c = c[elems]
        return c @ N

    def gradients(self, ref_pts, elems=None):
        """Physical gradients at reference points, shape (ne, m, 2)."""
        G = self.space.basis.grad(ref_pts)  # (nd, m, 2)
        c = self.elem_coeffs()
        _, _, JinvT, _ = self.space.mesh.affine()
        if elems is not None:
            c = c[elems]
            JinvT = JinvT[elems]
        ref_grad = np.einsum("en,nmd->emd", c, G)
        return np.einsum("ekd,emd->emk", JinvT, ref_grad)


def interpolate(field: ScalarField, target: LagrangeSpace) -> ScalarField:
    """Nodal interpolation into a space on a mesh descending from the field's.

    Exact whenever the target degree is >= the source degree (bisection
    children are geometrically nested and extension cells read as zero).
    """
    src = field.space
    tgt_mesh = target.mesh
    anc = tgt_mesh.ancestor_in(src.mesh)
    ref = target.basis.nodes
    verts = tgt_mesh.element_verts()
    v0 = verts[:, 0]
    e1 = verts[:, 1] - verts[:, 0]
    e2 = verts[:, 2] - verts[:, 0]
    phys = (v0[:, None, :] + ref[None, :, 0, None] * e1[:, None, :]
            + ref[None, :, 1, None] * e2[:, None, :])  # (ne, nd, 2)

    vals = np.zeros(phys.shape[:2], dtype=field.coeffs.dtype)
    has = np.nonzero(anc >= 0)[0]
    src_verts = src.mesh.element_verts()
    src_coeffs = field.elem_coeffs()
    B = src.basis
    for lo in range(0, len(has), 16384):
        idx = has[lo:lo + 16384]
        A = anc[idx]
        sverts = src_verts[A]
        sv0 = sverts[:, 0]
        J = np.stack([sverts[:, 1] - sv0, sverts[:, 2] - sv0], axis=-1)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        d = phys[idx] - sv0[:, None, :]
        xi = (J[:, 1, 1, None] * d[:, :, 0] - J[:, 0, 1, None] * d[:, :, 1]) / det[:, None]
        eta = (-J[:, 1, 0, None] * d[:, :, 0] + J[:, 0, 0, None] * d[:, :, 1]) / det[:, None]
        pts = np.stack([xi, eta], axis=-1)
        basis_vals = B.eval(pts)  # (nd, chunk, m)
        vals[idx] = np.einsum("en,nem->em", src_coeffs[A], basis_vals)

    out = np.zeros(target.n_dofs_total, dtype=field.coeffs.dtype)
    out[target.elem_dofs.ravel()] = vals.reshape(-1)
    free = out[~target.constrained]
    return ScalarField(target, free)
