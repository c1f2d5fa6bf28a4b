"""Assembly of the bilinear forms, sparse solves, energy norms and the
residual functional.

Element matrices come from reference tensors contracted with per-element
affine data, so assembly is vectorized over elements (in chunks to bound
memory).  Quadrature is exact for the piecewise-constant-coefficient forms;
source integrals use a dedicated high-order rule ("f-rule") that is shared by
every consumer of f-moments, which keeps Galerkin orthogonality and the
equilibration identities consistent to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .basis import lagrange
from .geometry import Mesh
from .problems import Helmholtz, ReactionDiffusion
from .quadrature import physical_points, triangle_rule
from .spaces import LagrangeSpace, ScalarField

_CHUNK = 20000


class SolveError(Exception):
    pass


def f_rule_degree(p: int) -> int:
    """Quadrature degree for integrals involving the source."""
    return 2 * p + 10


@dataclass
class SparseSystem:
    matrix: sp.csc_matrix
    rhs: np.ndarray
    symmetric: bool
    kind: str  # 'real' (SPD) or 'complex' (complex symmetric)


def _reference_tensors(p: int, degree: int):
    pts, w = triangle_rule(degree)
    B = lagrange(p)
    N = B.eval(pts)                      # (nd, m)
    G = B.grad(pts)                      # (nd, m, 2)
    Mhat = np.einsum("im,jm,m->ij", N, N, w)
    U = np.einsum("ima,jmb,m->abij", G, G, w)
    return N, G, Mhat, U


def assemble(problem, space: LagrangeSpace) -> SparseSystem:
    mesh = space.mesh
    p = space.p
    _, _, Mhat, U = _reference_tensors(p, 2 * p)
    _, det, JinvT, _ = mesh.affine()
    ne = mesh.n_elements
    nd = space.basis.dim

    if isinstance(problem, ReactionDiffusion):
        kind = "real"
        mass_coef = problem.kappa_elem(mesh) ** 2
        Bgeo = np.einsum("eda,edb->eab", JinvT, JinvT)
    elif isinstance(problem, Helmholtz):
        kind = "complex"
        alpha = problem.alpha_elem(mesh)
        A = problem.A_elem(mesh)
        mass_coef = -problem.k**2 * alpha
        Bgeo = np.einsum("eda,edc,ecb->eab", JinvT, A, JinvT)
    else:
        raise TypeError(f"unknown problem type {type(problem)}")

    dtype = complex if kind == "complex" else float
    rows, cols, vals = [], [], []
    free = space.elem_free
    for lo in range(0, ne, _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, ne))
        loc = np.einsum("eab,abij->eij", Bgeo[sl], U).astype(dtype)
        loc += mass_coef[sl, None, None] * Mhat
        loc *= det[sl, None, None]
        r = np.broadcast_to(free[sl][:, :, None], loc.shape)
        c = np.broadcast_to(free[sl][:, None, :], loc.shape)
        keep = (r >= 0) & (c >= 0)
        rows.append(r[keep].astype(np.int32))
        cols.append(c[keep].astype(np.int32))
        vals.append(loc[keep])

    n = space.n_free
    A_mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsc()
    rhs = assemble_load(problem, space)
    return SparseSystem(matrix=A_mat, rhs=rhs, symmetric=True, kind=kind)


def assemble_load(problem, space: LagrangeSpace) -> np.ndarray:
    """(f, basis) over the free dofs, using the f-rule."""
    mesh = space.mesh
    p = space.p
    pts, w = triangle_rule(f_rule_degree(p))
    N = space.basis.eval(pts)  # (nd, m)
    _, det, _, _ = mesh.affine()
    verts = mesh.element_verts()
    dtype = complex if problem.kind == "complex" else float
    out = np.zeros(space.n_free, dtype=dtype)
    free = space.elem_free
    for lo in range(0, mesh.n_elements, _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, mesh.n_elements))
        xph = physical_points(verts[sl], pts)          # (ch, m, 2)
        fv = problem.source.eval(xph)                  # (ch, m)
        Floc = np.einsum("em,im,m->ei", fv, N, w) * det[sl, None]
        fr = free[sl]
        keep = fr >= 0
        np.add.at(out, fr[keep], Floc[keep])
    return out


def solve(system: SparseSystem) -> np.ndarray:
    """Direct sparse solve with a residual certificate."""
    A, b = system.matrix, system.rhs
    if A.shape[0] == 0:
        return np.zeros(0, dtype=b.dtype)
    try:
        lu = sla.splu(A, permc_spec="MMD_AT_PLUS_A")
        x = lu.solve(b)
    except RuntimeError as exc:  # singular factorization
        raise SolveError(f"sparse factorization failed: {exc}") from exc
    res = np.linalg.norm(A @ x - b)
    norm_A = sla.norm(A, np.inf) if A.nnz else 0.0
    bound = 1e-10 * (norm_A * np.linalg.norm(x) + np.linalg.norm(b))
    if res > max(bound, 1e-300):
        raise SolveError(f"solver residual {res:.3e} exceeds certificate {bound:.3e}")
    return x


def solve_field(problem, space: LagrangeSpace) -> ScalarField:
    sys = assemble(problem, space)
    return space.field_from_free(solve(sys))


def apply_form(problem, space: LagrangeSpace, x) -> np.ndarray:
    """Matrix-free action of the assembled form on free-dof coefficients.

    Equivalent to assemble(...).matrix @ x, but never forms the matrix;
    used to evaluate residuals against large reference spaces.
    """
    mesh = space.mesh
    p = space.p
    _, _, Mhat, U = _reference_tensors(p, 2 * p)
    _, det, JinvT, _ = mesh.affine()
    if isinstance(problem, ReactionDiffusion):
        mass_coef = problem.kappa_elem(mesh) ** 2
        Bgeo = np.einsum("eda,edb->eab", JinvT, JinvT)
    else:
        mass_coef = -problem.k**2 * problem.alpha_elem(mesh)
        Bgeo = np.einsum("eda,edc,ecb->eab", JinvT, problem.A_elem(mesh), JinvT)
    x = np.asarray(x)
    out = np.zeros_like(x)
    free = space.elem_free
    for lo in range(0, mesh.n_elements, _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, mesh.n_elements))
        fr = free[sl]
        xl = np.where(fr >= 0, x[np.maximum(fr, 0)], 0.0)
        loc = np.einsum("eab,abij->eij", Bgeo[sl], U).astype(x.dtype)
        loc += mass_coef[sl, None, None] * Mhat
        loc *= det[sl, None, None]
        y = np.einsum("eij,ej->ei", loc, xl)
        keep = fr >= 0
        np.add.at(out, fr[keep], y[keep])
    return out


class CondensedSystem:
    """Reaction-diffusion system with element-interior dofs eliminated by
    exact block Gaussian elimination (the skeleton factorization plus the
    local back-substitutions reproduce the direct solve bit-for-bit up to
    round-off, with a fraction of the fill)."""

    def __init__(self, problem, space: LagrangeSpace):
        if not isinstance(problem, ReactionDiffusion):
            raise TypeError("static condensation requires the SPD problem")
        mesh = space.mesh
        p = space.p
        self.space = space
        n_int = space.basis.n_interior
        self.n_int = n_int
        nd = space.basis.dim
        nb = nd - n_int
        _, _, Mhat, U = _reference_tensors(p, 2 * p)
        _, det, JinvT, _ = mesh.affine()
        mass_coef = problem.kappa_elem(mesh) ** 2
        Bgeo = np.einsum("eda,edb->eab", JinvT, JinvT)

        self.rhs_full = assemble_load(problem, space)
        ne = mesh.n_elements
        free = space.elem_free

        # skeleton dof numbering over the free dofs
        interior_free = free[:, nb:].ravel()
        is_int = np.zeros(space.n_free, dtype=bool)
        is_int[interior_free[interior_free >= 0]] = True
        self.skel_of_free = np.full(space.n_free, -1, dtype=np.int64)
        self.skel_of_free[~is_int] = np.arange(int((~is_int).sum()))
        n_skel = int((~is_int).sum())

        rows, cols, vals = [], [], []
        rhs = self.rhs_full[~is_int].copy()
        self.Aii_inv = np.empty((ne, n_int, n_int)) if n_int else None
        self.Abi = np.empty((ne, nb, n_int)) if n_int else None
        self.Fi = np.empty((ne, n_int)) if n_int else None
        for lo in range(0, ne, _CHUNK):
            sl = slice(lo, min(lo + _CHUNK, ne))
            loc = np.einsum("eab,abij->eij", Bgeo[sl], U)
            loc += mass_coef[sl, None, None] * Mhat
            loc *= det[sl, None, None]
            frb = self.skel_of_free[np.maximum(free[sl, :nb], 0)]
            frb[free[sl, :nb] < 0] = -1
            if n_int:
                Aii = loc[:, nb:, nb:]
                Abi = loc[:, :nb, nb:]
                Aii_inv = np.linalg.inv(Aii)
                self.Aii_inv[sl] = Aii_inv
                self.Abi[sl] = Abi
                Fi = self.rhs_full[free[sl, nb:]]
                self.Fi[sl] = Fi
                S = loc[:, :nb, :nb] - Abi @ Aii_inv @ np.swapaxes(Abi, 1, 2)
                corr = np.einsum("ebi,eij,ej->eb", Abi, Aii_inv, Fi)
                keep = frb >= 0
                np.add.at(rhs, frb[keep], -corr[keep])
            else:
                S = loc
            r = np.broadcast_to(frb[:, :, None], S.shape)
            c = np.broadcast_to(frb[:, None, :], S.shape)
            keep = (r >= 0) & (c >= 0)
            rows.append(r[keep].astype(np.int32))
            cols.append(c[keep].astype(np.int32))
            vals.append(S[keep])
        self.matrix = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_skel, n_skel)).tocsc()
        self.rhs = rhs

    def solve(self) -> np.ndarray:
        """Full free-dof solution via skeleton solve plus local recovery."""
        xb = solve(SparseSystem(self.matrix, self.rhs, True, "real"))
        space = self.space
        x = np.zeros(space.n_free)
        x[self.skel_of_free >= 0] = xb[self.skel_of_free[self.skel_of_free >= 0]]
        if self.n_int:
            nb = space.basis.dim - self.n_int
            free = space.elem_free
            xb_loc = np.where(free[:, :nb] >= 0,
                              x[np.maximum(free[:, :nb], 0)], 0.0)
            xi = np.einsum("eij,ej->ei", self.Aii_inv,
                           self.Fi - np.einsum("ebi,eb->ei", self.Abi, xb_loc))
            x[free[:, nb:].ravel()] = xi.ravel()
        # certify on the full system via the matrix-free action
        # (cheap relative to the factorization)
        return x


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def energy_norm_sq_per_element(field: ScalarField, problem, degree=None) -> np.ndarray:
    """Elementwise squared energy norm (kappa- resp. k-weighted)."""
    space = field.space
    mesh = space.mesh
    p = space.p
    deg = degree if degree is not None else 2 * p
    pts, w = triangle_rule(deg)
    _, det, _, _ = mesh.affine()
    out = np.zeros(mesh.n_elements)
    if isinstance(problem, ReactionDiffusion):
        w_mass = problem.kappa_elem(mesh) ** 2
        Aw = None
    else:
        Aw = problem.A_elem(mesh).real
        w_mass = problem.k**2 * problem.alpha_elem(mesh).real
    for lo in range(0, mesh.n_elements, _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, mesh.n_elements))
        vals = field.values(pts, elems=np.arange(sl.start, sl.stop))
        grads = field.gradients(pts, elems=np.arange(sl.start, sl.stop))
        v2 = (np.abs(vals) ** 2 * w).sum(axis=1)
        if Aw is None:
            g2 = (np.abs(grads) ** 2).sum(axis=2)
            g2 = (g2 * w).sum(axis=1)
        else:
            gq = np.einsum("eab,ema,emb->em", Aw[sl],
                           grads.conj(), grads).real
            g2 = (gq * w).sum(axis=1)
        out[sl] = det[sl] * (w_mass[sl] * v2 + g2)
    return out


def energy_norm(field: ScalarField, problem, elems=None) -> float:
    per = energy_norm_sq_per_element(field, problem)
    if elems is not None:
        per = per[elems]
    return float(np.sqrt(per.sum()))


def plain_norms_sq(field: ScalarField) -> tuple:
    """(||v||^2, ||grad v||^2), unweighted, elementwise-exact quadrature."""
    space = field.space
    pts, w = triangle_rule(2 * space.p)
    _, det, _, _ = space.mesh.affine()
    vals = field.values(pts)
    grads = field.gradients(pts)
    v2 = ((np.abs(vals) ** 2 * w).sum(axis=1) * det).sum()
    g2 = (((np.abs(grads) ** 2).sum(axis=2) * w).sum(axis=1) * det).sum()
    return float(v2), float(g2)


# ---------------------------------------------------------------------------
# Residual functional
# ---------------------------------------------------------------------------

def evaluate_through_ancestors(u_h: ScalarField, mesh: Mesh, elems, ref_pts,
                               anc=None, want_grads=True):
    """Values (and gradients) of u_h at reference points of another mesh's
    elements, reading through the ancestor polynomials (zero off-support)."""
    if anc is None:
        anc = mesh.ancestor_in(u_h.space.mesh)
    elems = np.asarray(elems)
    m = len(ref_pts)
    vals = np.zeros((len(elems), m), dtype=u_h.coeffs.dtype)
    grads = np.zeros((len(elems), m, 2), dtype=u_h.coeffs.dtype) if want_grads else None
    sel = np.nonzero(anc[elems] >= 0)[0]
    if len(sel) == 0:
        return vals, grads
    A = anc[elems[sel]]
    xph = physical_points(mesh.element_verts(elems[sel]), np.asarray(ref_pts))
    sverts = u_h.space.mesh.element_verts()[A]
    sv0 = sverts[:, 0]
    J = np.stack([sverts[:, 1] - sv0, sverts[:, 2] - sv0], axis=-1)
    sdet = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    d = xph - sv0[:, None, :]
    xi = (J[:, 1, 1, None] * d[:, :, 0] - J[:, 0, 1, None] * d[:, :, 1]) / sdet[:, None]
    eta = (-J[:, 1, 0, None] * d[:, :, 0] + J[:, 0, 0, None] * d[:, :, 1]) / sdet[:, None]
    ref = np.stack([xi, eta], axis=-1)
    Bu = u_h.space.basis
    c = u_h.elem_coeffs()[A]
    vals[sel] = np.einsum("en,nem->em", c, Bu.eval(ref))
    if want_grads:
        sJinvT = np.empty_like(J)
        sJinvT[:, 0, 0] = J[:, 1, 1]
        sJinvT[:, 1, 1] = J[:, 0, 0]
        sJinvT[:, 0, 1] = -J[:, 1, 0]
        sJinvT[:, 1, 0] = -J[:, 0, 1]
        sJinvT /= sdet[:, None, None]
        ugr = np.einsum("en,nemd->emd", c, Bu.grad(ref))
        grads[sel] = np.einsum("ekd,emd->emk", sJinvT, ugr)
    return vals, grads


def residual_functional(problem, u_h: ScalarField, v: ScalarField) -> complex:
    """(f, v) - form(u_h, v), integrated on v's mesh.

    v may live on any mesh descending from u_h's mesh (bisections and
    extensions); u_h is read through the ancestor polynomials and is zero on
    cells with no ancestor.  For the damped problem v enters conjugated.
    """
    vs = v.space
    mesh = vs.mesh
    anc = mesh.ancestor_in(u_h.space.mesh)  # raises if not nested
    deg = max(2 * max(u_h.space.p, vs.p), f_rule_degree(max(u_h.space.p, vs.p)))
    pts, w = triangle_rule(deg)
    _, det, _, _ = mesh.affine()
    verts = mesh.element_verts()

    if isinstance(problem, ReactionDiffusion):
        kap2 = problem.kappa_elem(mesh) ** 2
        alpha = Amat = None
    else:
        alpha = problem.alpha_elem(mesh)
        Amat = problem.A_elem(mesh)

    total = 0.0 + 0.0j
    chunk = max(1, _CHUNK // max(1, len(pts) // 8))
    for lo in range(0, mesh.n_elements, chunk):
        idx = np.arange(lo, min(lo + chunk, mesh.n_elements))
        xph = physical_points(verts[idx], pts)
        vvals = v.values(pts, elems=idx).conj()
        vgrads = v.gradients(pts, elems=idx).conj()
        fv = problem.source.eval(xph)
        total += np.einsum("em,m,e->", fv * vvals, w, det[idx])
        uvals, ugrads = evaluate_through_ancestors(u_h, mesh, idx, pts, anc=anc)
        if Amat is None:
            mass = kap2[idx, None] * uvals * vvals
            stiff = np.einsum("emd,emd->em", ugrads, vgrads)
        else:
            mass = -problem.k**2 * alpha[idx, None] * uvals * vvals
            stiff = np.einsum("eab,emb,ema->em", Amat[idx], ugrads, vgrads)
        total -= np.einsum("em,m,e->", mass + stiff, w, det[idx])
    if problem.kind == "real":
        return float(np.real(total))
    return complex(total)
