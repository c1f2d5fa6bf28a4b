"""Equilibrated-flux reconstruction by vertex-patch minimization.

For each mesh vertex a, the patch problem minimizes the weighted misfit
between a Raviart-Thomas field and -psi_a grad u_h (resp. -psi_a A grad u_h)
subject to an elementwise-exact divergence constraint, with zero normal trace
on the part of the patch boundary where the hat function vanishes.  Summing
the patch minimizers gives a globally H(div)-conforming flux whose divergence
matches the PDE residual data elementwise; on the artificial boundary its
normal trace is free and feeds the boundary term of the estimator.

Implementation notes.  The local RT_q dual basis is built once on the
reference triangle (edge dofs are moments of the normal trace against
orthonormal Legendre polynomials in the local edge parametrization, interior
dofs are moments against vector Dubiner modes) and Piola-mapped to each
element, so element matrices are reference-tensor contractions with 2x2
geometry factors.  Shared-face dofs agree between neighbors up to a known
sign/parity factor, which is what makes the assembled flux exactly
conforming.  Patch multipliers use the unnormalized mapped Dubiner basis,
which keeps the saddle blocks scale-free under bisection; interior-vertex
patches carry a mean-zero gauge row that also absorbs the (round-off level)
compatibility defect of the datum.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg

from .basis import dubiner
from .geometry import ARTIFICIAL_GAMMA_H, Mesh
from .problems import Helmholtz, ReactionDiffusion
from .quadrature import gauss1d, physical_points, triangle_rule
from .spaces import ScalarField
from .assembly import f_rule_degree

_LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))
_CHUNK = 20000


class EquilibrationError(Exception):
    pass


def legendre01(m: int, r):
    """Orthonormal Legendre polynomial on [0, 1]."""
    c = np.zeros(m + 1)
    c[m] = 1.0
    return np.sqrt(2 * m + 1) * npleg.legval(2.0 * np.asarray(r) - 1.0, c)


class RTReference:
    """Dual RT_q basis and reference tensors on the unit triangle.

    Edge dofs (3 blocks of q+1) are moments of the outward normal trace
    against orthonormal Legendre polynomials in the local 0->1 edge
    parametrization with arc-length measure; the dual function attached to
    (edge e, mode m) therefore has physical normal trace L_m(r)/|e| on e and
    zero on the other edges.  Interior dofs carry zero normal trace.
    """

    def __init__(self, q: int):
        self.q = q
        D = dubiner(q)
        M = D.dim
        self.n_mult = M
        n_edge = q + 1
        self.n_edge_modes = n_edge
        self.ndof = 3 * n_edge + q * (q + 1)
        self.n_interior = q * (q + 1)

        pts, w = triangle_rule(2 * q + 2)
        self.tri_pts, self.tri_w = pts, w
        Dv = D.eval(pts)
        Dg = D.grad(pts)
        top = D.top_degree_slice()

        ngen = 2 * M + n_edge
        if ngen != self.ndof:
            raise EquilibrationError("generator count mismatch")
        nq = len(w)
        genv = np.zeros((ngen, nq, 2))
        gend = np.zeros((ngen, nq))
        genv[:M, :, 0] = Dv
        gend[:M] = Dg[:, :, 0]
        genv[M:2 * M, :, 1] = Dv
        gend[M:2 * M] = Dg[:, :, 1]
        Dtv, Dtg = Dv[top], Dg[top]
        genv[2 * M:, :, 0] = pts[:, 0] * Dtv
        genv[2 * M:, :, 1] = pts[:, 1] * Dtv
        gend[2 * M:] = 2.0 * Dtv + pts[:, 0] * Dtg[:, :, 0] + pts[:, 1] * Dtg[:, :, 1]

        # --- dof functionals -> Vandermonde -------------------------------
        RV = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        r1, w1 = gauss1d(q + 2)
        r01 = 0.5 * (r1 + 1.0)
        w01 = 0.5 * w1
        leg = np.array([legendre01(m, r01) for m in range(n_edge)])

        V = np.zeros((self.ndof, ngen))
        for e, (a, b) in enumerate(_LOCAL_EDGES):
            t = RV[b] - RV[a]
            ln = float(np.hypot(*t))
            n_out = np.array([t[1], -t[0]]) / ln
            epts = RV[a] + np.outer(r01, t)
            gv = self._eval_generators(D, top, epts)
            tr = gv @ n_out
            V[e * n_edge:(e + 1) * n_edge] = np.einsum(
                "gp,mp,p->mg", tr, leg, w01) * ln
        Mlow = D.degree_dim(q - 1)
        row = 3 * n_edge
        for comp in range(2):
            V[row:row + Mlow] = np.einsum("gq,mq,q->mg",
                                          genv[:, :, comp], Dv[:Mlow], w)
            row += Mlow
        if row != self.ndof:
            raise EquilibrationError("interior dof count mismatch")

        self.cond = float(np.linalg.cond(V))
        if self.cond > 1e12:
            raise EquilibrationError(f"RT dof matrix ill-conditioned: {self.cond:.2e}")
        C = np.linalg.inv(V)

        self.Wvals = np.einsum("gj,gqd->jqd", C, genv)   # (ndof, nq, 2)
        self.Wdiv = np.einsum("gj,gq->jq", C, gend)      # (ndof, nq)
        self.Bhat = np.einsum("jq,mq,q->jm", self.Wdiv, Dv, w)
        self.T = np.einsum("iqa,jqb,q->abij", self.Wvals, self.Wvals, w)
        self.Dv = Dv
        self.const_value = float(Dv[0, 0])               # D_0 is constant
        # hat-function (barycentric) values at the triangle rule
        lam = np.empty((3, nq))
        lam[1] = pts[:, 0]
        lam[2] = pts[:, 1]
        lam[0] = 1.0 - lam[1] - lam[2]
        self.hat_vals = lam

    def _eval_generators(self, D, top, pts):
        Dv = D.eval(pts)
        M = D.dim
        out = np.zeros((2 * M + (self.q + 1), len(pts), 2))
        out[:M, :, 0] = Dv
        out[M:2 * M, :, 1] = Dv
        out[2 * M:, :, 0] = pts[:, 0] * Dv[top]
        out[2 * M:, :, 1] = pts[:, 1] * Dv[top]
        return out

    def edge_dofs(self, e: int):
        n = self.n_edge_modes
        return np.arange(e * n, (e + 1) * n)

    @property
    def interior_dofs(self):
        return np.arange(3 * self.n_edge_modes, self.ndof)


@lru_cache(maxsize=None)
def rt_reference(q: int) -> RTReference:
    return RTReference(q)


def chi_signs(mesh: Mesh, nE: int) -> np.ndarray:
    """Factor relating local edge-dof coefficients to the globally oriented
    face unknowns: +1 when the local edge runs from the lower to the higher
    vertex id, else (-1)^(m+1) for Legendre mode m."""
    modes = np.arange(nE)
    parity = np.where(modes % 2 == 0, -1.0, 1.0)
    elems = mesh.elements
    chi = np.ones((mesh.n_elements, 3, nE))
    for e, (a, b) in enumerate(_LOCAL_EDGES):
        rev = elems[:, a] > elems[:, b]
        chi[rev, e, :] = parity
    return chi


# ---------------------------------------------------------------------------
# Per-mesh work data
# ---------------------------------------------------------------------------

@dataclass
class OscillationData:
    """Broken polynomial f_h = sum_a Pi_q(psi_a f) of degree q = p + 2.

    coeffs are per-element coefficients in the L2(K)-orthonormal basis;
    vertex_moments are the per-vertex projection moments in the unnormalized
    multiplier basis, as consumed by the divergence constraints.
    """

    q: int
    coeffs: np.ndarray
    vertex_moments: np.ndarray


class FluxWork:
    """Precomputed element data shared by all patch problems of one solve."""

    def __init__(self, problem, u_h: ScalarField):
        space = u_h.space
        mesh = space.mesh
        self.problem = problem
        self.u_h = u_h
        self.space = space
        self.mesh = mesh
        p = space.p
        self.q = p + 2
        R = rt_reference(self.q)
        self.R = R
        self.top = mesh.topology()

        J, det, _, _ = mesh.affine()
        self.J, self.det = J, det
        ne = mesh.n_elements
        complex_path = problem.kind == "complex"
        dtype = complex if complex_path else float

        if isinstance(problem, ReactionDiffusion):
            self.kap2 = problem.kappa_elem(mesh) ** 2
            Wmat = np.broadcast_to(np.eye(2), (ne, 2, 2)).copy()
            self.alpha = None
            self.Amat = None
        elif isinstance(problem, Helmholtz):
            problem.check_source_covered(mesh)
            self.alpha = problem.alpha_elem(mesh)
            self.Amat = problem.A_elem(mesh)
            Wmat = np.linalg.inv(self.Amat.real)
            self.kap2 = None
        else:
            raise TypeError(f"unknown problem type {type(problem)}")
        self.Wmat = Wmat

        # geometry factors: Wgeo = J^T W J / det (RT mass), JW = J^T W (targets)
        self.Wgeo = np.einsum("eda,edc,ecb->eab", J, Wmat, J) / det[:, None, None]
        self.JW = np.einsum("eda,edc->eac", J, Wmat)

        pts, w = R.tri_pts, R.tri_w
        self.u_vals = u_h.values(pts)
        self.u_grads = u_h.gradients(pts)
        ghat = mesh.hat_gradients()
        self.hat_grads = ghat
        hatv = R.hat_vals

        # theta = grad u_h (RD) or A grad u_h (Helmholtz); the per-vertex
        # target is psi_a theta
        if complex_path:
            self.flux_target = np.einsum("eab,emb->ema", self.Amat, self.u_grads)
        else:
            self.flux_target = self.u_grads

        # source moments (psi_a f, s~_m)_K with the f-rule
        fpts, fw = triangle_rule(f_rule_degree(p))
        self.f_pts, self.f_w = fpts, fw
        D = dubiner(self.q)
        Dv_f = D.eval(fpts)
        lam_f = np.empty((3, len(fw)))
        lam_f[1] = fpts[:, 0]
        lam_f[2] = fpts[:, 1]
        lam_f[0] = 1.0 - lam_f[1] - lam_f[2]
        self.mult_f_vals = Dv_f
        self.hat_f_vals = lam_f

        verts = mesh.element_verts()
        self.f_vals = np.empty((ne, len(fw)), dtype=dtype)
        self.fmom = np.empty((ne, 3, R.n_mult), dtype=dtype)
        self.divmom = np.empty((ne, 3, R.n_mult), dtype=dtype)
        self.tvec = np.empty((ne, 3, R.ndof), dtype=dtype)
        for lo in range(0, ne, _CHUNK):
            sl = slice(lo, min(lo + _CHUNK, ne))
            xph = physical_points(verts[sl], fpts)
            fv = problem.source.eval(xph).astype(dtype)
            self.f_vals[sl] = fv
            tmp = np.einsum("eq,sq,q->esq", fv, lam_f, fw)
            self.fmom[sl] = np.einsum("esq,mq->esm", tmp, Dv_f) * det[sl, None, None]

            # divergence datum (moments against s~):
            #   RD:  Pi(psi f) - kappa^2 psi u_h - grad psi . grad u_h
            #   Hz:  Pi(psi f) + k^2 alpha psi u_h - (A grad psi) . grad u_h
            if complex_path:
                react = (problem.k**2) * self.alpha[sl, None] * self.u_vals[sl]
                gh = np.einsum("eab,esb->esa", self.Amat[sl], ghat[sl])
            else:
                react = -self.kap2[sl, None] * self.u_vals[sl]
                gh = ghat[sl]
            cross = np.einsum("esa,eqa->esq", gh, self.u_grads[sl])
            datum = react[:, None, :] * hatv[None, :, :] - cross
            self.divmom[sl] = self.fmom[sl] + np.einsum(
                "esq,mq,q->esm", datum, R.Dv, w) * det[sl, None, None]

            # target vectors: t_i = sum_q w what_i[q] . (J^T W psi_a theta[q])
            tau = np.einsum("eac,eqc->eqa", self.JW[sl], self.flux_target[sl])
            self.tvec[sl] = np.einsum("iqa,sq,eqa,q->esi", R.Wvals, hatv, tau, w)

        self.chi = chi_signs(mesh, R.n_edge_modes)
        # global datum magnitude, floors the relative compatibility check on
        # patches where the datum vanishes identically
        self.divmom_scale = float(np.linalg.norm(self.divmom.reshape(-1, R.n_mult),
                                                 axis=1).max()) if ne else 0.0
        # objective constants: integral of W |psi_a theta|^2 per (element, slot)
        qform = np.einsum("eqa,eab,eqb->eq", self.flux_target.conj(), Wmat,
                          self.flux_target).real
        self.tnorm2 = np.einsum("sq,eq,q->es", R.hat_vals**2, qform,
                                R.tri_w) * det[:, None]

    def element_mass(self, elems) -> np.ndarray:
        """Local RT mass matrices (m, ndof, ndof) in the weighted metric."""
        return np.einsum("eab,abij->eij", self.Wgeo[elems], self.R.T)

    def release(self):
        """Drop the big per-element arrays once patches and the estimator are
        done; keeps peak memory flat across the reference solve."""
        for name in ("u_vals", "u_grads", "flux_target", "f_vals", "fmom",
                     "divmom", "tvec", "tnorm2", "Wgeo", "JW", "chi"):
            if hasattr(self, name):
                delattr(self, name)

    def oscillation(self) -> OscillationData:
        coeffs = self.fmom.sum(axis=1) / np.sqrt(self.det)[:, None]
        return OscillationData(q=self.q, coeffs=coeffs, vertex_moments=self.fmom)


# ---------------------------------------------------------------------------
# Patch problems
# ---------------------------------------------------------------------------

@dataclass
class PatchFlux:
    vertex: int
    elems: np.ndarray
    coeffs: np.ndarray        # (m, ndof) local dof coefficients per element
    compatibility: float      # relative compatibility defect of the datum
    objective: float          # attained weighted misfit (squared)


def _patch_layout(work: FluxWork, a: int):
    R = work.R
    top = work.top
    elems, slots = top.vertex_elems_slots(a)
    if len(elems) == 0:
        raise EquilibrationError(f"vertex {a} has no incident elements")
    nE = R.n_edge_modes
    nI = R.n_interior
    m = len(elems)

    faces = top.elem_face[elems]                         # (m, 3)
    contains = (top.face_verts[faces] == a).any(axis=2)  # local edges with a
    spoke = np.unique(faces[contains])
    n_face_dofs = len(spoke) * nE
    n_x = n_face_dofs + m * nI

    pos = np.searchsorted(spoke, faces)
    pos[~contains] = -1
    gidx_all = np.full((m, R.ndof), -1, dtype=np.int64)
    ar = np.arange(nE)
    edge_block = np.where(contains[:, :, None],
                          pos[:, :, None] * nE + ar[None, None, :], -1)
    gidx_all[:, :3 * nE] = edge_block.reshape(m, 3 * nE)
    gidx_all[:, 3 * nE:] = (n_face_dofs + np.arange(m)[:, None] * nI
                            + np.arange(nI)[None, :])
    sgn_all = np.ones((m, R.ndof))
    sgn_all[:, :3 * nE] = work.chi[elems].reshape(m, 3 * nE)
    interior_vertex = not top.boundary_vertex[a]
    return elems, gidx_all, sgn_all, slots, n_x, interior_vertex


def solve_patch(work: FluxWork, a: int, want_objective: bool = False) -> PatchFlux:
    """Constrained patch minimization via the bordered saddle system."""
    R = work.R
    elems, gidx_all, sgn_all, slots, n_x, interior_vertex = _patch_layout(work, a)
    m = len(elems)
    nM = R.n_mult
    n = n_x + m * nM + (1 if interior_vertex else 0)
    complex_path = work.problem.kind == "complex"

    K = np.zeros((n, n))
    rhs = np.zeros(n, dtype=complex if complex_path else float)
    Mlocs = work.element_mass(elems)
    tv = work.tvec[elems, slots]          # (m, ndof)
    dm = work.divmom[elems, slots]        # (m, nM)
    BhatT = R.Bhat.T
    for i in range(m):
        gidx = gidx_all[i]
        act = np.nonzero(gidx >= 0)[0]
        rows = gidx[act]
        sg = sgn_all[i, act]
        K[rows[:, None], rows[None, :]] += (Mlocs[i][act[:, None], act[None, :]]
                                            * (sg[:, None] * sg[None, :]))
        Bblk = BhatT[:, act] * sg[None, :]
        mr = n_x + i * nM
        K[mr:mr + nM, rows] = Bblk
        K[rows, mr:mr + nM] = Bblk.T
        rhs[rows] += -sg * tv[i, act]
        rhs[mr:mr + nM] = dm[i]
        if interior_vertex:
            g0 = work.det[elems[i]] * R.const_value
            K[mr, n - 1] = g0
            K[n - 1, mr] = g0

    comp_rel = 0.0
    if interior_vertex:
        # (datum, 1)_omega = sum_K (datum, s~_0)_K / D_0; Galerkin
        # orthogonality makes this vanish up to round-off
        comp = abs(dm[:, 0].sum()) / R.const_value
        scale = np.linalg.norm(dm, axis=1).sum()
        comp_rel = float(comp / max(scale, 1e-3 * work.divmom_scale, 1e-300))
        if comp_rel > 1e-9:
            raise EquilibrationError(
                f"patch datum at vertex {a} violates compatibility "
                f"({comp_rel:.3e} relative); is u_h the Galerkin solution?")

    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise EquilibrationError(f"singular patch system at vertex {a}") from exc
    x = sol[:n_x]

    mask = gidx_all >= 0
    coeffs = np.where(mask, sgn_all * x[np.maximum(gidx_all, 0)], 0.0)
    obj = 0.0
    if want_objective:
        for i in range(m):
            c = coeffs[i]
            quad = np.real(np.conj(c) @ Mlocs[i] @ c)
            lin = 2.0 * np.real(np.conj(c) @ tv[i])
            obj += quad + lin + work.tnorm2[elems[i], slots[i]]
        obj = max(obj, 0.0)
    return PatchFlux(vertex=a, elems=elems, coeffs=coeffs,
                     compatibility=comp_rel, objective=obj)


# ---------------------------------------------------------------------------
# Global flux
# ---------------------------------------------------------------------------

@dataclass
class EquilibratedFlux:
    """Global flux, stored as local dof coefficients per element."""

    mesh: Mesh
    q: int
    kind: str
    coeffs: np.ndarray

    def reference(self) -> RTReference:
        return rt_reference(self.q)

    def values(self, elems=None):
        """Physical values at the reference triangle rule points."""
        R = self.reference()
        J, det, _, _ = self.mesh.affine()
        c = self.coeffs
        if elems is not None:
            c = c[elems]
            J = J[elems]
            det = det[elems]
        shat = np.einsum("ei,iqd->eqd", c, R.Wvals)
        return np.einsum("ead,eqd->eqa", J, shat) / det[:, None, None]

    def divergence_coeffs(self):
        """Elementwise divergence in the orthonormal element basis, (ne, M)."""
        R = self.reference()
        _, det, _, _ = self.mesh.affine()
        return (self.coeffs @ R.Bhat) / np.sqrt(det)[:, None]

    def normal_trace_coeffs(self):
        """Per (element, local edge): orthonormal Legendre coefficients of
        sigma.n_out in the local 0->1 parametrization, shape (ne, 3, q+1)."""
        R = self.reference()
        nE = R.n_edge_modes
        c = self.coeffs[:, :3 * nE].reshape(len(self.coeffs), 3, nE)
        v = self.mesh.element_verts()
        out = np.empty_like(c)
        for e, (a, b) in enumerate(_LOCAL_EDGES):
            ln = np.hypot(*(v[:, b] - v[:, a]).T)
            out[:, e] = c[:, e] / ln[:, None]
        return out

    def gammah_trace_norms(self):
        """(per-element ||sigma.n|| on its Gamma_h faces, per-face table).

        The table rows are (face_id, element_id, trace_norm), sorted by face.
        """
        R = self.reference()
        top = self.mesh.topology()
        nE = R.n_edge_modes
        v = self.mesh.element_verts()
        out = np.zeros(self.mesh.n_elements)
        table = []
        for e, (a, b) in enumerate(_LOCAL_EDGES):
            faces = top.elem_face[:, e]
            sel = np.nonzero(top.face_tag[faces] == ARTIFICIAL_GAMMA_H)[0]
            if len(sel) == 0:
                continue
            ln = np.hypot(*(v[sel, b] - v[sel, a]).T)
            c = self.coeffs[sel, e * nE:(e + 1) * nE]
            norm2 = (np.abs(c) ** 2).sum(axis=1) / ln
            out[sel] += norm2
            table.extend((int(f), int(E), float(np.sqrt(n2)))
                         for E, f, n2 in zip(sel, faces[sel], norm2))
        table.sort()
        return np.sqrt(out), table

    def conformity_defect(self) -> float:
        """Worst relative mismatch of the oriented face dofs across interior
        faces (zero by construction up to round-off)."""
        top = self.mesh.topology()
        R = self.reference()
        nE = R.n_edge_modes
        chi = chi_signs(self.mesh, nE)
        lam = self.coeffs[:, :3 * nE].reshape(-1, 3, nE) * chi
        f_all = top.elem_face.ravel()
        lam_all = lam.reshape(-1, nE)
        order = np.argsort(f_all, kind="stable")
        fs = f_all[order]
        ls = lam_all[order]
        same = fs[1:] == fs[:-1]
        if not same.any():
            return 0.0
        jump = np.abs(ls[1:][same] - ls[:-1][same]).max()
        scale = max(np.abs(lam_all).max(), 1e-300)
        return float(jump / scale)


def assemble_flux(work: FluxWork, patch_fluxes=None) -> EquilibratedFlux:
    """Sum patch contributions into the global flux (solving them if needed)."""
    mesh = work.mesh
    R = work.R
    dtype = complex if work.problem.kind == "complex" else float
    coeffs = np.zeros((mesh.n_elements, R.ndof), dtype=dtype)
    if patch_fluxes is None:
        patch_fluxes = (solve_patch(work, a) for a in range(mesh.n_vertices))
    for pf in patch_fluxes:
        coeffs[pf.elems] += pf.coeffs
    flux = EquilibratedFlux(mesh=mesh, q=R.q, kind=work.problem.kind,
                            coeffs=coeffs)
    defect = flux.conformity_defect()
    if defect > 1e-9:
        raise EquilibrationError(
            f"assembled flux is not H(div)-conforming: jump {defect:.3e}")
    return flux


def equilibrate(problem, u_h: ScalarField):
    """Full reconstruction: returns (flux, oscillation, work)."""
    work = FluxWork(problem, u_h)
    flux = assemble_flux(work)
    return flux, work.oscillation(), work
