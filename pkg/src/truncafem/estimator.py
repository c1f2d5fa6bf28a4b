"""A posteriori error estimator with the artificial-boundary term.

Per element the estimator combines a data-oscillation term (with the
guaranteed prefactor h_K/pi), the weighted flux misfit, and a boundary term
mu_K rho_K^{1/2} ||sigma.n|| on faces of the artificial boundary, where sigma
is the equilibrated flux.  The "standard" estimator discards that boundary
term; comparing the two is the point of the whole construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import assemble, energy_norm_sq_per_element, f_rule_degree
from .basis import dubiner
from .equilibration import EquilibratedFlux, FluxWork, OscillationData
from .problems import Helmholtz, ReactionDiffusion
from .spaces import LagrangeSpace, ScalarField, interpolate
from .quadrature import triangle_rule

_SQRT3 = np.sqrt(3.0)  # sqrt(d + 1) with d = 2


@dataclass
class EstimatorReport:
    osc: np.ndarray           # per element, oscillation term (h_K/pi)||f-f_h||
    misfit: np.ndarray        # per element, weighted ||sigma + (A) grad u_h||
    bnd: np.ndarray           # per element, mu_K rho^{1/2} ||sigma.n||
    eta_K: np.ndarray         # osc + misfit + bnd
    mu: np.ndarray
    tail: float
    eta: float = field(init=False)
    eta_tilde: float = field(init=False)

    def __post_init__(self):
        self.eta = float(np.sqrt((self.eta_K**2).sum()))
        self.eta_tilde = float(np.sqrt(((self.osc + self.misfit) ** 2).sum()))

    @property
    def osc_total(self):
        return float(np.sqrt((self.osc**2).sum()))

    @property
    def misfit_total(self):
        return float(np.sqrt((self.misfit**2).sum()))

    @property
    def bnd_total(self):
        return float(np.sqrt((self.bnd**2).sum()))


def mu_k(problem, rho, beta, kappa_elem=None):
    """Trace-inequality constant per element.

    Reaction-diffusion: max(beta_K, sqrt(3)/(kappa_K rho_K)); Helmholtz gets
    the damping prefactor |gamma|^2/Re gamma and kappa replaced by k.
    """
    rho = np.asarray(rho, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if isinstance(problem, ReactionDiffusion):
        return np.maximum(beta, _SQRT3 / (kappa_elem * rho))
    g = problem.gamma
    pref = abs(g) ** 2 / g.real
    return pref * np.maximum(beta, _SQRT3 / (problem.k * rho))


def estimate(problem, u_h: ScalarField, flux: EquilibratedFlux,
             osc: OscillationData, work: FluxWork) -> EstimatorReport:
    """Per-element estimator terms and totals."""
    mesh = u_h.space.mesh
    _, det, _, _ = mesh.affine()
    h, rho, beta = mesh.geometry_arrays()
    R = work.R

    # oscillation: (h_K/pi) ||f - f_h||_K with the f-rule
    D = dubiner(work.q)
    Dv_f = D.eval(work.f_pts)
    fh_vals = np.einsum("em,mq->eq", osc.coeffs, Dv_f) / np.sqrt(det)[:, None]
    osc_norm = np.sqrt(np.einsum("eq,q->e", np.abs(work.f_vals - fh_vals) ** 2,
                                 work.f_w) * det)
    osc_term = h / np.pi * osc_norm

    # misfit: || sigma + theta ||_W with theta and W from the problem
    sig = flux.values()
    diff = sig + work.flux_target
    q2 = np.einsum("eqa,eab,eqb->eq", diff.conj(), work.Wmat, diff).real
    misfit = np.sqrt(np.einsum("eq,q->e", q2, R.tri_w) * det)

    # boundary term
    trace_norms, _ = flux.gammah_trace_norms()
    if isinstance(problem, ReactionDiffusion):
        mu = mu_k(problem, rho, beta, kappa_elem=problem.kappa_elem(mesh))
        tail = problem.tail_norm(mesh)
    else:
        mu = mu_k(problem, rho, beta)
        tail = 0.0
    bnd = mu * np.sqrt(rho) * trace_norms

    return EstimatorReport(osc=osc_term, misfit=misfit, bnd=bnd,
                           eta_K=osc_term + misfit + bnd, mu=mu, tail=tail)


def estimate_solution(problem, u_h: ScalarField):
    """Convenience wrapper: equilibrate then estimate.

    Returns (report, flux, oscillation, work).
    """
    from .equilibration import equilibrate
    flux, osc, work = equilibrate(problem, u_h)
    report = estimate(problem, u_h, flux, osc, work)
    return report, flux, osc, work


# ---------------------------------------------------------------------------
# Residual bound check (the Prager-Synge estimate made executable)
# ---------------------------------------------------------------------------

def batched_energy_norms_sq(space: LagrangeSpace, problem, Y, elems=None):
    """Squared energy norms of several fields given by free-dof columns Y.

    Y has shape (n_free, T); returns (T,) restricted to `elems` if given.
    """
    mesh = space.mesh
    p = space.p
    pts, w = triangle_rule(2 * p)
    N = space.basis.eval(pts)
    G = space.basis.grad(pts)
    _, det, JinvT, _ = mesh.affine()
    if isinstance(problem, ReactionDiffusion):
        wm = problem.kappa_elem(mesh) ** 2
        Aw = None
    else:
        wm = problem.k**2 * problem.alpha_elem(mesh).real
        Aw = problem.A_elem(mesh).real
    full = np.zeros((space.n_dofs_total, Y.shape[1]), dtype=Y.dtype)
    full[~space.constrained] = Y
    sel = np.arange(mesh.n_elements) if elems is None else np.asarray(elems)
    out = np.zeros(Y.shape[1])
    for lo in range(0, len(sel), 4096):
        idx = sel[lo:lo + 4096]
        C = full[space.elem_dofs[idx]]                  # (ch, nd, T)
        vals = np.einsum("ent,nm->emt", C, N)
        refg = np.einsum("ent,nmd->emdt", C, G)
        grads = np.einsum("ekd,emdt->emkt", JinvT[idx], refg)
        v2 = np.einsum("emt,m->et", np.abs(vals) ** 2, w)
        if Aw is None:
            g2 = np.einsum("emkt,m->et", np.abs(grads) ** 2, w)
        else:
            g2 = np.einsum("eab,emat,embt,m->et", Aw[idx], grads.conj(),
                           grads, w).real
        out += (det[idx, None] * (wm[idx, None] * v2 + g2)).sum(axis=0)
    return out


@dataclass
class ResidualBoundReport:
    ratios: np.ndarray
    worst: float
    passed: bool


def residual_bound_check(problem, u_h: ScalarField, eta: float, tail: float,
                         ref_space: LagrangeSpace, ref_system=None,
                         n_trials: int = 50, seed: int = 0) -> ResidualBoundReport:
    """Check |(f,v) - form(u_h,v)| <= eta ||v|| (+ tail term) for random
    enriched test functions v on the reference space.

    The residual is evaluated algebraically: r = F_ref - A_ref x(u_h), where
    x(u_h) interpolates u_h (extended by zero) into the reference space, so
    each trial costs one dot product.  Norms restrict to the covered region
    of u_h's mesh for the reaction-diffusion bound; the damped problem uses
    the global weighted norm.
    """
    if ref_system is None:
        ref_system = assemble(problem, ref_space)
    x_ext = interpolate(u_h, ref_space).coeffs
    r = ref_system.rhs - ref_system.matrix @ x_ext

    rng = np.random.default_rng(seed)
    if problem.kind == "complex":
        Y = rng.standard_normal((ref_space.n_free, n_trials)) \
            + 1j * rng.standard_normal((ref_space.n_free, n_trials))
    else:
        Y = rng.standard_normal((ref_space.n_free, n_trials))
    Y /= np.linalg.norm(Y, axis=0, keepdims=True)

    res = np.abs(Y.conj().T @ r)

    if isinstance(problem, ReactionDiffusion):
        anc = ref_space.mesh.ancestor_in(u_h.space.mesh)
        inside = np.nonzero(anc >= 0)[0]
        nrm_in = np.sqrt(batched_energy_norms_sq(ref_space, problem, Y, inside))
        if tail > 0:
            outside = np.nonzero(anc < 0)[0]
            nrm_out = np.sqrt(batched_energy_norms_sq(ref_space, problem, Y, outside))
        else:
            nrm_out = 0.0
        bound = eta * nrm_in + tail * nrm_out
    else:
        nrm = np.sqrt(batched_energy_norms_sq(ref_space, problem, Y))
        bound = eta * nrm
    ratios = res / np.maximum(bound, 1e-300)
    worst = float(ratios.max()) if len(ratios) else 0.0
    return ResidualBoundReport(ratios=ratios, worst=worst, passed=worst <= 1.0)
