"""SOLVE -> ESTIMATE -> MARK -> REFINE loop with boundary pushing.

Marking is Doerfler bulk chasing on the squared element estimators.  REFINE
deviates from the textbook loop: marked elements touching the artificial
boundary (sharing at least a vertex with it) are never bisected; instead the
truncation box grows by one unit for the next mesh.  Errors are measured
against a reference solution of degree p+2 on the same mesh extended to a
large fixed truncation box, with the discrete solution extended by zero, so
the measured error includes the truncation contribution.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .assembly import assemble, energy_norm_sq_per_element, solve, solve_field
from .equilibration import equilibrate
from .estimator import EstimatorReport, estimate
from .geometry import Mesh, build_initial_mesh, extend_to, extend_truncation, refine_nvb
from .problems import Helmholtz, ReactionDiffusion
from .spaces import LagrangeSpace, ScalarField, interpolate

logger = logging.getLogger(__name__)


class AdaptiveError(Exception):
    pass


@dataclass
class AdaptiveConfig:
    p: int = 1
    theta: float = 0.2
    max_iter: int = 64
    L0: int = 1
    L_ref: int = 48
    ref_degree_increment: int = 2
    ref_every: int = 1          # reference-solve period (1 = every iteration)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise AdaptiveError("Doerfler parameter must be in (0, 1)")
        if self.L_ref <= self.L0:
            raise AdaptiveError("reference truncation must exceed the initial one")
        if self.max_iter < 0 or self.L0 < 1:
            raise AdaptiveError("invalid iteration count or initial truncation")


@dataclass
class IterationRecord:
    iter: int
    n_dofs: int
    L: int
    n_elements: int
    eta: float
    eta_tilde: float
    osc_total: float
    misfit_total: float
    bnd_total: float
    tail: float
    error_global: float = np.nan
    error_omega0: float = np.nan
    effectivity: float = np.nan
    effectivity_tilde: float = np.nan
    equilibration_moment: float = np.nan
    n_marked: int = 0
    boundary_pushed: bool = False
    closure_bisections: int = 0
    closure_boundary_bisections: int = 0
    direct_boundary_bisections: int = 0
    solve_seconds: float = 0.0


@dataclass
class RunHistory:
    problem: object
    config: AdaptiveConfig
    records: list
    status: str = "completed"
    final_mesh: Optional[Mesh] = None
    final_field: Optional[ScalarField] = None
    final_flux: object = None
    final_report: Optional[EstimatorReport] = None
    final_work: object = None
    final_ref_field: Optional[ScalarField] = None
    final_ref_system: object = None

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=float)


def dorfler_mark(eta_K, theta: float) -> np.ndarray:
    """Minimal prefix of the eta^2-descending order reaching theta * total.

    Ties break by ascending element id; an all-zero estimator marks nothing.
    """
    eta2 = np.asarray(eta_K, dtype=float) ** 2
    if len(eta2) == 0:
        raise AdaptiveError("empty estimator report")
    total = eta2.sum()
    if total <= 0.0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(eta2)), -eta2))
    csum = np.cumsum(eta2[order])
    target = theta * total
    k = int(np.searchsorted(csum, target * (1.0 - 1e-12))) + 1
    k = min(k, len(eta2))
    marked = order[:k]
    if eta2[marked[-1]] == 0.0:  # never mark zero-estimator elements
        marked = marked[eta2[marked] > 0.0]
    return np.sort(marked)


def refine_or_extend(mesh: Mesh, marked, domain=None):
    """NVB-refine interior-marked elements; push the boundary once if any
    marked element touches the artificial boundary (vertex contact).

    Returns (mesh, boundary_pushed, stats_list).
    """
    marked = np.asarray(marked, dtype=np.int64)
    stats = []
    pushed = False
    if len(marked) == 0:
        return mesh, pushed, stats
    touches = mesh.element_touches_gammah()
    interior_marked = marked[~touches[marked]]
    boundary_marked = marked[touches[marked]]
    out = mesh
    if len(interior_marked):
        out = refine_nvb(out, interior_marked)
        stats.append(out.stats)
    if len(boundary_marked):
        out = extend_truncation(out, domain or mesh.domain)
        stats.append(out.stats)
        pushed = True
    return out, pushed, stats


def reference_error(problem, u_h: ScalarField, config: AdaptiveConfig,
                    keep_rhs: bool = False):
    """Error of u_h against the enriched reference solution.

    Returns (error_global, error_omega0, ref_field, ref_rhs-or-None);
    error_omega0 is NaN for the reaction-diffusion problem.  The SPD problem
    is solved with element-interior static condensation (exact elimination),
    certified against the full system afterwards.
    """
    from .assembly import CondensedSystem, apply_form
    mesh = u_h.space.mesh
    ref_mesh = extend_to(mesh, config.L_ref)
    ref_space = LagrangeSpace(ref_mesh, u_h.space.p + config.ref_degree_increment)
    if isinstance(problem, ReactionDiffusion):
        cond = CondensedSystem(problem, ref_space)
        x = cond.solve()
        rhs_full = cond.rhs_full
        del cond
        res = np.linalg.norm(apply_form(problem, ref_space, x) - rhs_full)
        scale = np.linalg.norm(rhs_full) + np.linalg.norm(x)
        if res > 1e-8 * max(scale, 1e-300):
            raise AdaptiveError(f"reference solve residual {res:.3e} too large")
        ref_field = ref_space.field_from_free(x)
    else:
        ref_system = assemble(problem, ref_space)
        ref_field = ref_space.field_from_free(solve(ref_system))
        rhs_full = ref_system.rhs
        del ref_system
    diff = ref_space.field_from_free(ref_field.coeffs - interpolate(u_h, ref_space).coeffs)
    per = energy_norm_sq_per_element(diff, problem)
    error_global = float(np.sqrt(per.sum()))
    if isinstance(problem, Helmholtz):
        region = problem.region_elem(ref_mesh)
        error_omega0 = float(np.sqrt(per[region == 0].sum()))
    else:
        error_omega0 = np.nan
    return error_global, error_omega0, ref_field, (rhs_full if keep_rhs else None)


def convergence_rate_fit(n_dofs, errors, window=None) -> float:
    """Least-squares slope of log(error) against log(n_dofs)."""
    n_dofs = np.asarray(n_dofs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if window is not None:
        n_dofs = n_dofs[window]
        errors = errors[window]
    ok = np.isfinite(errors) & (errors > 0)
    n_dofs, errors = n_dofs[ok], errors[ok]
    if len(n_dofs) < 5:
        raise AdaptiveError("rate fit needs at least 5 points")
    A = np.column_stack([np.log(n_dofs), np.ones(len(n_dofs))])
    slope, _ = np.linalg.lstsq(A, np.log(errors), rcond=None)[0]
    return float(slope)


def _equilibration_moment(work, flux, osc) -> float:
    """Worst relative residual moment of the equilibration identity."""
    from .oracles import check_equilibration
    return check_equilibration(work, flux, osc).ratio


def run_adaptive_loop(problem, config: AdaptiveConfig,
                      mesh_callback=None) -> RunHistory:
    """Run the adaptive loop; records the initial iterate plus one record per
    refinement step (max_iter + 1 records unless the estimator vanishes)."""
    mesh = build_initial_mesh(problem.domain, config.L0)
    records = []
    history = RunHistory(problem=problem, config=config, records=records)

    for it in range(config.max_iter + 1):
        t0 = time.perf_counter()
        space = LagrangeSpace(mesh, config.p)
        u_h = solve_field(problem, space)
        flux, osc, work = equilibrate(problem, u_h)
        report = estimate(problem, u_h, flux, osc, work)
        rec = IterationRecord(
            iter=it, n_dofs=space.n_free, L=mesh.L, n_elements=mesh.n_elements,
            eta=report.eta, eta_tilde=report.eta_tilde,
            osc_total=report.osc_total, misfit_total=report.misfit_total,
            bnd_total=report.bnd_total, tail=report.tail,
            equilibration_moment=_equilibration_moment(work, flux, osc),
        )
        last = it == config.max_iter
        if not last:
            work.release()  # keep peak memory flat across the reference solve
        if config.ref_every and (it % config.ref_every == 0 or last):
            err_g, err_0, ref_field, ref_sys = reference_error(
                problem, u_h, config, keep_system=last)
            rec.error_global = err_g
            rec.error_omega0 = err_0
            rec.effectivity = report.eta / err_g if err_g > 0 else np.inf
            rec.effectivity_tilde = report.eta_tilde / err_g if err_g > 0 else np.inf
            if last:
                history.final_ref_field = ref_field
                history.final_ref_system = ref_sys
        if mesh_callback is not None:
            mesh_callback(it, mesh, u_h, report)
        done = last
        if not last:
            marked = dorfler_mark(report.eta_K, config.theta)
            rec.n_marked = len(marked)
            if len(marked) == 0:
                history.status = "converged"
                done = True
            else:
                mesh, pushed, stats = refine_or_extend(mesh, marked,
                                                       problem.domain)
                rec.boundary_pushed = pushed
                rec.closure_bisections = sum(s.closure_bisections for s in stats)
                rec.closure_boundary_bisections = sum(
                    s.closure_boundary_bisections for s in stats)
                rec.direct_boundary_bisections = sum(
                    s.direct_boundary_bisections for s in stats)
        rec.solve_seconds = time.perf_counter() - t0
        records.append(rec)
        if len(records) >= 2 and records[-1].n_dofs <= records[-2].n_dofs:
            raise AdaptiveError("dof count did not increase across iterations")
        logger.info("iter %3d: N=%7d L=%2d eta=%.4e err=%.4e (%.1fs)", it,
                    rec.n_dofs, rec.L, rec.eta, rec.error_global,
                    rec.solve_seconds)
        if done:
            history.final_mesh = u_h.space.mesh
            history.final_field = u_h
            history.final_flux = flux
            history.final_report = report
            history.final_work = work
            break
    return history
