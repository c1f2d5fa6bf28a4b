import numpy as np
import pytest

from truncafem.assembly import assemble, energy_norm, solve, solve_field
from truncafem.equilibration import equilibrate
from truncafem.estimator import (
    estimate,
    estimate_solution,
    mu_k,
    residual_bound_check,
)
from truncafem.geometry import (
    FullPlane,
    TShapedWaveguide,
    build_initial_mesh,
    extend_to,
    refine_nvb,
)
from truncafem.problems import (
    CallableSource,
    Helmholtz,
    IndicatorSquareSource,
    ProblemError,
    ReactionDiffusion,
    ZeroSource,
)
from truncafem.quadrature import triangle_rule
from truncafem.spaces import LagrangeSpace, interpolate


def test_mu_k_values():
    rd = ReactionDiffusion()
    rho = 0.25 / ((1 + np.sqrt(2)) / 2)
    beta = 1.0 / rho
    mu = mu_k(rd, np.array([rho]), np.array([beta]), kappa_elem=np.array([1.0]))
    assert mu[0] == pytest.approx(np.sqrt(3) / rho)
    # saturation: kappa rho -> infinity leaves only beta
    mu2 = mu_k(rd, np.array([rho]), np.array([beta]),
               kappa_elem=np.array([1e9]))
    assert mu2[0] == pytest.approx(beta)
    # Helmholtz prefactor |gamma|^2 / Re gamma = 2 for gamma = 1 + i
    hz = Helmholtz(k=0.7 * 2 * np.pi, gamma=1 + 1j)
    muh = mu_k(hz, np.array([rho]), np.array([beta]))
    assert muh[0] == pytest.approx(2.0 * max(beta, np.sqrt(3) / (hz.k * rho)))


def bspline2(t):
    t = np.asarray(t, dtype=float)
    return np.where((t >= -2) & (t < -1), (t + 2) ** 2 / 2,
                    np.where((t >= -1) & (t < 0), (-2 * t * t - 2 * t + 1) / 2,
                             np.where((t >= 0) & (t <= 1), (1 - t) ** 2 / 2, 0.0)))


def bspline2_dd(t):
    t = np.asarray(t, dtype=float)
    return np.where((t >= -2) & (t < -1), 1.0,
                    np.where((t >= -1) & (t < 0), -2.0,
                             np.where((t >= 0) & (t <= 1), 1.0, 0.0)))


@pytest.fixture(scope="module")
def manufactured_spline():
    """u = B(x)B(y) with a C^1 quadratic spline: u lies in the p=4 space,
    grad u is H(div)-conforming and vanishes near the truncation box."""

    def g(p):
        return bspline2(p[..., 0]) * bspline2(p[..., 1])

    def f(p):
        return g(p) - (bspline2_dd(p[..., 0]) * bspline2(p[..., 1])
                       + bspline2(p[..., 0]) * bspline2_dd(p[..., 1]))

    rd = ReactionDiffusion(kappa=1.0, source=CallableSource(f, support_radius=2.0))
    mesh = build_initial_mesh(FullPlane(), 3)
    space = LagrangeSpace(mesh, 4)
    u = solve_field(rd, space)
    return rd, mesh, space, u, g


def test_manufactured_solution_is_exact(manufactured_spline):
    rd, mesh, space, u, g = manufactured_spline
    coords = space.node_coordinates()
    assert np.abs(u.full() - g(coords)).max() < 1e-12


def test_manufactured_estimator_vanishes(manufactured_spline):
    rd, mesh, space, u, g = manufactured_spline
    report, flux, osc, work = estimate_solution(rd, u)
    assert report.eta < 1e-9
    # and the flux is exactly -grad u
    sig = flux.values()
    assert np.abs(sig + work.u_grads).max() < 1e-9


def test_zero_source_zero_estimator():
    rd = ReactionDiffusion(source=ZeroSource())
    mesh = build_initial_mesh(FullPlane(), 1)
    u = solve_field(rd, LagrangeSpace(mesh, 1))
    report, _, _, _ = estimate_solution(rd, u)
    assert report.eta == 0.0


def test_rd_oscillation_vanishes_for_indicator():
    rd = ReactionDiffusion()
    mesh = refine_nvb(build_initial_mesh(FullPlane(), 2), [0, 9, 33])
    u = solve_field(rd, LagrangeSpace(mesh, 1))
    report, _, _, _ = estimate_solution(rd, u)
    assert np.abs(report.osc).max() < 1e-12


def test_eta_tilde_monotone(manufactured_spline):
    rd = ReactionDiffusion()
    mesh = build_initial_mesh(FullPlane(), 1)
    u = solve_field(rd, LagrangeSpace(mesh, 1))
    report, _, _, _ = estimate_solution(rd, u)
    assert report.eta_tilde <= report.eta + 1e-15
    assert ((report.osc + report.misfit) <= report.eta_K + 1e-15).all()


def test_helmholtz_misfit_weight_brute_force():
    # on a +e1-layer element the misfit weight is diag(2, 1); compare the
    # reported misfit against an independent quadrature with that matrix
    hz = Helmholtz(k=0.7 * 2 * np.pi, gamma=1 + 1j)
    mesh = build_initial_mesh(TShapedWaveguide(), 7)
    space = LagrangeSpace(mesh, 1)
    u = solve_field(hz, space)
    report, flux, osc, work = estimate_solution(hz, u)
    reg = hz.region_elem(mesh)
    K = int(np.nonzero(reg == 2)[0][0])
    W = np.diag([2.0, 1.0])
    assert np.allclose(work.Wmat[K], W)
    pts, w = triangle_rule(2 * work.q + 2)
    _, det, _, _ = mesh.affine()
    diff = flux.values(elems=[K])[0] + work.flux_target[K]
    val = np.einsum("qa,ab,qb,q->", diff.conj(), W, diff, w).real * det[K]
    assert report.misfit[K] == pytest.approx(np.sqrt(val), rel=1e-12)
    # interior element: weight reduces to the identity
    K0 = int(np.nonzero(reg == 0)[0][0])
    assert np.allclose(work.Wmat[K0], np.eye(2))


def test_helmholtz_requires_covered_source():
    hz = Helmholtz(k=0.7 * 2 * np.pi)
    mesh = build_initial_mesh(TShapedWaveguide(), 2)
    space = LagrangeSpace(mesh, 1)
    u = space.zero_field(kind="complex")
    with pytest.raises(ProblemError):
        estimate_solution(hz, u)


@pytest.fixture(scope="module")
def small_rd_run():
    rd = ReactionDiffusion()
    mesh = build_initial_mesh(FullPlane(), 1)
    space = LagrangeSpace(mesh, 1)
    u = solve_field(rd, space)
    report, flux, osc, work = estimate_solution(rd, u)
    ref_mesh = extend_to(mesh, 12)
    ref_space = LagrangeSpace(ref_mesh, 3)
    ref_sys = assemble(rd, ref_space)
    ref_u = ref_space.field_from_free(solve(ref_sys))
    return rd, u, report, ref_space, ref_sys, ref_u


def test_reliability_iteration0(small_rd_run):
    rd, u, report, ref_space, ref_sys, ref_u = small_rd_run
    diff = ref_space.field_from_free(ref_u.coeffs - interpolate(u, ref_space).coeffs)
    err = energy_norm(diff, rd)
    assert err**2 <= (report.eta**2 + report.tail**2) * 1.05
    # the standard estimator severely underestimates on the initial mesh
    assert report.eta_tilde < 0.5 * err


def test_residual_bound_random_trials(small_rd_run):
    rd, u, report, ref_space, ref_sys, ref_u = small_rd_run
    rb = residual_bound_check(rd, u, report.eta, report.tail, ref_space,
                              ref_system=ref_sys, n_trials=50, seed=3)
    assert rb.passed
    assert len(rb.ratios) == 50
    # the reference error itself is also a valid test direction
    e = ref_u.coeffs - interpolate(u, ref_space).coeffs
    from truncafem.estimator import batched_energy_norms_sq
    anc = ref_space.mesh.ancestor_in(u.space.mesh)
    inside = np.nonzero(anc >= 0)[0]
    nrm = np.sqrt(batched_energy_norms_sq(ref_space, rd, e[:, None], inside))[0]
    res = abs(np.conj(e) @ (ref_sys.rhs - ref_sys.matrix
                            @ interpolate(u, ref_space).coeffs))
    assert res <= report.eta * nrm * (1 + 1e-10)


def test_residual_bound_helmholtz():
    hz = Helmholtz(k=0.7 * 2 * np.pi)
    mesh = build_initial_mesh(TShapedWaveguide(), 7)
    mesh = refine_nvb(mesh, range(mesh.n_elements))
    space = LagrangeSpace(mesh, 1)
    u = solve_field(hz, space)
    report, flux, osc, work = estimate_solution(hz, u)
    ref_mesh = extend_to(mesh, 10)
    ref_space = LagrangeSpace(ref_mesh, 3)
    rb = residual_bound_check(hz, u, report.eta, 0.0, ref_space,
                              n_trials=25, seed=1)
    assert rb.passed
