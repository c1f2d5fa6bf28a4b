"""Waveguide geometry, absorbing-layer coefficients and mode analysis.

The T-shaped guide has three semi-infinite cylinders (left, right, bottom)
with axis offsets ell = 5 and cross sections of width 2.  Inside the box
|x|_inf < 5 the medium is undamped (alpha = 1, A = I); beyond it the complex
stretching alpha = gamma acts along each cylinder axis through
A = alpha^{-1} t (x) t + alpha (I - t (x) t).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quadrature import gauss1d

OMEGA0 = 0


class WaveguideError(Exception):
    pass


@dataclass(frozen=True)
class Cylinder:
    index: int            # 1-based region id
    axis: tuple           # unit vector t^r
    ell: float            # axial offset of the layer interface
    s0: float             # transverse interval [s0, s0 + width]
    width: float

    def axial(self, x, y):
        return x * self.axis[0] + y * self.axis[1]

    def transverse(self, x, y):
        # perpendicular coordinate; for axis +-e1 it is y, for +-e2 it is x
        if self.axis[0] != 0:
            return y
        return x

    def contains(self, x, y):
        s = self.transverse(x, y)
        return (self.axial(x, y) > self.ell) and (self.s0 < s < self.s0 + self.width)

    def cross_section_points(self, x_axial, s_values):
        """Physical coordinates of the cross section at axial position x_axial."""
        t = np.asarray(self.axis, dtype=float)
        n = np.array([-t[1], t[0]])
        base = x_axial * t
        s = np.asarray(s_values, dtype=float)
        # transverse coordinate measured in the fixed frame (y resp. x)
        if self.axis[0] != 0:
            return np.stack([np.full_like(s, base[0]), s], axis=-1)
        return np.stack([s, np.full_like(s, base[1])], axis=-1)


def t_shape_cylinders(ell: float = 5.0):
    return (
        Cylinder(1, (-1.0, 0.0), ell, -1.0, 2.0),
        Cylinder(2, (1.0, 0.0), ell, -1.0, 2.0),
        Cylinder(3, (0.0, -1.0), ell, -1.0, 2.0),
    )


# ---------------------------------------------------------------------------
# Transverse modes
# ---------------------------------------------------------------------------

def cutoff_frequencies(width: float, count: int) -> np.ndarray:
    """Dirichlet eigenvalues of -d^2/ds^2 on an interval: lambda_j = (j+1)pi/w."""
    if width <= 0:
        raise WaveguideError("cross-section width must be positive")
    return (np.arange(1, count + 1)) * np.pi / width


def mode_profile(j: int, s, s0: float, width: float):
    """L2-orthonormal eigenfunction sqrt(2/w) sin((j+1) pi (s - s0)/w)."""
    s = np.asarray(s, dtype=float)
    return np.sqrt(2.0 / width) * np.sin((j + 1) * np.pi * (s - s0) / width)


@dataclass
class ModeBasis:
    k: float
    gamma: complex
    lambdas: np.ndarray      # transverse eigenvalues
    kj: np.ndarray           # modal wavenumbers, real or +i positive
    nu: np.ndarray           # decay rates Re(gamma k_j)
    k_star: float
    mu: float

    @property
    def n_propagating(self):
        return int(np.sum(np.isreal(self.kj) & (self.kj.real > 0)))


def modal_wavenumbers(k: float, lambdas, gamma: complex, cylinder: int | None = None) -> ModeBasis:
    lambdas = np.asarray(lambdas, dtype=float)
    diff = k**2 - lambdas**2
    kj = np.where(diff >= 0, np.sqrt(np.maximum(diff, 0.0)) + 0j,
                  1j * np.sqrt(np.maximum(-diff, 0.0)))
    mags = np.abs(kj)
    bad = np.nonzero(mags <= 1e-9 * max(k, 1.0))[0]
    if len(bad):
        j = int(bad[0])
        where = f"cylinder {cylinder}, " if cylinder is not None else ""
        raise WaveguideError(
            f"wavenumber k={k} is a cut-off frequency ({where}mode j={j}, "
            f"lambda={lambdas[j]})")
    # decay rate of the outgoing branch inside the layer: gamma_r k_j for
    # propagating modes, gamma_i |k_j| for evanescent ones
    nu = gamma.real * kj.real + gamma.imag * np.abs(kj.imag)
    k_star = float(mags.min())
    return ModeBasis(k=k, gamma=gamma, lambdas=lambdas, kj=kj, nu=nu,
                     k_star=k_star, mu=k_star / k)


# ---------------------------------------------------------------------------
# Layer coefficients
# ---------------------------------------------------------------------------

class PMLCoefficients:
    """Piecewise-constant damping data on the T-shaped guide."""

    def __init__(self, gamma: complex, ell: float = 5.0):
        if gamma.real < 1.0 or gamma.imag < 1.0:
            raise WaveguideError("damping must satisfy Re gamma >= 1 and Im gamma >= 1")
        self.gamma = complex(gamma)
        self.ell = ell
        self.cylinders = t_shape_cylinders(ell)

    @property
    def gamma_star(self):
        return min(self.gamma.real, self.gamma.imag)

    def region_of_point(self, x: float, y: float) -> int:
        for c in self.cylinders:
            if c.contains(x, y):
                return c.index
        return OMEGA0

    def region_elem(self, mesh) -> np.ndarray:
        """Region id per element; asserts no element straddles an interface."""
        v = mesh.element_verts()
        cx = v[:, :, 0].mean(axis=1)
        cy = v[:, :, 1].mean(axis=1)
        reg = np.zeros(mesh.n_elements, dtype=np.int8)
        for c in self.cylinders:
            ax = c.axial(v[:, :, 0], v[:, :, 1])
            if np.any((ax.min(axis=1) < c.ell) & (ax.max(axis=1) > c.ell)):
                raise WaveguideError("element straddles the damping interface")
            inside = np.array([c.contains(x, y) for x, y in zip(cx, cy)])
            reg[inside] = c.index
        return reg

    def alpha_of_region(self, regions) -> np.ndarray:
        regions = np.asarray(regions)
        return np.where(regions == OMEGA0, 1.0 + 0j, self.gamma)

    def A_of_region(self, regions) -> np.ndarray:
        """Diagonal 2x2 coefficient per region id, shape (..., 2, 2)."""
        regions = np.asarray(regions)
        out = np.zeros(regions.shape + (2, 2), dtype=complex)
        g, gi = self.gamma, 1.0 / self.gamma
        for c in self.cylinders:
            sel = regions == c.index
            if c.axis[0] != 0:  # horizontal axis: stretch x
                out[sel, 0, 0] = gi
                out[sel, 1, 1] = g
            else:
                out[sel, 0, 0] = g
                out[sel, 1, 1] = gi
        sel = regions == OMEGA0
        out[sel, 0, 0] = 1.0
        out[sel, 1, 1] = 1.0
        return out


# ---------------------------------------------------------------------------
# Guided-mode source
# ---------------------------------------------------------------------------

def _smoothstep(t):
    """Quintic smoothstep: 0 at t<=0, 1 at t>=1, C^2 at the ends."""
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 + t * (-15.0 + 6.0 * t))


def _smoothstep_d1(t):
    inside = (t > 0.0) & (t < 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, 30.0 * t**2 * (t - 1.0) ** 2, 0.0)


def _smoothstep_d2(t):
    inside = (t > 0.0) & (t < 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, 60.0 * t * (t - 1.0) * (2.0 * t - 1.0), 0.0)


@dataclass
class GuidedModeSource:
    """f = (-k^2 - Delta)(chi U) for the upward guided mode U = e^{iKx2} sin(pi x1).

    chi ramps from 0 at x2 = -3.5 to 1 at x2 = -3, so f is supported on
    (-1,1) x (-3.5,-3).  Because (-k^2 - Delta)U = 0 the product rule gives
    f = -(chi'' + 2iK chi') U pointwise.
    """

    k: float
    x_lo: float = -3.5
    x_hi: float = -3.0

    def __post_init__(self):
        if self.k <= np.pi:
            raise WaveguideError("guided mode requires k > pi (mode j=1 propagating)")
        self.K = np.sqrt(self.k**2 - np.pi**2)

    @property
    def support(self):
        return (-1.0, 1.0, self.x_lo, self.x_hi)

    def chi(self, x2):
        return _smoothstep((np.asarray(x2, dtype=float) - self.x_lo) / (self.x_hi - self.x_lo))

    def chi_d1(self, x2):
        h = self.x_hi - self.x_lo
        return _smoothstep_d1((np.asarray(x2, dtype=float) - self.x_lo) / h) / h

    def chi_d2(self, x2):
        h = self.x_hi - self.x_lo
        return _smoothstep_d2((np.asarray(x2, dtype=float) - self.x_lo) / h) / h**2

    def mode(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.exp(1j * self.K * pts[..., 1]) * np.sin(np.pi * pts[..., 0])

    def eval(self, pts):
        pts = np.asarray(pts, dtype=float)
        x1 = pts[..., 0]
        x2 = pts[..., 1]
        band = (x2 > self.x_lo) & (x2 < self.x_hi) & (np.abs(x1) < 1.0)
        out = np.zeros(pts.shape[:-1], dtype=complex)
        if np.any(band):
            c1 = self.chi_d1(x2[band])
            c2 = self.chi_d2(x2[band])
            U = np.exp(1j * self.K * x2[band]) * np.sin(np.pi * x1[band])
            out[band] = -(c2 + 2j * self.K * c1) * U
        return out


# ---------------------------------------------------------------------------
# Modal decomposition of a finite element field
# ---------------------------------------------------------------------------

def _segment_trace(field, a, b, n_gauss=24):
    """Sample a field along the segment a->b, element by element.

    Returns (tau, weights, values): Gauss points in [0,1] along the segment,
    weights including the segment length, and field values there.
    """
    mesh = field.space.mesh
    V = mesh.element_verts()
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lo = np.minimum(a, b) - 1e-12
    hi = np.maximum(a, b) + 1e-12
    cand = np.nonzero((V[:, :, 0].min(axis=1) <= hi[0]) & (V[:, :, 0].max(axis=1) >= lo[0])
                      & (V[:, :, 1].min(axis=1) <= hi[1]) & (V[:, :, 1].max(axis=1) >= lo[1]))[0]
    xg, wg = gauss1d(n_gauss)
    taus, wts, vals = [], [], []
    d = b - a
    seg_len = np.hypot(*d)
    if seg_len == 0:
        raise WaveguideError("degenerate station segment")
    all_coeffs = field.elem_coeffs()
    for K in cand:
        v = V[K]
        J = np.stack([v[1] - v[0], v[2] - v[0]], axis=-1)
        det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        # barycentric functions along the segment are affine in tau
        p0 = a - v[0]
        pd = d
        xi0 = (J[1, 1] * p0[0] - J[0, 1] * p0[1]) / det
        xid = (J[1, 1] * pd[0] - J[0, 1] * pd[1]) / det
        eta0 = (-J[1, 0] * p0[0] + J[0, 0] * p0[1]) / det
        etad = (-J[1, 0] * pd[0] + J[0, 0] * pd[1]) / det
        t0, t1 = 0.0, 1.0
        for c0, cd in ((xi0, xid), (eta0, etad), (1 - xi0 - eta0, -xid - etad)):
            if abs(cd) < 1e-14:
                if c0 < -1e-12:
                    t0, t1 = 1.0, 0.0
                    break
            else:
                tc = -c0 / cd
                if cd > 0:
                    t0 = max(t0, tc)
                else:
                    t1 = min(t1, tc)
        if t1 - t0 < 1e-10:
            continue
        tau = 0.5 * (t0 + t1) + 0.5 * (t1 - t0) * xg
        w = 0.5 * (t1 - t0) * wg * seg_len
        xi = xi0 + xid * tau
        eta = eta0 + etad * tau
        ref = np.stack([xi, eta], axis=-1)
        N = field.space.basis.eval(ref)  # (nd, n_gauss)
        vals.append(all_coeffs[K] @ N)
        taus.append(tau)
        wts.append(w)
    if not taus:
        raise WaveguideError("station segment lies outside the mesh")
    return np.concatenate(taus), np.concatenate(wts), np.concatenate(vals)


def modal_decomposition(field, cylinder: Cylinder, x_axial: float, n_modes: int):
    """Coefficients v_j of the field trace on the cross section at x_axial."""
    t = np.asarray(cylinder.axis, dtype=float)
    s_lo, s_hi = cylinder.s0, cylinder.s0 + cylinder.width
    a = cylinder.cross_section_points(x_axial, [s_lo])[0]
    b = cylinder.cross_section_points(x_axial, [s_hi])[0]
    tau, w, vals = _segment_trace(field, a, b)
    s = s_lo + tau * (s_hi - s_lo)
    out = np.empty(n_modes, dtype=complex)
    for j in range(n_modes):
        psi = mode_profile(j, s, cylinder.s0, cylinder.width)
        out[j] = np.sum(w * vals * psi)
    return out
