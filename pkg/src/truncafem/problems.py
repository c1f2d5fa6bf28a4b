"""Problem data: the reaction-diffusion equation on the plane and the
damped Helmholtz waveguide problem.

Coefficients are piecewise constant on the grid-aligned meshes (kappa per
element, damping per region), sources are pointwise evaluable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import FullPlane, Mesh, TShapedWaveguide
from .waveguide import (
    GuidedModeSource,
    PMLCoefficients,
    WaveguideError,
    cutoff_frequencies,
    modal_wavenumbers,
)


class ProblemError(Exception):
    pass


# ---------------------------------------------------------------------------
# Sources
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IndicatorSquareSource:
    """f = value on the open square (lo, hi)^2, zero elsewhere."""

    lo: float = -1.0
    hi: float = 1.0
    value: float = 1.0

    def eval(self, pts):
        pts = np.asarray(pts, dtype=float)
        inside = ((pts[..., 0] > self.lo) & (pts[..., 0] < self.hi)
                  & (pts[..., 1] > self.lo) & (pts[..., 1] < self.hi))
        return np.where(inside, self.value, 0.0)

    def uncovered_mass(self, L: float) -> float:
        """||f||^2 over the part of the support outside |x|_inf <= L."""
        side = self.hi - self.lo
        clip_lo = max(self.lo, -L)
        clip_hi = min(self.hi, L)
        covered = max(0.0, clip_hi - clip_lo) ** 2
        return self.value**2 * max(0.0, side**2 - covered)


@dataclass(frozen=True)
class CallableSource:
    """Pointwise source; support_radius bounds supp f in the |x|_inf norm
    (needed for the tail term to be known zero on covering meshes)."""

    fn: Callable
    support_radius: float = np.inf

    def eval(self, pts):
        return self.fn(np.asarray(pts, dtype=float))


@dataclass(frozen=True)
class ZeroSource:
    def eval(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.zeros(pts.shape[:-1])


# ---------------------------------------------------------------------------
# Problems
# ---------------------------------------------------------------------------

@dataclass
class ReactionDiffusion:
    """kappa^2 u - Laplace u = f on the plane, u -> 0 at infinity."""

    kappa: float | Callable = 1.0
    source: object = field(default_factory=IndicatorSquareSource)
    domain: object = field(default_factory=FullPlane)

    kind = "real"

    def kappa_elem(self, mesh: Mesh) -> np.ndarray:
        if callable(self.kappa):
            cent = mesh.element_verts().mean(axis=1)
            k = np.asarray(self.kappa(cent), dtype=float)
        else:
            k = np.full(mesh.n_elements, float(self.kappa))
        if np.any(k <= 0):
            raise ProblemError("kappa must be uniformly positive")
        return k

    def tail_norm(self, mesh: Mesh) -> float:
        """||kappa^{-1} f|| over the complement of the covered region.

        Analytic for the shipped indicator source (constant kappa outside the
        truncation box); zero once the support is covered.
        """
        if isinstance(self.source, ZeroSource):
            return 0.0
        if isinstance(self.source, IndicatorSquareSource) and not callable(self.kappa):
            return np.sqrt(self.source.uncovered_mass(mesh.L)) / float(self.kappa)
        if isinstance(self.source, CallableSource) and mesh.L >= self.source.support_radius:
            return 0.0
        raise ProblemError("tail term is only analytic for the indicator source")


@dataclass
class Helmholtz:
    """-k^2 alpha u - div(A grad u) = f in the T-shaped guide with damping."""

    k: float
    gamma: complex = 1.0 + 1.0j
    source: object = None
    domain: TShapedWaveguide = field(default_factory=TShapedWaveguide)
    n_modes: int = 12

    kind = "complex"

    def __post_init__(self):
        self.pml = PMLCoefficients(self.gamma, self.domain.ell)
        if self.source is None:
            self.source = GuidedModeSource(self.k)
        # reject cut-off frequencies up front
        self.modes = {}
        for c in self.pml.cylinders:
            lam = cutoff_frequencies(c.width, self.n_modes)
            self.modes[c.index] = modal_wavenumbers(self.k, lam, self.gamma,
                                                    cylinder=c.index)

    @property
    def k_star(self) -> float:
        return min(m.k_star for m in self.modes.values())

    def region_elem(self, mesh: Mesh) -> np.ndarray:
        return self.pml.region_elem(mesh)

    def alpha_elem(self, mesh: Mesh) -> np.ndarray:
        return self.pml.alpha_of_region(self.region_elem(mesh))

    def A_elem(self, mesh: Mesh) -> np.ndarray:
        return self.pml.A_of_region(self.region_elem(mesh))

    def check_source_covered(self, mesh: Mesh):
        if isinstance(self.source, GuidedModeSource):
            if mesh.L < -self.source.x_lo:
                raise ProblemError("source support is not covered by the mesh")
