"""Adaptive FEM on truncated unbounded domains with equilibrated-flux
a posteriori error control."""

from .geometry import (
    FullPlane,
    TShapedWaveguide,
    Mesh,
    build_initial_mesh,
    refine_nvb,
    extend_truncation,
)

__all__ = [
    "FullPlane",
    "TShapedWaveguide",
    "Mesh",
    "build_initial_mesh",
    "refine_nvb",
    "extend_truncation",
]

__version__ = "0.1.0"
