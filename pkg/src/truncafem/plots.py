"""Figure rendering for run reports: mesh drawings and convergence plots.

All figures are written to files (SVG) next to the CSV tables; nothing is
shown interactively.
"""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.collections import LineCollection, PolyCollection

from .geometry import ARTIFICIAL_GAMMA_H, PHYSICAL_GAMMA

plt.rcParams["svg.fonttype"] = "none"
plt.rcParams["font.size"] = 9


def render_mesh(vertices, elements, bnd_faces=None, bnd_tags=None, path=None,
                title=None):
    """One polygon per element; boundary faces stroked by tag color
    (physical boundary black, artificial boundary red)."""
    fig, ax = plt.subplots(figsize=(6, 6))
    polys = vertices[elements]
    ax.add_collection(PolyCollection(polys, facecolors="#f4f4f4",
                                     edgecolors="#9aa7b0", linewidths=0.3))
    if bnd_faces is not None and len(bnd_faces):
        segs = vertices[bnd_faces]
        tags = np.asarray(bnd_tags)
        for tag, color, lw in ((PHYSICAL_GAMMA, "black", 1.2),
                               (ARTIFICIAL_GAMMA_H, "#d62728", 1.2)):
            sel = segs[tags == tag]
            if len(sel):
                ax.add_collection(LineCollection(sel, colors=color, linewidths=lw))
    ax.set_aspect("equal")
    ax.autoscale()
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    if path:
        fig.savefig(path)
        plt.close(fig)
        return None
    return fig, ax


def render_mesh_from(mesh, path, title=None):
    top = mesh.topology()
    bnd = top.boundary_faces()
    render_mesh(mesh.vertices, mesh.elements, top.face_verts[bnd],
                top.face_tag[bnd], path=path, title=title)


def convergence_figure(history, path, rate: float | None = None):
    """Log-log plot of the estimator(s) and measured error against dofs."""
    n = history.column("n_dofs")
    eta = history.column("eta")
    eta_t = history.column("eta_tilde")
    err = history.column("error_global")
    pushes = history.column("boundary_pushed") > 0

    fig, ax = plt.subplots(figsize=(5.2, 4.0))
    ax.loglog(n, eta, "o-", ms=3, label=r"estimator $\eta$")
    ax.loglog(n, eta_t, "s--", ms=3, label=r"standard $\tilde\eta$")
    ok = np.isfinite(err)
    ax.loglog(n[ok], err[ok], "k^-", ms=3, label="error")
    err0 = history.column("error_omega0")
    if np.isfinite(err0).any():
        ax.loglog(n[ok], err0[ok], "v-", ms=3, color="#2ca02c",
                  label="error on $\\Omega_0$")
    for x in n[pushes]:
        ax.axvline(x, color="0.85", lw=0.6, zorder=0, ls=":")
    if rate is not None and ok.any():
        nn = n[ok][len(n[ok]) // 2:]
        ref = err[ok][-1] * (nn / n[ok][-1]) ** rate
        ax.loglog(nn, ref, "k:", lw=1, label=f"slope {rate:g}")
    ax.set_xlabel("degrees of freedom")
    ax.set_ylabel("energy norm")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def effectivity_figure(history, path):
    it = history.column("iter")
    eff = history.column("effectivity")
    eff_t = history.column("effectivity_tilde")
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ok = np.isfinite(eff)
    ax.plot(it[ok], eff[ok], "o-", ms=3, label=r"$\eta$ / error")
    okt = np.isfinite(eff_t)
    ax.plot(it[okt], eff_t[okt], "s--", ms=3, label=r"$\tilde\eta$ / error")
    ax.axhline(1.0, color="k", lw=0.8)
    pushes = history.column("boundary_pushed") > 0
    for x in it[pushes]:
        ax.axvline(x, color="0.85", lw=0.6, zorder=0, ls=":")
    ax.set_xlabel("iteration")
    ax.set_ylabel("effectivity index")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def modal_decay_figure(fits, path):
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    for fit in fits:
        x = fit.stations / fits[0].stations.max() if False else fit.stations
        ax.semilogy(fit.stations, fit.amplitudes, "o-", ms=3,
                    label=f"cyl {fit.cylinder} mode {fit.mode} "
                          f"(rate {fit.fitted_rate:.2f}, nu {fit.expected_rate:.2f})")
    ax.set_xlabel("station index n (position ell + n/k)")
    ax.set_ylabel("|v_j|")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
