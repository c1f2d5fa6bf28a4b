"""CSV tables and the plain-text run summary."""

from __future__ import annotations

import io

import numpy as np

from .adaptive import RunHistory, convergence_rate_fit
from .formats import atomic_write

HISTORY_COLUMNS = ("iter", "N_dofs", "L", "eta", "eta_tilde", "osc_total",
                   "misfit_total", "bnd_total", "tail", "error_global",
                   "error_omega0", "effectivity", "effectivity_tilde")

_FIELD_OF = {"iter": "iter", "N_dofs": "n_dofs", "L": "L"}


def history_csv(history: RunHistory) -> str:
    buf = io.StringIO()
    buf.write(",".join(HISTORY_COLUMNS) + "\n")
    for r in history.records:
        row = [str(r.iter), str(r.n_dofs), str(r.L)]
        for name in HISTORY_COLUMNS[3:]:
            row.append(repr(getattr(r, name)))
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def mode_table_csv(modes) -> str:
    lines = ["j,lambda,re_kj,im_kj,nu_j"]
    for j, (lam, kj, nu) in enumerate(zip(modes.lambdas, modes.kj, modes.nu)):
        lines.append(f"{j},{lam!r},{kj.real!r},{kj.imag!r},{nu!r}")
    return "\n".join(lines) + "\n"


def modal_diagnostic_csv(rows) -> str:
    """rows: iterable of (cylinder, mode_j, station_n, complex value)."""
    lines = ["cylinder,mode_j,station_n,re,im,abs"]
    for cyl, j, n, v in rows:
        lines.append(f"{cyl},{j},{n},{v.real!r},{v.imag!r},{abs(v)!r}")
    return "\n".join(lines) + "\n"


def fit_slope(history: RunHistory, column: str = "error_global",
              window: int = 32) -> float:
    n = history.column("n_dofs")
    e = history.column(column)
    sel = slice(max(0, len(n) - window), len(n))
    return convergence_rate_fit(n[sel], e[sel])


def run_summary(history: RunHistory, extra_lines=()) -> str:
    lines = ["history v1"]
    cfg = history.config
    prob = history.problem
    lines.append(f"problem {type(prob).__name__}")
    lines.append(f"p {cfg.p}")
    lines.append(f"theta {cfg.theta}")
    lines.append(f"iterations {len(history.records) - 1}")
    lines.append(f"status {history.status}")
    last = history.records[-1]
    lines.append(f"final_n_dofs {last.n_dofs}")
    lines.append(f"final_L {last.L}")
    lines.append(f"final_eta {last.eta!r}")
    lines.append(f"final_error {last.error_global!r}")
    try:
        s = fit_slope(history)
        lines.append(f"slope_error_last32 {s!r}")
    except Exception:
        lines.append("slope_error_last32 nan")
    try:
        s = fit_slope(history, column="eta")
        lines.append(f"slope_eta_last32 {s!r}")
    except Exception:
        lines.append("slope_eta_last32 nan")
    eff = history.column("effectivity")
    ok = np.isfinite(eff)
    if ok.any():
        lines.append(f"final_effectivity {eff[ok][-1]!r}")
        lines.append(f"min_effectivity {eff[ok].min()!r}")
        lines.append(f"max_effectivity {eff[ok].max()!r}")
    worst_eq = np.nanmax(history.column("equilibration_moment"))
    lines.append(f"worst_equilibration_moment {worst_eq!r}")
    lines.append(f"direct_boundary_bisections "
                 f"{int(history.column('direct_boundary_bisections').sum())}")
    lines.append(f"closure_boundary_bisections "
                 f"{int(history.column('closure_boundary_bisections').sum())}")
    lines.append(f"boundary_pushes {int(history.column('boundary_pushed').sum())}")
    lines.extend(extra_lines)
    return "\n".join(lines) + "\n"


def write_text(path, text):
    atomic_write(path, text)
