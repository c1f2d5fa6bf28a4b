"""Command-line entry points: run-rd, run-helmholtz, verify, render-mesh.

Configuration comes from an optional key=value file plus command-line
overrides; every run writes its history CSV, figures and a plain-text
summary into the output directory.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import reports
from .adaptive import AdaptiveConfig, run_adaptive_loop
from .estimator import residual_bound_check
from .formats import atomic_write, dump_field, dump_mesh, load_mesh_dump, trace_report_csv
from .problems import Helmholtz, ReactionDiffusion
from .spaces import LagrangeSpace
from .waveguide import modal_decomposition


def _parse_config_file(path):
    out = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SystemExit(f"bad config line: {raw.rstrip()}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _add_common(sp, rd: bool):
    sp.add_argument("--config", help="key=value config file")
    sp.add_argument("--p", type=int, default=None, help="polynomial degree")
    sp.add_argument("--theta", type=float, default=None, help="Doerfler parameter")
    sp.add_argument("--max-iter", type=int, default=None)
    sp.add_argument("--L0", type=int, default=None, help="initial truncation")
    sp.add_argument("--L-ref", type=int, default=None, help="reference truncation")
    sp.add_argument("--ref-every", type=int, default=None,
                    help="reference-solve period (default 1)")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None, help="output directory")
    sp.add_argument("--svg", action="store_true",
                    help="emit per-iteration mesh drawings")
    if not rd:
        sp.add_argument("--k", type=float, default=None, help="wavenumber")
        sp.add_argument("--gamma", default=None,
                        help="damping, as 'a+bj' (default 1+1j)")


def _gather(args, defaults):
    cfg = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _parse_config_file(args.config)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        for key, val in file_cfg.items():
            cfg[key] = type(defaults[key])(val) if not isinstance(defaults[key], str) \
                else val
    for key in cfg:
        arg = key.replace("-", "_")
        val = getattr(args, arg, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _write_run_outputs(history, out, svg_meshes, extra_lines=(), fits=None):
    os.makedirs(out, exist_ok=True)
    reports.write_text(os.path.join(out, "history.csv"),
                       reports.history_csv(history))
    reports.write_text(os.path.join(out, "summary.txt"),
                       reports.run_summary(history, extra_lines))
    reports.write_text(os.path.join(out, "mesh_final.txt"),
                       dump_mesh(history.final_mesh))
    reports.write_text(os.path.join(out, "field_final.txt"),
                       dump_field(history.final_field))
    _, table = history.final_flux.gammah_trace_norms()
    reports.write_text(os.path.join(out, "traces.csv"), trace_report_csv(table))

    from . import plots
    p = history.config.p
    rate = -p / 2.0
    plots.convergence_figure(history, os.path.join(out, "convergence.svg"), rate=rate)
    plots.effectivity_figure(history, os.path.join(out, "effectivity.svg"))
    plots.render_mesh_from(history.final_mesh, os.path.join(out, "mesh_final.svg"),
                           title=f"final mesh (L={history.final_mesh.L})")
    if fits:
        plots.modal_decay_figure(fits, os.path.join(out, "modal_decay.svg"))


def _mesh_callback(out):
    from . import plots

    def cb(it, mesh, u_h, report):
        plots.render_mesh_from(mesh, os.path.join(out, f"mesh_iter_{it:03d}.svg"),
                               title=f"iteration {it} (L={mesh.L})")
    return cb


def cmd_run_rd(args):
    defaults = dict(p=1, theta=0.2, max_iter=64, L0=1, L_ref=48, ref_every=1,
                    seed=0, out="out-rd")
    cfg = _gather(args, defaults)
    out = cfg.pop("out")
    seed = cfg.pop("seed")
    problem = ReactionDiffusion()
    config = AdaptiveConfig(seed=seed, **cfg)
    cb = _mesh_callback(out) if args.svg else None
    if args.svg:
        os.makedirs(out, exist_ok=True)
    history = run_adaptive_loop(problem, config, mesh_callback=cb)
    extra = _final_residual_check(problem, history, seed)
    _write_run_outputs(history, out, args.svg, extra_lines=extra)
    print(f"wrote {out}/history.csv ({len(history.records)} rows)")
    try:
        print(f"error slope (last 32): {reports.fit_slope(history):.4f}")
    except Exception:
        pass
    return 0


def _final_residual_check(problem, history, seed, n=50):
    if history.final_ref_system is None:
        return []
    ref_space = None
    # the reference system was assembled on the extended mesh; rebuild the
    # space cheaply for norm evaluation
    from .adaptive import extend_to
    mesh = history.final_mesh
    ref_mesh = extend_to(mesh, history.config.L_ref)
    ref_space = LagrangeSpace(ref_mesh,
                              history.config.p + history.config.ref_degree_increment)
    rb = residual_bound_check(problem, history.final_field,
                              history.final_report.eta,
                              history.final_report.tail, ref_space,
                              ref_system=history.final_ref_system,
                              n_trials=n, seed=seed)
    return [f"residual_bound_worst {rb.worst!r}",
            f"residual_bound_pass {rb.passed}"]


def cmd_run_helmholtz(args):
    defaults = dict(p=2, theta=0.2, max_iter=64, L0=7, L_ref=24, ref_every=1,
                    seed=0, k=0.7 * 2 * np.pi, gamma="1+1j", out="out-helmholtz")
    cfg = _gather(args, defaults)
    out = cfg.pop("out")
    seed = cfg.pop("seed")
    k = cfg.pop("k")
    gamma = complex(cfg.pop("gamma"))
    problem = Helmholtz(k=k, gamma=gamma)
    config = AdaptiveConfig(seed=seed, **cfg)
    cb = _mesh_callback(out) if args.svg else None
    if args.svg:
        os.makedirs(out, exist_ok=True)
    history = run_adaptive_loop(problem, config, mesh_callback=cb)
    extra = _final_residual_check(problem, history, seed)

    # modal diagnostics on the final reference solution
    from .oracles import fit_modal_decay
    os.makedirs(out, exist_ok=True)
    fits = []
    rows = []
    ref = history.final_ref_field
    for cyl in problem.pml.cylinders:
        modes = problem.modes[cyl.index]
        reports.write_text(os.path.join(out, f"modes_cyl{cyl.index}.csv"),
                           reports.mode_table_csv(modes))
        cyl_fits = fit_modal_decay(ref, modes, cyl)
        fits.extend(cyl_fits)
        J = len(modes.kj)
        kk = modes.k
        n_last = int(min((ref.space.mesh.L - cyl.ell - 0.25) * kk, 2.5 * kk + 1))
        for n in range(1, n_last + 1):
            v = modal_decomposition(ref, cyl, cyl.ell + n / kk, J)
            rows.extend((cyl.index, j, n, v[j]) for j in range(J))
    reports.write_text(os.path.join(out, "modal_decay.csv"),
                       reports.modal_diagnostic_csv(rows))
    worst_fit = max((f.rel_dev for f in fits), default=np.nan)
    extra = list(extra) + [f"worst_modal_rate_deviation {worst_fit!r}"]
    _write_run_outputs(history, out, args.svg, extra_lines=extra, fits=fits)
    print(f"wrote {out}/history.csv ({len(history.records)} rows)")
    return 0


def cmd_verify(args):
    from . import oracles
    from .assembly import solve_field
    from .equilibration import equilibrate
    from .geometry import FullPlane, build_initial_mesh, refine_nvb
    from .problems import IndicatorSquareSource

    seed = args.seed if args.seed is not None else 0
    rows = []
    failed = False

    for suite in (oracles.trace_suite(seed=seed, n_polys=400),
                  oracles.poincare_suite(seed=seed, n_samples=300),
                  oracles.cylinder_trace_suite(seed=seed, n_samples=300)):
        rows.append((suite.name, suite.n_samples, suite.worst.ratio, suite.passed))
        failed |= not suite.passed

    # equilibration on a small shipped-problem run, plus fault injection
    rd = ReactionDiffusion(kappa=1.0, source=IndicatorSquareSource())
    mesh = build_initial_mesh(FullPlane(), 2)
    mesh = refine_nvb(mesh, range(0, mesh.n_elements, 7))
    space = LagrangeSpace(mesh, 1)
    u_h = solve_field(rd, space)
    flux, osc, work = equilibrate(rd, u_h)
    eq = oracles.check_equilibration(work, flux, osc)
    rows.append(("equilibration (3.6)", mesh.n_elements, eq.ratio, eq.passed))
    failed |= not eq.passed
    bad = oracles.perturb_flux(flux, eq.element, flux.reference().interior_dofs[0],
                               1e-3)
    eq_bad = oracles.check_equilibration(work, bad, osc)
    rows.append(("fault injection detects", 1, eq_bad.ratio, not eq_bad.passed))
    failed |= eq_bad.passed

    # damping-layer decay on a quick reference solution
    problem = Helmholtz(k=0.7 * 2 * np.pi)
    from .adaptive import AdaptiveConfig, run_adaptive_loop
    config = AdaptiveConfig(p=2, theta=0.2, max_iter=6, L0=7, L_ref=14,
                            ref_every=6)
    history = run_adaptive_loop(problem, config)
    fits = []
    for cyl in problem.pml.cylinders:
        fits.extend(oracles.fit_modal_decay(history.final_ref_field,
                                            problem.modes[cyl.index], cyl))
    worst = max(f.rel_dev for f in fits)
    rows.append(("damping-layer decay (C.6)", len(fits), worst,
                 all(f.passed for f in fits)))
    failed |= not all(f.passed for f in fits)

    dt = oracles.discrete_trace_report(seed=seed)
    print(f"{'check':30s} {'samples':>8s} {'worst ratio':>14s} {'pass':>6s}")
    for name, n, ratio, ok in rows:
        print(f"{name:30s} {n:8d} {ratio:14.6e} {'ok' if ok else 'FAIL':>6s}")
    print("discrete trace (2.3) empirical ratios (reported only):")
    for deg, ratio in dt.items():
        print(f"  degree {deg}: {ratio:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        lines = ["check,samples,worst_ratio,pass"]
        lines += [f"{n},{s},{r!r},{p}" for n, s, r, p in rows]
        atomic_write(os.path.join(args.out, "verify.csv"), "\n".join(lines) + "\n")
    return 1 if failed else 0


def cmd_render_mesh(args):
    with open(args.dump) as fh:
        dump = load_mesh_dump(fh.read())
    from . import plots
    out = args.out or (os.path.splitext(args.dump)[0] + ".svg")
    plots.render_mesh(dump.vertices, dump.elements, dump.bnd_faces,
                      dump.bnd_tags, path=out)
    print(f"wrote {out}")
    return 0


def main(argv=None):
    ap = argparse.ArgumentParser(prog="truncafem",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run-rd", help="reaction-diffusion adaptive run")
    _add_common(sp, rd=True)
    sp.set_defaults(fn=cmd_run_rd)

    sp = sub.add_parser("run-helmholtz", help="waveguide adaptive run")
    _add_common(sp, rd=False)
    sp.set_defaults(fn=cmd_run_helmholtz)

    sp = sub.add_parser("verify", help="run the inequality/equilibration oracles")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("render-mesh", help="render a mesh dump to SVG")
    sp.add_argument("dump")
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_render_mesh)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
