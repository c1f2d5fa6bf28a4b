import os

import numpy as np
import pytest

from truncafem import cli
from truncafem.formats import (
    dump_field,
    dump_flux,
    dump_mesh,
    load_field_dump,
    load_mesh_dump,
    trace_report_csv,
)
from truncafem.geometry import FullPlane, build_initial_mesh, refine_nvb
from truncafem.problems import ReactionDiffusion
from truncafem.assembly import solve_field
from truncafem.spaces import LagrangeSpace


def test_mesh_dump_roundtrip():
    mesh = refine_nvb(build_initial_mesh(FullPlane(), 1), [0, 4])
    text = dump_mesh(mesh)
    assert text.startswith("mesh v1\n")
    dump = load_mesh_dump(text)
    assert np.array_equal(dump.vertices, mesh.vertices)
    assert np.array_equal(dump.elements, mesh.elements)
    assert np.array_equal(dump.gen, mesh.gen)
    top = mesh.topology()
    assert len(dump.bnd_faces) == len(top.boundary_faces())


def test_field_dump_roundtrip():
    mesh = build_initial_mesh(FullPlane(), 1)
    space = LagrangeSpace(mesh, 2)
    rng = np.random.default_rng(0)
    f = space.field_from_free(rng.standard_normal(space.n_free))
    kind, coeffs = load_field_dump(dump_field(f))
    assert kind == "real"
    assert np.array_equal(coeffs, f.coeffs)
    fc = space.field_from_free(rng.standard_normal(space.n_free)
                               + 1j * rng.standard_normal(space.n_free))
    kind, coeffs = load_field_dump(dump_field(fc))
    assert kind == "complex"
    assert np.array_equal(coeffs, fc.coeffs)


def test_flux_and_trace_outputs():
    rd = ReactionDiffusion()
    mesh = build_initial_mesh(FullPlane(), 1)
    u = solve_field(rd, LagrangeSpace(mesh, 1))
    from truncafem.equilibration import equilibrate
    flux, osc, work = equilibrate(rd, u)
    text = dump_flux(flux)
    assert text.startswith("flux v1\n")
    assert len(text.splitlines()) == 3 + mesh.n_elements
    _, table = flux.gammah_trace_norms()
    csv = trace_report_csv(table)
    assert csv.splitlines()[0] == "face_id,element_id,trace_norm"
    assert len(csv.splitlines()) == 1 + len(table)


def test_history_csv_schema():
    from truncafem.adaptive import AdaptiveConfig, run_adaptive_loop
    from truncafem.reports import HISTORY_COLUMNS, history_csv
    rd = ReactionDiffusion()
    h = run_adaptive_loop(rd, AdaptiveConfig(p=1, max_iter=1, L0=1, L_ref=6))
    text = history_csv(h)
    lines = text.strip().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS)
    assert len(lines) == 1 + 2  # header + initial + one step


def test_cli_run_rd_and_render(tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["run-rd", "--p", "1", "--max-iter", "1", "--L0", "1",
                   "--L-ref", "6", "--out", str(out), "--svg"])
    assert rc == 0
    for name in ("history.csv", "summary.txt", "mesh_final.txt",
                 "field_final.txt", "traces.csv", "convergence.svg",
                 "effectivity.svg", "mesh_final.svg", "mesh_iter_000.svg"):
        assert (out / name).exists(), name
    summary = (out / "summary.txt").read_text()
    assert summary.startswith("history v1\n")
    assert "residual_bound_pass True" in summary
    rc = cli.main(["render-mesh", str(out / "mesh_final.txt"),
                   "--out", str(out / "rendered.svg")])
    assert rc == 0
    assert (out / "rendered.svg").exists()


def test_cli_config_file_and_overrides(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("p = 1\nmax_iter = 1\nL_ref = 6\n# comment\n")
    out = tmp_path / "o"
    rc = cli.main(["run-rd", "--config", str(cfgfile), "--L0", "1",
                   "--out", str(out)])
    assert rc == 0
    text = (out / "history.csv").read_text()
    assert len(text.strip().splitlines()) == 3
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    with pytest.raises(SystemExit):
        cli.main(["run-rd", "--config", str(bad), "--out", str(out)])


def test_cli_helmholtz_cutoff_rejected(tmp_path):
    from truncafem.waveguide import WaveguideError
    with pytest.raises(WaveguideError):
        cli.main(["run-helmholtz", "--k", str(np.pi / 2), "--max-iter", "0",
                  "--L-ref", "9", "--out", str(tmp_path / "x")])


def test_cli_helmholtz_tiny(tmp_path):
    out = tmp_path / "hz"
    rc = cli.main(["run-helmholtz", "--p", "1", "--max-iter", "1",
                   "--L-ref", "10", "--out", str(out)])
    assert rc == 0
    assert (out / "history.csv").exists()
    assert (out / "modes_cyl1.csv").exists()
    assert (out / "modal_decay.csv").exists()
    lines = (out / "modes_cyl1.csv").read_text().splitlines()
    assert lines[0] == "j,lambda,re_kj,im_kj,nu_j"
