"""Plain-text dump formats (mesh v1, field v1, flux v1) and atomic writes.

The mesh format stores vertices, elements (vertex triple, refinement-edge
index, NVB generation) and tagged boundary faces; it round-trips everything
needed to redraw or re-import a mesh, but not the domain object itself.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .geometry import ARTIFICIAL_GAMMA_H, PHYSICAL_GAMMA, Mesh


class FormatError(Exception):
    pass


def atomic_write(path, text: str):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_mesh(mesh: Mesh) -> str:
    top = mesh.topology()
    lines = ["mesh v1", str(mesh.n_vertices)]
    lines.extend(f"{float(x)!r} {float(y)!r}" for x, y in mesh.vertices)
    lines.append(str(mesh.n_elements))
    # refinement edge is canonically the (v0, v1) edge, index 0
    lines.extend(f"{a} {b} {c} 0 {g}"
                 for (a, b, c), g in zip(mesh.elements, mesh.gen))
    bnd = top.boundary_faces()
    lines.append(str(len(bnd)))
    for f in bnd:
        a, b = top.face_verts[f]
        tag = "G" if top.face_tag[f] == PHYSICAL_GAMMA else "GH"
        lines.append(f"{a} {b} {tag}")
    return "\n".join(lines) + "\n"


class MeshDump:
    """Raw parsed mesh dump (geometry only, no domain semantics)."""

    def __init__(self, vertices, elements, refedge, gen, bnd_faces, bnd_tags):
        self.vertices = vertices
        self.elements = elements
        self.refedge = refedge
        self.gen = gen
        self.bnd_faces = bnd_faces
        self.bnd_tags = bnd_tags


def load_mesh_dump(text: str) -> MeshDump:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "mesh v1":
        raise FormatError("not a mesh v1 dump")
    i = 1
    nv = int(lines[i]); i += 1
    verts = np.array([[float(t) for t in lines[i + k].split()] for k in range(nv)])
    i += nv
    ne = int(lines[i]); i += 1
    raw = np.array([[int(t) for t in lines[i + k].split()] for k in range(ne)])
    i += ne
    elems = raw[:, 0:3]
    refedge = raw[:, 3]
    gen = raw[:, 4]
    # rotate so the refinement edge is (v0, v1)
    for r in (1, 2):
        sel = refedge == r
        elems[sel] = np.roll(elems[sel], -r, axis=1)
    nb = int(lines[i]); i += 1
    faces, tags = [], []
    for k in range(nb):
        a, b, tag = lines[i + k].split()
        faces.append((int(a), int(b)))
        tags.append(PHYSICAL_GAMMA if tag == "G" else ARTIFICIAL_GAMMA_H)
    return MeshDump(verts, elems, np.zeros(ne, dtype=int), gen,
                    np.array(faces, dtype=int).reshape(-1, 2),
                    np.array(tags, dtype=int))


def dump_field(field) -> str:
    kind = field.kind
    lines = ["field v1", kind, str(len(field.coeffs))]
    if kind == "complex":
        lines.extend(f"{float(c.real)!r} {float(c.imag)!r}" for c in field.coeffs)
    else:
        lines.extend(f"{float(c)!r}" for c in field.coeffs)
    return "\n".join(lines) + "\n"


def load_field_dump(text: str):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "field v1":
        raise FormatError("not a field v1 dump")
    kind = lines[1]
    n = int(lines[2])
    if kind == "complex":
        out = np.array([complex(float(a), float(b))
                        for a, b in (ln.split() for ln in lines[3:3 + n])])
    else:
        out = np.array([float(ln) for ln in lines[3:3 + n]])
    return kind, out


def dump_flux(flux) -> str:
    lines = ["flux v1", flux.kind, f"{len(flux.coeffs)} {flux.coeffs.shape[1]} {flux.q}"]
    if flux.kind == "complex":
        for row in flux.coeffs:
            lines.append(" ".join(f"{float(c.real)!r} {float(c.imag)!r}" for c in row))
    else:
        for row in flux.coeffs:
            lines.append(" ".join(f"{float(c)!r}" for c in row))
    return "\n".join(lines) + "\n"


def trace_report_csv(table) -> str:
    lines = ["face_id,element_id,trace_norm"]
    lines.extend(f"{f},{e},{float(t)!r}" for f, e, t in table)
    return "\n".join(lines) + "\n"
