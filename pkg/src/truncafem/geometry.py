"""Triangulations of truncated unbounded domains.

Meshes derive from the infinite unit Cartesian grid: every admissible unit
square (integer corners) is split into four triangles through its barycenter,
restricted to the domain and to the box |x|_inf <= L.  Refinement is newest
vertex bisection (NVB); the truncation box can be grown by one unit, which
appends fresh macro cells and re-establishes conformity against whatever
refinement already exists along the old frontier.

Element convention: a triangle is stored as (a, b, c) with positive
orientation, refinement edge (a, b) and peak (newest vertex) c.  Bisection at
the midpoint m of (a, b) produces (c, a, m) and (b, c, m), so each child's
refinement edge is the edge opposite m.

All vertex coordinates are dyadic rationals of small height, hence exact in
float64; boundary tagging uses exact comparisons, not tolerances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .quadrature import jacobians

logger = logging.getLogger(__name__)

# face tags
INTERIOR = 0
PHYSICAL_GAMMA = 1
ARTIFICIAL_GAMMA_H = 2


class MeshError(Exception):
    pass


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FullPlane:
    """All of R^2; the physical boundary is empty."""

    def square_inside(self, i: int, j: int) -> bool:
        return True

    def face_on_physical_boundary(self, mid_x: float, mid_y: float) -> bool:
        return False


@dataclass(frozen=True)
class TShapedWaveguide:
    """Union of the strip |x2| < 1 and the downward strip |x1| < 1, x2 < 1.

    Three semi-infinite cylinders with axis directions -e1, +e1, -e2, offsets
    ell = 5 and cross sections of width 2; the region |x|_inf > 5 carries the
    absorbing layer (see waveguide module).
    """

    ell: float = 5.0

    def square_inside(self, i: int, j: int) -> bool:
        return (-1 <= j <= 0) or (-1 <= i <= 0 and j <= 0)

    def face_on_physical_boundary(self, mid_x: float, mid_y: float) -> bool:
        if mid_y == 1.0:
            return True
        if mid_y == -1.0 and abs(mid_x) >= 1.0:
            return True
        if abs(mid_x) == 1.0 and mid_y <= -1.0:
            return True
        return False


DomainSpec = FullPlane | TShapedWaveguide


def admissible_squares(domain: DomainSpec, L: int):
    """Lower-left corners (i, j) of unit squares inside the domain and box."""
    out = []
    for i in range(-L, L):
        for j in range(-L, L):
            if domain.square_inside(i, j):
                out.append((i, j))
    return out


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------

@dataclass
class RefineStats:
    n_marked: int = 0
    bisections: int = 0
    closure_bisections: int = 0
    direct_boundary_bisections: int = 0
    closure_boundary_bisections: int = 0


@dataclass
class ElementGeometry:
    h: float
    rho: float
    beta: float


@dataclass
class Patch:
    """Vertex patch: elements sharing the center vertex.

    gamma_faces are the patch-boundary faces where the hat function of the
    center vanishes; gamma_c_faces are the remaining patch-boundary faces
    (nonempty exactly when the center lies on the mesh boundary).
    Faces are given as global face ids of the mesh topology.
    """

    center: int
    elems: np.ndarray
    gamma_faces: np.ndarray
    gamma_c_faces: np.ndarray


class Topology:
    """Face table and adjacency, derived once per mesh."""

    def __init__(self, mesh: "Mesh"):
        elems = mesh.elements
        ne = len(elems)
        # local edges 0:(a,b) 1:(b,c) 2:(c,a)
        raw = np.concatenate([elems[:, (0, 1)], elems[:, (1, 2)], elems[:, (2, 0)]])
        pairs = np.sort(raw, axis=1)
        self.face_verts, inv = np.unique(pairs, axis=0, return_inverse=True)
        nf = len(self.face_verts)
        self.elem_face = inv.reshape(3, ne).T.astype(np.int64)

        self.face_elems = np.full((nf, 2), -1, dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        fsorted = inv[order]
        esorted = order % ne
        starts = np.searchsorted(fsorted, np.arange(nf))
        counts = np.bincount(fsorted, minlength=nf)
        if counts.max() > 2:
            raise MeshError("non-manifold face (more than two incident elements)")
        self.face_elems[:, 0] = esorted[starts]
        has2 = counts == 2
        self.face_elems[has2, 1] = esorted[starts[has2] + 1]

        self.neighbor = np.full((ne, 3), -1, dtype=np.int64)
        for k in range(3):
            f = self.elem_face[:, k]
            other = np.where(self.face_elems[f, 0] == np.arange(ne),
                             self.face_elems[f, 1], self.face_elems[f, 0])
            self.neighbor[:, k] = other

        # tags
        V = mesh.vertices
        mids = 0.5 * (V[self.face_verts[:, 0]] + V[self.face_verts[:, 1]])
        self.face_tag = np.zeros(nf, dtype=np.int8)
        bnd = self.face_elems[:, 1] < 0
        for f in np.nonzero(bnd)[0]:
            if mesh.domain.face_on_physical_boundary(mids[f, 0], mids[f, 1]):
                self.face_tag[f] = PHYSICAL_GAMMA
            else:
                self.face_tag[f] = ARTIFICIAL_GAMMA_H

        nv = len(V)
        self.boundary_vertex = np.zeros(nv, dtype=bool)
        self.gammah_vertex = np.zeros(nv, dtype=bool)
        bverts = self.face_verts[bnd]
        self.boundary_vertex[bverts.ravel()] = True
        ghverts = self.face_verts[self.face_tag == ARTIFICIAL_GAMMA_H]
        self.gammah_vertex[ghverts.ravel()] = True

        # vertex -> incident elements (CSR, ascending element ids), with the
        # local slot of the vertex within each incident element
        vrep = elems.ravel()
        erep = np.repeat(np.arange(ne), 3)
        srep = np.tile(np.arange(3), ne)
        o = np.lexsort((erep, vrep))
        self.v2e_indptr = np.searchsorted(vrep[o], np.arange(nv + 1))
        self.v2e = erep[o]
        self.v2e_slot = srep[o]

    def vertex_elems(self, a: int) -> np.ndarray:
        return self.v2e[self.v2e_indptr[a]:self.v2e_indptr[a + 1]]

    def vertex_elems_slots(self, a: int):
        sl = slice(self.v2e_indptr[a], self.v2e_indptr[a + 1])
        return self.v2e[sl], self.v2e_slot[sl]

    def boundary_faces(self) -> np.ndarray:
        return np.nonzero(self.face_elems[:, 1] < 0)[0]


class Mesh:
    """Immutable conforming triangulation (see module docstring)."""

    def __init__(self, domain, L, vertices, elements, gen, parent=None,
                 parent_elem=None, stats: Optional[RefineStats] = None):
        self.domain = domain
        self.L = int(L)
        self.vertices = np.asarray(vertices, dtype=float)
        self.elements = np.asarray(elements, dtype=np.int64)
        self.gen = np.asarray(gen, dtype=np.int32)
        self.parent = parent
        self.parent_elem = (np.asarray(parent_elem, dtype=np.int64)
                            if parent_elem is not None else None)
        self.stats = stats or RefineStats()
        self._topology: Optional[Topology] = None
        self._affine = None
        self.vertices.setflags(write=False)
        self.elements.setflags(write=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    def topology(self) -> Topology:
        if self._topology is None:
            self._topology = Topology(self)
        return self._topology

    def element_verts(self, K=None):
        if K is None:
            return self.vertices[self.elements]
        return self.vertices[self.elements[K]]

    def affine(self):
        """(J, detJ, JinvT, area) for all elements; detJ = 2 area > 0."""
        if self._affine is None:
            J, det, JinvT = jacobians(self.element_verts())
            if np.any(det <= 0):
                raise MeshError("negatively oriented or degenerate element")
            self._affine = (J, det, JinvT, 0.5 * det)
        return self._affine

    def hat_gradients(self):
        """Gradients of the three vertex hat functions, shape (ne, 3, 2)."""
        _, _, JinvT, _ = self.affine()
        g = np.empty((self.n_elements, 3, 2))
        g[:, 1] = JinvT[:, :, 0]
        g[:, 2] = JinvT[:, :, 1]
        g[:, 0] = -g[:, 1] - g[:, 2]
        return g

    def vertex_key(self):
        return {(x, y): i for i, (x, y) in enumerate(self.vertices)}

    # -- queries ----------------------------------------------------------

    def element_touches_gammah(self) -> np.ndarray:
        """Elements sharing at least one vertex with the artificial boundary."""
        top = self.topology()
        return top.gammah_vertex[self.elements].any(axis=1)

    def patch_of(self, a: int) -> Patch:
        top = self.topology()
        elems = top.vertex_elems(a)
        if len(elems) == 0:
            raise MeshError(f"vertex {a} has no incident elements")
        faces = top.elem_face[elems].ravel()
        uniq, counts = np.unique(faces, return_counts=True)
        bnd = uniq[counts == 1]
        contains_a = (top.face_verts[bnd] == a).any(axis=1)
        gamma_c = bnd[contains_a]
        if np.any(top.face_elems[gamma_c, 1] >= 0):
            raise MeshError("patch face containing the center is not on the mesh boundary")
        return Patch(center=a, elems=elems, gamma_faces=bnd[~contains_a],
                     gamma_c_faces=gamma_c)

    def element_geometry(self, K: int) -> ElementGeometry:
        v = self.element_verts(K)
        e = np.array([v[1] - v[0], v[2] - v[1], v[0] - v[2]])
        lens = np.hypot(e[:, 0], e[:, 1])
        d1, d2 = v[1] - v[0], v[2] - v[0]
        area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
        if area <= 0.0:
            raise MeshError(f"degenerate element {K}")
        h = lens.max()
        rho = 2.0 * area / lens.sum()
        return ElementGeometry(h=h, rho=rho, beta=h / rho)

    def geometry_arrays(self):
        """(h, rho, beta) for all elements."""
        v = self.element_verts()
        l0 = np.hypot(*(v[:, 1] - v[:, 0]).T)
        l1 = np.hypot(*(v[:, 2] - v[:, 1]).T)
        l2 = np.hypot(*(v[:, 0] - v[:, 2]).T)
        area = self.affine()[3]
        h = np.maximum(np.maximum(l0, l1), l2)
        rho = 2.0 * area / (l0 + l1 + l2)
        return h, rho, h / rho

    def ancestor_in(self, other: "Mesh") -> np.ndarray:
        """Map each element of self to its ancestor element row in `other`.

        -1 marks elements with no ancestor (created by domain extension after
        `other` was built).  Requires `other` on self's parent chain.
        """
        if self is other:
            return np.arange(self.n_elements)
        chain = []
        m = self
        while m is not other:
            if m.parent is None:
                raise MeshError("meshes are not nested")
            chain.append(m.parent_elem)
            m = m.parent
        idx = np.arange(self.n_elements)
        for pe in chain:
            nxt = np.where(idx >= 0, pe[np.maximum(idx, 0)], -1)
            idx = nxt
        return idx


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

class _Builder:
    """Mutable element soup used while refining; frozen into a Mesh at the end."""

    def __init__(self, vertices, elements, gen, roots):
        self.vkey = {(x, y): i for i, (x, y) in enumerate(vertices)}
        self.verts = [tuple(v) for v in vertices]
        self.elems = [tuple(e) for e in elements]
        self.gen = list(gen)
        self.roots = list(roots)
        self.alive = [True] * len(self.elems)
        self.edge_map: dict = {}
        for t, e in enumerate(self.elems):
            self._register(t, e)

    def _register(self, t, e):
        for u, v in ((e[0], e[1]), (e[1], e[2]), (e[2], e[0])):
            key = (u, v) if u < v else (v, u)
            self.edge_map.setdefault(key, []).append(t)

    def vertex_id(self, xy):
        vid = self.vkey.get(xy)
        if vid is None:
            vid = len(self.verts)
            self.verts.append(xy)
            self.vkey[xy] = vid
        return vid

    def midpoint_id(self, a, b):
        xa, ya = self.verts[a]
        xb, yb = self.verts[b]
        return self.vertex_id(((xa + xb) / 2.0, (ya + yb) / 2.0))

    def alive_owners(self, key):
        return [t for t in self.edge_map.get(key, ()) if self.alive[t]]

    def add_element(self, tri, gen, root):
        t = len(self.elems)
        self.elems.append(tri)
        self.gen.append(gen)
        self.roots.append(root)
        self.alive.append(True)
        self._register(t, tri)
        return t

    def _bisect_one(self, t, m):
        a, b, c = self.elems[t]
        self.alive[t] = False
        g, r = self.gen[t] + 1, self.roots[t]
        self.add_element((c, a, m), g, r)
        self.add_element((b, c, m), g, r)

    def bisect_compatibly(self, t0, on_bisect=None):
        """Bisect element t0 through its refinement edge, recursively
        pre-refining neighbors so the mesh stays conforming.

        on_bisect(t, a, b, m, was_boundary) is called for every bisected
        element, with (a, b) its refinement edge, m the midpoint vertex and
        was_boundary whether the edge had a single incident element.
        """
        stack = [t0]
        guard = 0
        while stack:
            guard += 1
            if guard > 4 * len(self.elems) + 1000:
                raise MeshError("NVB closure did not terminate (incompatible mesh)")
            t = stack[-1]
            if not self.alive[t]:
                stack.pop()
                continue
            a, b, c = self.elems[t]
            key = (a, b) if a < b else (b, a)
            owners = self.alive_owners(key)
            nbr = next((o for o in owners if o != t), None)
            if nbr is not None:
                na, nb, _ = self.elems[nbr]
                nkey = (na, nb) if na < nb else (nb, na)
                if nkey != key:
                    stack.append(nbr)
                    continue
            stack.pop()
            m = self.midpoint_id(a, b)
            self._bisect_one(t, m)
            if on_bisect is not None:
                on_bisect(t, a, b, m, nbr is None)
            if nbr is not None and self.alive[nbr]:
                self._bisect_one(nbr, m)
                if on_bisect is not None:
                    on_bisect(nbr, a, b, m, False)

    def freeze(self, domain, L, parent, stats):
        keep = [t for t, al in enumerate(self.alive) if al]
        vused = {v for t in keep for v in self.elems[t]}
        if len(vused) != len(self.verts):
            # NVB never orphans vertices; extension cannot either
            raise MeshError("internal error: orphan vertices after refinement")
        verts = np.array(self.verts)
        elems = np.array([self.elems[t] for t in keep])
        gen = np.array([self.gen[t] for t in keep])
        pe = np.array([self.roots[t] for t in keep]) if parent is not None else None
        return Mesh(domain, L, verts, elems, gen, parent=parent,
                    parent_elem=pe, stats=stats)


def _macro_cells(builder: _Builder, squares):
    """Append the 4-triangle split of each unit square (refedge = square side)."""
    for (i, j) in sorted(squares):
        c00 = builder.vertex_id((float(i), float(j)))
        c10 = builder.vertex_id((float(i + 1), float(j)))
        c11 = builder.vertex_id((float(i + 1), float(j + 1)))
        c01 = builder.vertex_id((float(i), float(j + 1)))
        m = builder.vertex_id((i + 0.5, j + 0.5))
        for tri in ((c00, c10, m), (c10, c11, m), (c11, c01, m), (c01, c00, m)):
            builder.add_element(tri, 0, -1)


def build_initial_mesh(domain: DomainSpec, L: int) -> Mesh:
    if L < 1:
        raise MeshError(f"truncation parameter must be >= 1, got {L}")
    squares = admissible_squares(domain, L)
    if not squares:
        raise MeshError("domain and truncation box do not intersect")
    b = _Builder(np.zeros((0, 2)), [], [], [])
    _macro_cells(b, squares)
    mesh = b.freeze(domain, L, None, RefineStats())
    _check_connected(mesh)
    return mesh


def _check_connected(mesh: Mesh):
    top = mesh.topology()
    ne = mesh.n_elements
    seen = np.zeros(ne, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        t = stack.pop()
        for n in top.neighbor[t]:
            if n >= 0 and not seen[n]:
                seen[n] = True
                stack.append(n)
    if not seen.all():
        raise MeshError("covered region is not connected (increase L)")


def refine_nvb(mesh: Mesh, marked) -> Mesh:
    """Bisect every marked element at least once, with conformity closure."""
    marked = sorted(set(int(k) for k in marked))
    if marked and (marked[0] < 0 or marked[-1] >= mesh.n_elements):
        raise MeshError("marked set contains invalid element ids")
    if not marked:
        return mesh

    b = _Builder(mesh.vertices, mesh.elements, mesh.gen, range(mesh.n_elements))
    top = mesh.topology()
    gammah_vertex = set(np.nonzero(top.gammah_vertex)[0])
    # boundary faces inherit their tag when split, so midpoints created on the
    # artificial boundary are classified exactly
    bnd_tag = {tuple(top.face_verts[f]): top.face_tag[f] for f in top.boundary_faces()}
    stats = RefineStats(n_marked=len(marked))
    marked_set = set(marked)

    def on_bisect(t, va, vb, m, was_boundary):
        key = (va, vb) if va < vb else (vb, va)
        tag = bnd_tag.get(key)
        if tag is not None:
            lo, hi = (va, m) if va < m else (m, va)
            bnd_tag[(lo, hi)] = tag
            lo, hi = (vb, m) if vb < m else (m, vb)
            bnd_tag[(lo, hi)] = tag
            if tag == ARTIFICIAL_GAMMA_H:
                gammah_vertex.add(m)
        stats.bisections += 1
        direct = t in marked_set
        if not direct:
            stats.closure_bisections += 1
        if any(v in gammah_vertex for v in b.elems[t]):
            if direct:
                stats.direct_boundary_bisections += 1
            else:
                stats.closure_boundary_bisections += 1

    for t in marked:
        if b.alive[t]:
            b.bisect_compatibly(t, on_bisect)

    out = b.freeze(mesh.domain, mesh.L, mesh, stats)
    if stats.closure_boundary_bisections:
        logger.warning("closure bisected %d elements touching the artificial boundary",
                       stats.closure_boundary_bisections)
    return out


def extend_to(mesh: Mesh, L_target: int, domain: DomainSpec | None = None) -> Mesh:
    """Grow the truncation box to L_target; existing elements are untouched.

    Equivalent to repeated one-unit extensions (rings are appended in order),
    but builds topology and runs the conformity closure only once.
    """
    domain = domain or mesh.domain
    if L_target < mesh.L:
        raise MeshError("cannot shrink the truncation box")
    if L_target == mesh.L:
        return mesh
    b = _Builder(mesh.vertices, mesh.elements, mesh.gen, range(mesh.n_elements))
    n_old = mesh.n_elements
    covered = set(admissible_squares(domain, mesh.L))
    for L in range(mesh.L + 1, L_target + 1):
        ring = [s for s in admissible_squares(domain, L) if s not in covered]
        covered.update(ring)
        _macro_cells(b, ring)

    stats = RefineStats()

    def on_bisect(t, va, vb, m, was_boundary):
        stats.bisections += 1
        stats.closure_bisections += 1
        if t < n_old:
            stats.closure_boundary_bisections += 1

    # Conformity closure: resolve hanging vertices sitting at face midpoints.
    # Old vertices can only hang faces of the appended cells (the old mesh is
    # conforming and new vertices lie strictly outside it), so only edges of
    # new elements need checking; a worklist keeps this incremental.
    def edge_keys(t):
        a, bb, c = b.elems[t]
        for u, v in ((a, bb), (bb, c), (c, a)):
            yield (u, v) if u < v else (v, u)

    work = []
    for t in range(n_old, len(b.elems)):
        work.extend(edge_keys(t))
    guard = 0
    while work:
        guard += 1
        if guard > 100 * (len(b.elems) + 1000):
            raise MeshError("extension closure did not terminate")
        key = work.pop()
        owners = b.alive_owners(key)
        if len(owners) != 1:
            continue
        xa, ya = b.verts[key[0]]
        xb, yb = b.verts[key[1]]
        if ((xa + xb) / 2.0, (ya + yb) / 2.0) not in b.vkey:
            continue
        before = len(b.elems)
        b.bisect_compatibly(owners[0], on_bisect)
        for t in range(before, len(b.elems)):
            work.extend(edge_keys(t))
        work.append(key)  # re-check until the hanging midpoint is resolved

    out = b.freeze(domain, L_target, mesh, stats)
    if stats.closure_boundary_bisections:
        logger.warning("extension closure bisected %d pre-existing elements",
                       stats.closure_boundary_bisections)
    # existing elements must be preserved in place
    if stats.closure_boundary_bisections == 0 and not np.array_equal(
            out.elements[:n_old], mesh.elements):
        raise MeshError("internal error: extension modified existing elements")
    return out


def extend_truncation(mesh: Mesh, domain: DomainSpec | None = None) -> Mesh:
    """Grow the truncation box by one unit; existing elements are untouched."""
    return extend_to(mesh, mesh.L + 1, domain)


def verify_mesh(mesh: Mesh):
    """Check matching/conformity, orientation, coverage and tag consistency."""
    top = mesh.topology()
    _, det, _, _ = mesh.affine()
    if np.any(det <= 0):
        raise MeshError("orientation violated")
    V = mesh.vertices
    if np.max(np.abs(V)) > mesh.L:
        raise MeshError("element outside the truncation box")
    vkey = mesh.vertex_key()
    for f, (a, bv) in enumerate(top.face_verts):
        mid = ((V[a, 0] + V[bv, 0]) / 2.0, (V[a, 1] + V[bv, 1]) / 2.0)
        if mid in vkey:
            raise MeshError(f"hanging vertex on face {f}")
    bnd = top.boundary_faces()
    if np.any(top.face_tag[bnd] == INTERIOR):
        raise MeshError("untagged boundary face")
    mids = 0.5 * (V[top.face_verts[:, 0]] + V[top.face_verts[:, 1]])
    for f in bnd:
        if top.face_tag[f] == ARTIFICIAL_GAMMA_H:
            if mesh.domain.face_on_physical_boundary(*mids[f]):
                raise MeshError("physical boundary face tagged artificial")
    _check_connected(mesh)
