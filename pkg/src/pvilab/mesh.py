"""Quadrilateral meshes of the disk {|x| <= R} with curved boundary elements.

Every element is the image of the reference square [-1, 1]^2 under a tensor
polynomial map stored by its values at Gauss-Lobatto nodes.  Three kinds
occur:

* ``LINEAR``   -- affine map of a parallelogram (central block),
* ``BILINEAR`` -- straight-sided quadrilateral,
* ``CURVED6``  -- degree 6 in each direction; the edge eta = +1 follows the
  circle |x| = R to rounding accuracy, the other three edges are straight.

Local vertex order is counter-clockwise starting at the reference corner
(-1, -1).  All interior edges are straight and linearly parametrised, so a
vertex inserted at the midpoint of an edge lies on the neighbour's edge and
hanging nodes are geometrically conforming.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .quadrature import gauss_lobatto_nodes, lagrange_1d, tensor_rule

__all__ = [
    "MapKind",
    "ElementMap",
    "Mesh",
    "build_initial_disk_mesh",
    "refine_uniform",
    "refine_adaptive",
    "map_eval",
    "map_jacobian",
    "curved_map_nodes",
    "fit_arc",
    "dump_mesh",
]

CURVED_DEGREE = 6
GAMMA_BOUND = 20.0

# initial layout: central square [-S, S]^2, ring interface at radius R_RING (unit disk scale)
SQUARE_HALF_WIDTH = 0.65
RING_RADIUS = 1.12


class MapKind(IntEnum):
    LINEAR = 0
    BILINEAR = 1
    CURVED6 = 2


@dataclass(frozen=True)
class ElementMap:
    """Tensor polynomial map F_D: [-1, 1]^2 -> R^2.

    ``nodes[j, i]`` is F_D(t_i, t_j) where t are the Gauss-Lobatto points of
    the map degree (1 for straight-sided kinds).
    """

    kind: MapKind
    nodes: np.ndarray = field(repr=False)

    @property
    def degree(self) -> int:
        return self.nodes.shape[0] - 1


def _map_tables(degree, pts):
    t = gauss_lobatto_nodes(degree)
    lx, dx = lagrange_1d(t, pts[:, 0])
    ly, dy = lagrange_1d(t, pts[:, 1])
    return lx, dx, ly, dy


def eval_maps(nodes, pts):
    """Evaluate a stack of maps of one degree at reference points.

    ``nodes`` has shape (E, g+1, g+1, 2), ``pts`` shape (Q, 2).  Returns the
    physical points (E, Q, 2) and Jacobians (E, Q, 2, 2) with
    ``J[..., a, b] = d x_a / d xhat_b``.
    """
    nodes = np.asarray(nodes, dtype=float)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    lx, dx, ly, dy = _map_tables(nodes.shape[1] - 1, pts)
    E, n = nodes.shape[0], nodes.shape[1] * nodes.shape[2]
    # tables over the flattened node index j * (g+1) + i
    B = np.concatenate([(ly[:, :, None] * lx[:, None, :]).reshape(-1, n),
                        (ly[:, :, None] * dx[:, None, :]).reshape(-1, n),
                        (dy[:, :, None] * lx[:, None, :]).reshape(-1, n)])
    V = np.matmul(B, nodes.reshape(E, n, 2))  # (E, 3Q, 2)
    Q = len(pts)
    return V[:, :Q], np.stack([V[:, Q:2 * Q], V[:, 2 * Q:]], axis=-1)


def map_eval(fmap: ElementMap, xhat) -> np.ndarray:
    """Physical image of the reference point(s) ``xhat``."""
    xhat = np.asarray(xhat, dtype=float)
    X, _ = eval_maps(fmap.nodes[None], xhat.reshape(-1, 2))
    return X[0].reshape(xhat.shape)


def map_jacobian(fmap: ElementMap, xhat) -> np.ndarray:
    """2x2 Jacobian of the map at ``xhat`` (stacked for several points)."""
    xhat = np.asarray(xhat, dtype=float)
    _, J = eval_maps(fmap.nodes[None], xhat.reshape(-1, 2))
    return J[0].reshape(xhat.shape[:-1] + (2, 2))


def _bilinear_nodes(v):
    v = np.asarray(v, dtype=float)
    return np.array([[v[0], v[1]], [v[3], v[2]]])


# -- boundary arc --------------------------------------------------------


@functools.lru_cache(maxsize=256)
def _arc_profile(beta_key):
    """Polar profile (radius, angle / beta) at the degree-6 Gauss-Lobatto nodes
    of a symmetric polynomial curve hugging the unit-circle arc [-beta, beta]."""
    from scipy.optimize import least_squares

    beta = float(beta_key)
    t = gauss_lobatto_nodes(CURVED_DEGREE)
    s = np.cos(np.linspace(0.0, 0.5 * np.pi, 400))
    L, _ = lagrange_1d(t, s)
    cb, sb = np.cos(beta), np.sin(beta)

    def unpack(z):
        x1, x2, x3, y1, y2 = z
        X = np.array([cb, x1, x2, x3, x2, x1, cb])
        Y = np.array([-sb, -y1, -y2, 0.0, y2, y1, sb])
        return X, Y

    def residual(z, w):
        X, Y = unpack(z)
        return w * (np.hypot(L @ X, L @ Y) - 1.0)

    th = beta * t
    z = np.array([np.cos(th[5]), np.cos(th[4]), 1.0, np.sin(th[5]), np.sin(th[4])])
    # Short arcs: interpolating the circle at equiangular Lobatto positions is
    # already accurate to rounding.  The fit below is degenerate along the
    # circle there and would only add a non-smooth tangential drift.
    if np.abs(residual(z, 1.0)).max() <= 1e-14:
        return np.ones_like(t), t.copy()
    w = np.ones_like(s)
    kw = dict(xtol=1e-15, ftol=1e-15, gtol=1e-15, method="lm")
    z = least_squares(residual, z, args=(w,), **kw).x
    # Lawson reweighting pushes the L2 fit towards the minimax fit
    for _ in range(40):
        r = np.abs(residual(z, 1.0))
        if r.max() < 2e-16:
            break
        w = w * r / np.mean(w * r) + 1e-300
        z = least_squares(residual, z, args=(np.sqrt(w),), **kw).x
    X, Y = unpack(z)
    return np.hypot(X, Y), np.arctan2(Y, X) / beta


def fit_arc(z_start, z_end, R):
    """Nodal points (7, 2) of a degree-6 curve from ``z_start`` to ``z_end``
    along the shorter arc of the circle of radius ``R`` about the origin."""
    a = complex(*z_start) / R
    b = complex(*z_end) / R
    mid = (a + b) / abs(a + b)
    rot = b / mid
    beta = abs(np.angle(rot))
    radius, frac = _arc_profile(round(beta, 13))
    sign = 1.0 if np.angle(rot) >= 0 else -1.0
    pts = R * mid * radius * np.exp(1j * sign * beta * frac)
    out = np.column_stack([pts.real, pts.imag])
    out[0] = z_start
    out[-1] = z_end
    return out


def curved_map_nodes(v, R):
    """Transfinite blend of the straight edges v0v1, v1v2, v0v3 with the
    fitted arc from v3 (xi = -1) to v2 (xi = +1), tabulated at 7x7 nodes."""
    v = np.asarray(v, dtype=float)
    t = gauss_lobatto_nodes(CURVED_DEGREE)
    arc = fit_arc(v[3], v[2], R)
    XI, ETA = np.meshgrid(t, t, indexing="xy")
    xi, eta = XI[..., None], ETA[..., None]
    bil = 0.25 * ((1 - xi) * (1 - eta) * v[0] + (1 + xi) * (1 - eta) * v[1]
                  + (1 + xi) * (1 + eta) * v[2] + (1 - xi) * (1 + eta) * v[3])
    chord = 0.5 * ((1 - t)[:, None] * v[3] + (1 + t)[:, None] * v[2])
    return bil + 0.5 * (1 + eta) * (arc - chord)[None, :, :]


# -- mesh ------------------------------------------------------------------


@dataclass
class Mesh:
    """Leaf elements of a quadtree forest over the initial disk mesh.

    ``midpoints`` maps a sorted vertex pair to the vertex inserted at the
    midpoint of that edge; it is shared history across refinements and is
    what identifies hanging nodes.
    """

    R: float
    vertices: np.ndarray
    elements: np.ndarray  # (ne, 4) vertex ids, counter-clockwise
    kind: np.ndarray  # (ne,) MapKind values
    level: np.ndarray
    base: np.ndarray  # index of the initial element the leaf descends from
    path: np.ndarray  # (ne, 2) integer position inside the base element at ``level``
    curved: dict  # element id -> (7, 7, 2) map nodes
    midpoints: dict
    on_circle: np.ndarray  # (nv,) bool
    # provenance relative to the mesh this one was refined from
    parent: np.ndarray | None = field(default=None, repr=False)
    child: np.ndarray | None = field(default=None, repr=False)  # -1 if not split

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def element_map(self, e) -> ElementMap:
        k = MapKind(int(self.kind[e]))
        if k == MapKind.CURVED6:
            return ElementMap(k, self.curved[e])
        return ElementMap(k, _bilinear_nodes(self.vertices[self.elements[e]]))

    def map_groups(self):
        """Element ids grouped by map degree with stacked nodal arrays."""
        straight = np.flatnonzero(self.kind != MapKind.CURVED6)
        curved = np.flatnonzero(self.kind == MapKind.CURVED6)
        groups = []
        if straight.size:
            v = self.vertices[self.elements[straight]]
            nodes = np.stack([np.stack([v[:, 0], v[:, 1]], 1),
                              np.stack([v[:, 3], v[:, 2]], 1)], 1)
            groups.append((straight, nodes))
        if curved.size:
            groups.append((curved, np.stack([self.curved[e] for e in curved])))
        return groups

    def evaluate(self, pts):
        """Physical points and Jacobians of all elements at reference ``pts``."""
        X = np.empty((self.n_elements, len(pts), 2))
        J = np.empty((self.n_elements, len(pts), 2, 2))
        for ids, nodes in self.map_groups():
            X[ids], J[ids] = eval_maps(nodes, pts)
        return X, J

    def edges(self):
        """Sorted vertex pairs of the four local edges, shape (ne, 4, 2).

        Local edge k joins local vertices (0,1), (1,2), (3,2), (0,3).
        """
        el = self.elements
        pairs = np.stack([el[:, [0, 1]], el[:, [1, 2]], el[:, [3, 2]], el[:, [0, 3]]], 1)
        return np.sort(pairs, axis=2)

    def diameters(self) -> np.ndarray:
        """Element diameters h_D (vertex pairs; curved edges sampled at 13 points)."""
        v = self.vertices[self.elements]
        d = v[:, :, None, :] - v[:, None, :, :]
        h = np.sqrt(np.max(np.sum(d * d, axis=-1), axis=(1, 2)))
        ids = self.boundary_elements()
        if ids.size:
            s = np.linspace(-1, 1, 13)
            ring = np.concatenate([np.column_stack([s, -np.ones(13)]), np.column_stack([np.ones(13), s]),
                                   np.column_stack([s, np.ones(13)]), np.column_stack([-np.ones(13), s])])
            X, _ = eval_maps(np.stack([self.curved[e] for e in ids]), ring)
            d = X[:, :, None, :] - X[:, None, :, :]
            h[ids] = np.sqrt(np.max(np.sum(d * d, axis=-1), axis=(1, 2)))
        return h

    def _jacobian_reduce(self, q, reduce):
        """Apply ``reduce(ids, J)`` chunkwise to Jacobians at q x q Gauss points."""
        rule = tensor_rule(q)
        for ids, nodes in self.map_groups():
            for k in range(0, len(ids), _CHUNK):
                _, J = eval_maps(nodes[k:k + _CHUNK], rule.points)
                reduce(ids[k:k + _CHUNK], J, rule)

    @property
    def h(self) -> float:
        return float(self.diameters().max())

    def areas(self, q=13) -> np.ndarray:
        out = np.empty(self.n_elements)

        def red(ids, J, rule):
            out[ids] = _det(J) @ rule.weights
        self._jacobian_reduce(q, red)
        return out

    def min_jacobian(self, q=13) -> float:
        out = np.empty(self.n_elements)

        def red(ids, J, rule):
            out[ids] = _det(J).min(axis=1)
        self._jacobian_reduce(q, red)
        return float(out.min())

    def shape_regularity(self, q=13) -> np.ndarray:
        """gamma_D = max over Gauss points of max(|grad F|/h_D, h_D |grad F^-1|)."""
        out = np.empty(self.n_elements)
        h = self.diameters()

        def red(ids, J, rule):
            sv = np.linalg.svd(J, compute_uv=False)
            hh = h[ids, None]
            out[ids] = np.max(np.maximum(sv[..., 0] / hh, hh / sv[..., 1]), axis=1)
        self._jacobian_reduce(q, red)
        return out

    def boundary_elements(self) -> np.ndarray:
        return np.flatnonzero(self.kind == MapKind.CURVED6)

    def boundary_deviation(self, n_samples=13) -> float:
        """max | |F_D(xi, 1)| - R | over the curved edges at equispaced samples."""
        ids = self.boundary_elements()
        if ids.size == 0:
            return 0.0
        s = np.linspace(-1, 1, n_samples)
        X, _ = eval_maps(np.stack([self.curved[e] for e in ids]),
                         np.column_stack([s, np.ones_like(s)]))
        return float(np.abs(np.hypot(X[..., 0], X[..., 1]) - self.R).max())

    def hanging_edges(self):
        """Coarse leaf edges carrying a hanging midpoint: list of (a, m, b)."""
        leaf = set(map(tuple, self.edges().reshape(-1, 2).tolist()))
        out = []
        for a, b in sorted(leaf):
            m = self.midpoints.get((a, b))
            if m is None:
                continue
            if _key(a, m) in leaf and _key(m, b) in leaf:
                out.append((a, m, b))
        return out

    def irregularity(self) -> int:
        """Largest number of hanging nodes found on one leaf edge."""
        leaf = set(map(tuple, self.edges().reshape(-1, 2).tolist()))
        return max((_count_hanging(self.midpoints, a, b) for a, b in leaf), default=0)


_CHUNK = 4096


def _det(J):
    return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]


def _key(a, b):
    return (a, b) if a < b else (b, a)


def _count_hanging(midpoints, a, b):
    m = midpoints.get(_key(a, b))
    if m is None:
        return 0
    return 1 + _count_hanging(midpoints, a, m) + _count_hanging(midpoints, m, b)


def build_initial_disk_mesh(R: float = 1.5) -> Mesh:
    """20-element disk mesh: 2x2 affine block, a bilinear ring, a curved ring.

    For R = 1.5 the unit circle (free boundary of the model problem) runs
    strictly inside the bilinear ring; other radii scale the layout.
    """
    if R <= 0:
        raise ValueError("radius must be positive")
    S = SQUARE_HALF_WIDTH * R / 1.5
    r1 = RING_RADIUS * R / 1.5
    verts = [(-S, -S), (0, -S), (S, -S), (-S, 0), (0, 0), (S, 0), (-S, S), (0, S), (S, S)]
    # square boundary vertices in counter-clockwise angular order from angle 0
    sq = [5, 8, 7, 6, 3, 0, 1, 2]
    ang = np.pi / 4 * np.arange(8)
    ring = [len(verts) + k for k in range(8)]
    verts += [(r1 * np.cos(t), r1 * np.sin(t)) for t in ang]
    outer = [len(verts) + k for k in range(8)]
    verts += [(R * np.cos(t), R * np.sin(t)) for t in ang]
    verts = np.array(verts, dtype=float)
    verts[np.abs(verts) < 1e-15] = 0.0

    elements, kinds = [], []
    for a, b, c, d in [(0, 1, 4, 3), (1, 2, 5, 4), (3, 4, 7, 6), (4, 5, 8, 7)]:
        elements.append((a, b, c, d))
        kinds.append(MapKind.LINEAR)
    for k in range(8):
        k1 = (k + 1) % 8
        # eta = +1 edge is the outer one: v3 -> v2 runs clockwise
        elements.append((sq[k1], sq[k], ring[k], ring[k1]))
        kinds.append(MapKind.BILINEAR)
    for k in range(8):
        k1 = (k + 1) % 8
        elements.append((ring[k1], ring[k], outer[k], outer[k1]))
        kinds.append(MapKind.CURVED6)
    elements = np.array(elements, dtype=np.int64)
    kinds = np.array(kinds, dtype=np.int8)
    on_circle = np.zeros(len(verts), dtype=bool)
    on_circle[outer] = True
    curved = {e: curved_map_nodes(verts[elements[e]], R)
              for e in np.flatnonzero(kinds == MapKind.CURVED6)}
    ne = len(elements)
    return Mesh(R=float(R), vertices=verts, elements=elements, kind=kinds,
                level=np.zeros(ne, dtype=np.int64), base=np.arange(ne),
                path=np.zeros((ne, 2), dtype=np.int64), curved=curved, midpoints={},
                on_circle=on_circle)


# -- refinement ------------------------------------------------------------


def _refine(mesh: Mesh, marked) -> Mesh:
    marked = np.zeros(mesh.n_elements, dtype=bool) | np.isin(np.arange(mesh.n_elements), marked)
    if not marked.any():
        return mesh
    verts = list(map(tuple, mesh.vertices.tolist()))
    on_circle = list(mesh.on_circle.tolist())
    midpoints = dict(mesh.midpoints)
    R = mesh.R

    def new_vertex(x, circ=False):
        verts.append((float(x[0]), float(x[1])))
        on_circle.append(circ)
        return len(verts) - 1

    def midpoint(a, b, arc=False):
        k = _key(a, b)
        m = midpoints.get(k)
        if m is None:
            pa, pb = np.array(verts[a]), np.array(verts[b])
            if arc:
                s = pa + pb
                m = new_vertex(R * s / np.hypot(*s), True)
            else:
                m = new_vertex(0.5 * (pa + pb))
            midpoints[k] = m
        return m

    els, kinds, levels, bases, paths, curved = [], [], [], [], [], {}
    parent, child = [], []
    for e in range(mesh.n_elements):
        v0, v1, v2, v3 = (int(x) for x in mesh.elements[e])
        k = int(mesh.kind[e])
        if not marked[e]:
            if k == MapKind.CURVED6:
                curved[len(els)] = mesh.curved[e]
            els.append((v0, v1, v2, v3))
            kinds.append(k)
            levels.append(mesh.level[e])
            bases.append(mesh.base[e])
            paths.append(tuple(mesh.path[e]))
            parent.append(e)
            child.append(-1)
            continue
        m01 = midpoint(v0, v1)
        m12 = midpoint(v1, v2)
        m32 = midpoint(v3, v2, arc=(k == MapKind.CURVED6))
        m03 = midpoint(v0, v3)
        fm = mesh.element_map(e)
        c = new_vertex(map_eval(fm, np.array([0.0, 0.0])))
        children = [(v0, m01, c, m03), (m01, v1, m12, c), (c, m12, v2, m32), (m03, c, m32, v3)]
        offsets = [(0, 0), (1, 0), (1, 1), (0, 1)]
        px, py = mesh.path[e]
        for ch, (ox, oy), idx in zip(children, offsets, range(4)):
            if k == MapKind.CURVED6 and idx >= 2:
                ck = MapKind.CURVED6
                curved[len(els)] = curved_map_nodes(np.array([verts[i] for i in ch]), R)
            elif k == MapKind.LINEAR:
                ck = MapKind.LINEAR
            else:
                ck = MapKind.BILINEAR
            els.append(ch)
            kinds.append(ck)
            levels.append(mesh.level[e] + 1)
            bases.append(mesh.base[e])
            paths.append((2 * px + ox, 2 * py + oy))
            parent.append(e)
            child.append(idx)
    return Mesh(R=R, vertices=np.array(verts, dtype=float), elements=np.array(els, dtype=np.int64),
                kind=np.array(kinds, dtype=np.int8), level=np.array(levels, dtype=np.int64),
                base=np.array(bases, dtype=np.int64), path=np.array(paths, dtype=np.int64),
                curved=curved, midpoints=midpoints, on_circle=np.array(on_circle, dtype=bool),
                parent=np.array(parent, dtype=np.int64), child=np.array(child, dtype=np.int64))


# reference-coordinate offsets of the four children (see ``_refine``)
CHILD_OFFSETS = np.array([(-1, -1), (1, -1), (1, 1), (-1, 1)], dtype=float) * 0.5


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every element 1 -> 4."""
    return _refine(mesh, np.arange(mesh.n_elements))


def _closure(mesh: Mesh, marked):
    """Grow ``marked`` until refining it keeps every edge 1-irregular.

    An element must be refined if, after refinement, one of its edges would
    carry a hanging node whose half-edges are themselves split.
    """
    marked = set(int(e) for e in marked)
    edges = mesh.edges()
    mids = mesh.midpoints
    # edges that already have a midpoint, or get one from a marked element
    changed = True
    while changed:
        changed = False
        split = set(mids)
        for e in marked:
            split.update(map(tuple, edges[e].tolist()))
        for e in range(mesh.n_elements):
            if e in marked:
                continue
            for a, b in edges[e].tolist():
                m = mids.get((a, b))
                if m is None:
                    continue
                if _key(a, m) in split or _key(m, b) in split:
                    marked.add(e)
                    changed = True
                    break
    return np.array(sorted(marked), dtype=np.int64)


def refine_adaptive(mesh: Mesh, marked) -> Mesh:
    """Refine the marked elements plus the closure needed for 1-irregularity."""
    marked = np.asarray(list(marked), dtype=np.int64)
    if marked.size == 0:
        return mesh
    return _refine(mesh, _closure(mesh, marked))


def dump_mesh(mesh: Mesh, fh) -> None:
    """Plain-text dump: "nv ne", vertex lines, then element lines with map nodes."""
    fh.write(f"{mesh.n_vertices} {mesh.n_elements}\n")
    for x, y in mesh.vertices:
        fh.write(f"{x:.17g} {y:.17g}\n")
    names = {MapKind.LINEAR: "Linear", MapKind.BILINEAR: "Bilinear", MapKind.CURVED6: "Curved6"}
    for e in range(mesh.n_elements):
        fm = mesh.element_map(e)
        coeffs = " ".join(f"{c:.17g}" for c in fm.nodes.ravel())
        v = " ".join(str(int(i)) for i in mesh.elements[e])
        fh.write(f"{names[fm.kind]} {v} {int(mesh.level[e])} {coeffs}\n")
