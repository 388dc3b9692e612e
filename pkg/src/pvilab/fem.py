"""Continuous tensor Lagrange spaces on the disk meshes and their assembly.

The nodal basis of degree p lives on the tensor Gauss-Lobatto points of the
reference square.  Degrees of freedom are numbered in three stages:

``raw``      every vertex, every leaf edge, every element interior;
``indep``    raw DOFs minus those sitting on hanging edges, which are
             interpolated from the coarse side (matrix ``P``);
``free``     independent DOFs off the circle |x| = R (homogeneous Dirichlet).

The operator on free DOFs is ``T^T K_raw T`` with ``T = P[:, free]``.
Nodal constraints ``v >= psi`` are imposed at the free nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import CHILD_OFFSETS, MapKind, Mesh, eval_maps
from .quadrature import gauss_lobatto_nodes, lagrange_1d, tensor_rule

__all__ = [
    "FESpace",
    "DiscreteObstacleProblem",
    "GeometryError",
    "build_space",
    "assemble",
    "spectrum_report",
    "evaluate_solution",
    "reference_tables",
    "export_triplets",
    "prolongate",
]

_CHUNK_ENTRIES = 4_000_000  # floats per work array in the element loops


class GeometryError(ValueError):
    """Raised when an element map degenerates at a quadrature point."""


# -- reference element --------------------------------------------------


def reference_tables(p: int, pts):
    """Tensor Lagrange basis on Gauss-Lobatto nodes at reference points.

    Returns values (Q, n) and gradients (Q, 2, n), local index ``a + (p+1) b``
    for the node (t_a, t_b).
    """
    t = gauss_lobatto_nodes(p)
    pts = np.atleast_2d(pts)
    lx, dx = lagrange_1d(t, pts[:, 0])
    ly, dy = lagrange_1d(t, pts[:, 1])
    n = p + 1
    val = (ly[:, :, None] * lx[:, None, :]).reshape(len(pts), n * n)
    gx = (ly[:, :, None] * dx[:, None, :]).reshape(len(pts), n * n)
    gy = (dy[:, :, None] * lx[:, None, :]).reshape(len(pts), n * n)
    return val, np.stack([gx, gy], axis=1)


def _local_layout(p):
    """Local node indices of the four edges (interior nodes only, in the
    direction of the edge) and of the element interior."""
    n = p + 1
    idx = np.arange(n * n).reshape(n, n)  # idx[b, a]
    inner = np.arange(1, p)
    edges = [idx[0, inner], idx[inner, p], idx[p, inner], idx[inner, 0]]
    corners = [idx[0, 0], idx[0, p], idx[p, p], idx[p, 0]]
    return corners, edges, idx[1:p, 1:p].ravel()


# -- space ---------------------------------------------------------------


@dataclass
class FESpace:
    """Lagrange space V_hp with hanging-node and Dirichlet elimination."""

    mesh: Mesh
    p: int
    l2g: np.ndarray = field(repr=False)  # (ne, (p+1)^2) raw DOF ids
    P: sp.csr_matrix = field(repr=False)  # raw -> independent
    free: np.ndarray = field(repr=False)  # independent ids that are unknowns
    dirichlet: np.ndarray = field(repr=False)  # independent ids on the circle
    hanging: np.ndarray = field(repr=False)  # raw ids carrying no unknown
    indep_raw: np.ndarray = field(repr=False)  # raw id of each independent DOF
    points: np.ndarray = field(repr=False)  # (n_raw, 2) physical node positions

    @property
    def n_raw(self) -> int:
        return self.l2g.max() + 1

    @property
    def n_dofs(self) -> int:
        """Number of unknowns N after hanging and Dirichlet elimination."""
        return self.free.size

    @property
    def T(self) -> sp.csr_matrix:
        return self.P[:, self.free].tocsr()

    @property
    def constraint_points(self) -> np.ndarray:
        """Physical positions of the free nodes (the constraint set G_hp)."""
        return self.points[self.indep_raw[self.free]]

    def expand(self, u_free, dirichlet_values=None) -> np.ndarray:
        """Raw coefficient vector from free values (Dirichlet data default 0)."""
        w = np.zeros(self.P.shape[1])
        w[self.free] = u_free
        if dirichlet_values is not None:
            w[self.dirichlet] = dirichlet_values
        return self.P @ w

    def interpolate(self, g: Callable) -> np.ndarray:
        """Raw coefficients of the conforming nodal interpolant of ``g``."""
        w = g(self.points[self.indep_raw])
        return self.P @ w

    def restrict(self, raw) -> np.ndarray:
        """Free-DOF values of a raw coefficient vector."""
        return np.asarray(raw)[self.indep_raw[self.free]]


def build_space(mesh: Mesh, p: int) -> FESpace:
    """Number the DOFs of the degree-p space on ``mesh``."""
    if int(p) != p or p < 1:
        raise ValueError(f"degree must be an integer >= 1, got {p!r}")
    p = int(p)
    ne, nv = mesh.n_elements, mesh.n_vertices
    corners, ledges, linner = _local_layout(p)
    nloc = (p + 1) ** 2
    ni = p - 1

    pairs = mesh.edges()  # sorted
    uniq, inv = np.unique(pairs.reshape(-1, 2), axis=0, return_inverse=True)
    inv = inv.reshape(ne, 4)
    n_edges = len(uniq)
    edge_base = nv
    inner_base = nv + n_edges * ni
    n_raw = inner_base + ne * ni * ni

    l2g = np.empty((ne, nloc), dtype=np.int64)
    el = mesh.elements
    for k in range(4):
        l2g[:, corners[k]] = el[:, k]
    if ni:
        # local edges run v0->v1, v1->v2, v3->v2, v0->v3; global slots run low->high id
        starts = el[:, [0, 1, 3, 0]]
        ends = el[:, [1, 2, 2, 3]]
        slot = np.arange(ni)
        for k in range(4):
            fwd = starts[:, k] < ends[:, k]
            s = np.where(fwd[:, None], slot[None, :], ni - 1 - slot[None, :])
            l2g[:, ledges[k]] = edge_base + inv[:, k, None] * ni + s
        l2g[:, linner] = inner_base + np.arange(ne)[:, None] * ni * ni + np.arange(ni * ni)[None, :]

    # physical node positions
    t = gauss_lobatto_nodes(p)
    Tx, Ty = np.meshgrid(t, t, indexing="xy")
    ref = np.column_stack([Tx.ravel(), Ty.ravel()])
    points = np.empty((n_raw, 2))
    for ids, nodes in mesh.map_groups():
        for k in range(0, len(ids), 8192):
            X, _ = eval_maps(nodes[k:k + 8192], ref)
            points[l2g[ids[k:k + 8192]]] = X
    points[:nv] = mesh.vertices

    # hanging constraints: raw id -> [(raw id, weight)] on the coarse edge
    edge_id = {(int(a), int(b)): i for i, (a, b) in enumerate(uniq)}
    cons = {}
    for a, m, b in mesh.hanging_edges():
        coarse = [a] + [edge_base + edge_id[(a, b)] * ni + s for s in range(ni)] + [b]
        cons[m] = _edge_weights(coarse, t, np.array([0.0]))[0]
        for lo_end, hi_end, ta, tb in ((a, m, -1.0, 0.0), (m, b, 0.0, 1.0)):
            key = (min(lo_end, hi_end), max(lo_end, hi_end))
            # slot s sits at t[s + 1] measured from the lower vertex id
            t_lo, t_hi = (ta, tb) if key[0] == lo_end else (tb, ta)
            tt = t_lo + 0.5 * (t[1:p] + 1.0) * (t_hi - t_lo)
            rows = _edge_weights(coarse, t, tt)
            for s in range(ni):
                cons[edge_base + edge_id[key] * ni + s] = rows[s]

    hanging = np.array(sorted(cons), dtype=np.int64)
    is_indep = np.ones(n_raw, dtype=bool)
    is_indep[hanging] = False
    indep_raw = np.flatnonzero(is_indep)
    col = -np.ones(n_raw, dtype=np.int64)
    col[indep_raw] = np.arange(indep_raw.size)

    resolved = {}

    def resolve(r):
        if is_indep[r]:
            return {int(col[r]): 1.0}
        if r in resolved:
            return resolved[r]
        out = {}
        for s, w in cons[r]:
            for c, v in resolve(s).items():
                out[c] = out.get(c, 0.0) + w * v
        resolved[r] = out
        return out

    rows, cols, vals = [indep_raw], [np.arange(indep_raw.size)], [np.ones(indep_raw.size)]
    for r in hanging.tolist():
        d = resolve(r)
        rows.append(np.full(len(d), r))
        cols.append(np.fromiter(d.keys(), dtype=np.int64, count=len(d)))
        vals.append(np.fromiter(d.values(), dtype=float, count=len(d)))
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n_raw, indep_raw.size))
    P.eliminate_zeros()

    # Dirichlet: circle vertices and the interior nodes of arc edges
    on_bdry = np.zeros(n_raw, dtype=bool)
    on_bdry[:nv] = mesh.on_circle
    curved = np.flatnonzero(mesh.kind == MapKind.CURVED6)
    if curved.size and ni:
        on_bdry[l2g[curved][:, ledges[2]].ravel()] = True
    bd = on_bdry[indep_raw]
    return FESpace(mesh=mesh, p=p, l2g=l2g, P=P, free=np.flatnonzero(~bd),
                   dirichlet=np.flatnonzero(bd), hanging=hanging, indep_raw=indep_raw,
                   points=points)


def _edge_weights(coarse, t, tt):
    """Lagrange weights of the coarse-edge DOFs at edge parameters ``tt``."""
    L, _ = lagrange_1d(t, tt)
    return [[(coarse[k], float(L[i, k])) for k in range(len(coarse)) if L[i, k] != 0.0]
            for i in range(len(tt))]


# -- assembly --------------------------------------------------------------


@dataclass
class DiscreteObstacleProblem:
    """Quadrature-assembled obstacle problem on the free DOFs."""

    K_mat: sp.csr_matrix
    load: np.ndarray
    obstacle: np.ndarray
    quad_q: int
    degree: int
    space: FESpace | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.load.size


def _as_field(c):
    if callable(c):
        return c
    value = float(c)
    return lambda x: np.full(x.shape[:-1], value)


def _element_batches(space, pts):
    """Yield (element ids, X, J, det) over chunks of each map group."""
    nq = len(pts)
    per_el = nq * (4 * (space.p + 1) ** 2 + 8)
    chunk = max(1, _CHUNK_ENTRIES // per_el)
    for ids, nodes in space.mesh.map_groups():
        for k in range(0, len(ids), chunk):
            X, J = eval_maps(nodes[k:k + chunk], pts)
            det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
            yield ids[k:k + chunk], X, J, det


def _inverse_transpose(J, det):
    """(J^{-T}) for stacked 2x2 Jacobians."""
    Jit = np.empty_like(J)
    Jit[..., 0, 0] = J[..., 1, 1]
    Jit[..., 0, 1] = -J[..., 1, 0]
    Jit[..., 1, 0] = -J[..., 0, 1]
    Jit[..., 1, 1] = J[..., 0, 0]
    return Jit / det[..., None, None]


def element_matrices(space: FESpace, a, f, q: int):
    """Local stiffness (ne, n, n) and load (ne, n) with a q x q Gauss rule."""
    rule = tensor_rule(q)
    val, grad = reference_tables(space.p, rule.points)
    a, f = _as_field(a), _as_field(f)
    ne, nloc = space.mesh.n_elements, val.shape[1]
    Ke = np.empty((ne, nloc, nloc))
    Fe = np.empty((ne, nloc))
    for ids, X, J, det in _element_batches(space, rule.points):
        bad = ~(np.abs(det) > 0) | ~np.isfinite(det)
        if bad.any():
            e = ids[np.argwhere(bad)[0, 0]]
            raise GeometryError(f"singular Jacobian on element {e}")
        wd = rule.weights * np.abs(det)
        Jit = _inverse_transpose(J, det)
        G = Jit[..., :, 0, None] * grad[None, :, 0, None, :] + Jit[..., :, 1, None] * grad[None, :, 1, None, :]
        Gw = G * (wd * a(X))[:, :, None, None]
        E = len(ids)
        Ke[ids] = np.matmul(G.reshape(E, -1, nloc).transpose(0, 2, 1), Gw.reshape(E, -1, nloc))
        Fe[ids] = (wd * f(X)) @ val
    return Ke, Fe


def assemble(space: FESpace, a=1.0, f=-2.0, q: int | None = None, psi=None) -> DiscreteObstacleProblem:
    """Assemble the quadrature-perturbed stiffness matrix and load.

    Parameters
    ----------
    space : FESpace
    a, f : float or callable
        Diffusion coefficient and right-hand side; callables receive points
        of shape (..., 2).
    q : int
        Gauss points per direction; defaults to the reference value p + 11.
    psi : float or callable, optional
        Obstacle, sampled at the free nodes.  ``None`` disables it.
    """
    if q is None:
        q = space.p + 11
    if int(q) != q or q < 1:
        raise ValueError(f"quadrature point count must be >= 1, got {q!r}")
    Ke, Fe = element_matrices(space, a, f, int(q))
    nloc = Ke.shape[1]
    rows = np.repeat(space.l2g, nloc, axis=1).ravel()
    cols = np.tile(space.l2g, (1, nloc)).ravel()
    n_raw = space.n_raw
    K_raw = sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n_raw, n_raw))
    F_raw = np.bincount(space.l2g.ravel(), weights=Fe.ravel(), minlength=n_raw)
    T = space.T
    K = (T.T @ K_raw @ T).tocsr()
    K = 0.5 * (K + K.T)  # exact symmetry of the stored pattern
    K.sort_indices()
    load = T.T @ F_raw
    if psi is None:
        obstacle = np.full(load.size, -np.inf)
    else:
        obstacle = _as_field(psi)(space.constraint_points)
    return DiscreteObstacleProblem(K_mat=K.tocsr(), load=load, obstacle=obstacle,
                                   quad_q=int(q), degree=space.p, space=space)


# -- diagnostics -----------------------------------------------------------


def spectrum_report(problem: DiscreteObstacleProblem, dense_limit: int = 2500):
    """Extreme eigenvalues (min_eig, max_eig) of the stiffness matrix.

    Dense symmetric eigensolver for small systems, Lanczos otherwise (the
    smallest eigenvalue through shift-invert about a slightly negative
    shift, which is safe because the quadrature matrix is semi-definite).
    """
    K = problem.K_mat
    n = K.shape[0]
    if n <= dense_limit:
        ev = np.linalg.eigvalsh(K.toarray())
        return float(ev[0]), float(ev[-1])
    vmax = spla.eigsh(K, k=1, which="LA", tol=1e-10, return_eigenvectors=False)[0]
    sigma = -1e-8 * vmax
    vmin = spla.eigsh(K, k=1, sigma=sigma, which="LM", tol=1e-10, return_eigenvectors=False)[0]
    return float(vmin), float(vmax)


def evaluate_solution(space: FESpace, coeffs, element: int, xhat):
    """Value and physical gradient of a discrete function at reference points.

    ``coeffs`` may be a free-DOF vector (length N, zero Dirichlet data) or a
    raw coefficient vector.
    """
    xhat = np.atleast_2d(np.asarray(xhat, dtype=float))
    if np.any(np.abs(xhat) > 1.0 + 1e-14):
        raise ValueError("reference point outside [-1, 1]^2")
    c = np.asarray(coeffs, dtype=float)
    if c.size == space.n_dofs and c.size != space.n_raw:
        c = space.expand(c)
    local = c[space.l2g[element]]
    val, grad = reference_tables(space.p, xhat)
    _, J = eval_maps(space.mesh.element_map(element).nodes[None], xhat)
    J = J[0]
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    g = np.einsum("qij,qj->qi", _inverse_transpose(J, det), grad @ local)
    return val @ local, g


def prolongate(old: FESpace, new: FESpace, coeffs) -> np.ndarray:
    """Transfer a discrete function to a space on a refinement of its mesh.

    Child nodes are evaluated in the parent's reference coordinates.  Re-fitted
    boundary maps make the meshes only approximately nested, so the transfer
    is exact on the interior and a close approximation next to the circle;
    it is meant for warm starts.  Returns raw coefficients on ``new``.
    """
    mesh = new.mesh
    if mesh.parent is None or old.p != new.p:
        raise ValueError("new space must live on a direct refinement with the same degree")
    c = np.asarray(coeffs, dtype=float)
    if c.size == old.n_dofs and c.size != old.n_raw:
        c = old.expand(c)
    t = gauss_lobatto_nodes(new.p)
    Tx, Ty = np.meshgrid(t, t, indexing="xy")
    ref = np.column_stack([Tx.ravel(), Ty.ravel()])
    local = np.empty(new.l2g.shape)
    same = mesh.child < 0
    local[same] = c[old.l2g[mesh.parent[same]]]
    for k in range(4):
        sel = np.flatnonzero(mesh.child == k)
        if sel.size:
            val, _ = reference_tables(new.p, 0.5 * ref + CHILD_OFFSETS[k])
            local[sel] = c[old.l2g[mesh.parent[sel]]] @ val.T
    raw = np.zeros(new.n_raw)
    raw[new.l2g] = local
    return new.P @ raw[new.indep_raw]


def export_triplets(K: sp.spmatrix, fh) -> None:
    """Write ``row col value`` lines (0-based, full precision)."""
    C = sp.coo_matrix(K)
    order = np.lexsort((C.col, C.row))
    for i, j, v in zip(C.row[order], C.col[order], C.data[order]):
        fh.write(f"{i} {j} {v:.17g}\n")
