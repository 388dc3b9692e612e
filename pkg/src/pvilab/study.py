"""Convergence campaigns for the disk obstacle problem with a known solution.

Model problem: -Laplace u = f with f = -2 and u >= psi (a constant) on the disk
of radius 1.5 with zero boundary values.  The contact set is the unit disk.
Each level solves the problem twice: with the q = p + j rule under study and
with the overkill rule q = p + 11, whose solution stands in for the exactly
integrated discrete solution.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import FESpace, assemble, build_space, prolongate, reference_tables
from .mesh import Mesh, build_initial_disk_mesh, eval_maps, refine_adaptive, refine_uniform
from .pdas import DefinitenessError, SolverFailure, pdas_solve
from .quadrature import tensor_rule

__all__ = [
    "ExactRadialSolution",
    "ConvergenceRecord",
    "StudyConfig",
    "UndefinedRate",
    "h1_error",
    "dorfler_mark",
    "run_campaign",
    "eoc",
    "write_records",
    "read_records",
    "write_loglog",
    "REFERENCE_OFFSET",
]

log = logging.getLogger(__name__)

REFERENCE_OFFSET = 11
ROUNDING_FLOOR = 1e-12
MODES = ("h-uniform", "h-adaptive", "p-uniform")
_MODE_TAGS = {"h-uniform": "h", "h-adaptive": "a", "p-uniform": "p"}


class UndefinedRate(ValueError):
    """Fewer than two usable records for a rate fit."""


@dataclass(frozen=True)
class ExactRadialSolution:
    """Radially symmetric solution with contact on the unit disk."""

    R: float = 1.5
    f: float = -2.0
    a: float = 1.0

    @property
    def psi_const(self) -> float:
        return math.log(self.R) - 0.625

    @property
    def kink_radius(self) -> float:
        """Radius of the free boundary, where second derivatives jump."""
        return 1.0

    def psi(self, x):
        return np.full(np.shape(x)[:-1], self.psi_const)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        r2 = np.maximum(np.sum(x * x, axis=-1), 1.0)
        return 0.5 * (r2 - np.log(r2) - 1.0) + self.psi_const

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(r2 > 1.0, 1.0 - 1.0 / r2, 0.0)
        return x * s[..., None]

    def h1_seminorm_squared(self) -> float:
        """2 pi [r^4/4 - r^2 + ln r] between 1 and R."""
        F = lambda r: r ** 4 / 4 - r ** 2 + math.log(r)
        return 2 * math.pi * (F(self.R) - F(1.0))


# -- error integration ----------------------------------------------------


def _cut_cells(nodes, radius, depth, samples=5):
    """Reference subcells (cx, cy, hw) of one element, halved ``depth`` times
    wherever the image may meet the circle |x| = radius."""
    s = np.linspace(-1.0, 1.0, samples)
    S = np.column_stack([np.tile(s, samples), np.repeat(s, samples)])
    cells = np.array([[0.0, 0.0, 1.0]])
    done = []
    for _ in range(depth):
        pts = (cells[:, None, :2] + cells[:, None, 2:3] * S[None]).reshape(-1, 2)
        X, _ = eval_maps(nodes[None], pts)
        X = X[0].reshape(len(cells), -1, 2)
        r = np.hypot(X[..., 0], X[..., 1])
        slack = np.hypot(*(X.max(1) - X.min(1)).T) / (samples - 1)
        cut = (r.min(1) - slack <= radius) & (radius <= r.max(1) + slack)
        done.append(cells[~cut])
        c = cells[cut]
        h2 = 0.5 * c[:, 2:3]
        cells = np.concatenate([np.hstack([c[:, :2] + h2 * np.array(o), h2])
                                for o in ((-1, -1), (1, -1), (-1, 1), (1, 1))])
        if not len(cells):
            break
    return np.concatenate(done + [cells])


def _composite_rule(cells, rule):
    c = np.array(cells)
    pts = (c[:, None, :2] + c[:, None, 2:3] * rule.points[None]).reshape(-1, 2)
    w = ((c[:, 2] ** 2)[:, None] * rule.weights[None]).ravel()
    return pts, w


def _local_coeffs(space, coeffs):
    c = np.asarray(coeffs, dtype=float)
    if c.size == space.n_raw:
        return c
    if c.size == space.n_dofs:
        return space.expand(c)
    raise ValueError(f"coefficient vector of length {c.size} does not fit the space")


def h1_error(space: FESpace, coeffs, reference, q: int | None = None, cut_size: float = 0.02):
    """H^1 seminorm of ``reference - u_h`` with per-element contributions.

    Parameters
    ----------
    space : FESpace
    coeffs : array
        Free or raw coefficients of u_h.
    reference : ExactRadialSolution or array
        Exact solution, or coefficients of another function in ``space``.
    q : int, optional
        Gauss points per direction, default p + 12.
    cut_size : float
        Elements crossed by the free boundary of an exact reference are
        integrated on reference subcells, halved until their physical size
        is about ``cut_size`` (and at least once).

    Returns
    -------
    (float, ndarray)
        Global seminorm and squared element contributions.
    """
    q = space.p + 12 if q is None else int(q)
    rule = tensor_rule(q)
    mesh = space.mesh
    c = _local_coeffs(space, coeffs)
    exact = not isinstance(reference, (np.ndarray, list, tuple))
    if not exact:
        c = _local_coeffs(space, reference) - c
    eta2 = np.zeros(mesh.n_elements)
    _, grad = reference_tables(space.p, rule.points)
    for ids, nodes in mesh.map_groups():
        chunk = max(1, 2_000_000 // (rule.npoints * grad.shape[2]))
        for k in range(0, len(ids), chunk):
            sl = ids[k:k + chunk]
            X, J = eval_maps(nodes[k:k + chunk], rule.points)
            e2 = _sq_grad_error(J, X, grad, c[space.l2g[sl]], rule.weights, reference if exact else None)
            eta2[sl] = e2
    if exact:
        diam = mesh.diameters()
        for e in _crossing_elements(mesh, reference.kink_radius):
            depth = int(np.clip(np.ceil(np.log2(diam[e] / cut_size)), 1, 8))
            cells = _cut_cells(mesh.element_map(e).nodes, reference.kink_radius, depth)
            if len(cells) == 1:
                continue
            pts, w = _composite_rule(cells, rule)
            _, g = reference_tables(space.p, pts)
            X, J = eval_maps(mesh.element_map(e).nodes[None], pts)
            eta2[e] = _sq_grad_error(J, X, g, c[space.l2g[e]][None], w, reference)[0]
    return float(np.sqrt(eta2.sum())), eta2


def _sq_grad_error(J, X, grad, local, weights, exact):
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    gref = np.einsum("qdn,en->eqd", grad, local)
    # physical gradient J^{-T} gref
    gx = (J[..., 1, 1] * gref[..., 0] - J[..., 1, 0] * gref[..., 1]) / det
    gy = (-J[..., 0, 1] * gref[..., 0] + J[..., 0, 0] * gref[..., 1]) / det
    if exact is not None:
        ge = exact.grad(X)
        gx = ge[..., 0] - gx
        gy = ge[..., 1] - gy
    return (gx * gx + gy * gy) * np.abs(det) @ weights


def _crossing_elements(mesh: Mesh, radius: float, samples: int = 9):
    """Elements whose image may meet the circle |x| = radius."""
    s = np.linspace(-1, 1, samples)
    S = np.column_stack([np.tile(s, samples), np.repeat(s, samples)])
    hits = []
    diam = mesh.diameters()
    for ids, nodes in mesh.map_groups():
        for k in range(0, len(ids), 8192):
            X, _ = eval_maps(nodes[k:k + 8192], S)
            r = np.hypot(X[..., 0], X[..., 1])
            tol = diam[ids[k:k + 8192]] / (samples - 1)
            sel = (r.min(1) - tol <= radius) & (radius <= r.max(1) + tol)
            hits.append(ids[k:k + 8192][sel])
    return np.concatenate(hits) if hits else np.zeros(0, dtype=np.int64)


# -- marking and rates -----------------------------------------------------


def dorfler_mark(per_element, theta: float = 0.5) -> np.ndarray:
    """Smallest set of elements carrying a ``theta`` share of sum(eta^2).

    Greedy by decreasing indicator; ties go to the lower element id.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0, 1], got {theta!r}")
    eta2 = np.asarray(per_element, dtype=float)
    total = eta2.sum()
    if total <= 0.0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(eta2.size), -eta2))
    csum = np.cumsum(eta2[order])
    k = int(np.searchsorted(csum, theta * total * (1.0 - 1e-14), side="left")) + 1
    marked = order[:min(k, eta2.size)]
    return np.sort(marked[eta2[marked] > 0.0])


def eoc(records, field: str = "err_total", window: int = 3) -> float:
    """Negative least-squares slope of log(error) against log(N).

    Records flagged as failed or below the rounding floor, and non-positive
    errors, are skipped before the window is taken.
    """
    pts = [(r.N, getattr(r, field)) for r in records
           if not r.failed and not (field == "err_quad" and r.floor)
           and np.isfinite(getattr(r, field)) and getattr(r, field) > 0.0]
    pts = pts[-window:]
    if len(pts) < 2:
        raise UndefinedRate(f"need two usable records for {field}, have {len(pts)}")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    return float(-np.polyfit(x, y, 1)[0])


# -- campaigns -------------------------------------------------------------


@dataclass
class ConvergenceRecord:
    level: int
    N: int
    h: float
    p: int
    q: int
    err_total: float
    err_quad: float
    eoc_total: float = float("nan")
    eoc_quad: float = float("nan")
    floor: bool = False  # err_quad under the rounding floor
    failed: bool = False
    note: str = ""
    per_element: np.ndarray | None = field(default=None, repr=False)


@dataclass
class StudyConfig:
    """One campaign: ``mode``, degree ``p`` (first degree for p-uniform) and
    the quadrature offset ``q_offset`` (q = p + j)."""

    mode: str = "h-uniform"
    p: int = 1
    q_offset: int = REFERENCE_OFFSET
    levels: int = 5
    theta: float = 0.5
    radius: float = 1.5
    max_dofs: int | None = None
    tol: float = 1e-10
    max_iter: int = 100
    out_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.p < 1 or self.levels < 1:
            raise ValueError("p and levels must be positive")

    @property
    def tag(self) -> str:
        return f"{_MODE_TAGS[self.mode]}{self.p}"

    def filename(self, j: int | None = None) -> str:
        return f"{self.tag}_j{self.q_offset if j is None else j}.csv"


def _solve(space, q, exact, tol, max_iter, active0):
    prob = assemble(space, exact.a, exact.f, q, psi=exact.psi)
    return prob, pdas_solve(prob, tol=tol, max_iter=max_iter, active0=active0)


def run_campaign(config: StudyConfig, offsets=None, progress=None) -> dict:
    """Run one campaign for several quadrature offsets on a shared mesh sequence.

    The refinement never depends on the offset (adaptive marking uses the
    exact error of the q = p + 11 solution), so all offsets share the mesh
    sequence and the reference solves.  Returns ``{j: [ConvergenceRecord]}``;
    ``offsets`` defaults to ``[config.q_offset]``.
    """
    offsets = sorted(set([config.q_offset] if offsets is None else offsets))
    exact = ExactRadialSolution(R=config.radius)
    out = {j: [] for j in offsets}
    mesh = refine_uniform(build_initial_disk_mesh(config.radius)) if config.mode == "p-uniform" \
        else build_initial_disk_mesh(config.radius)
    prev = None  # (space, reference solution) of the previous level
    for level in range(config.levels):
        p = config.p + level if config.mode == "p-uniform" else config.p
        t0 = time.perf_counter()
        space = build_space(mesh, p)
        if config.max_dofs is not None and space.n_dofs > config.max_dofs and level > 0:
            break
        warm = None
        if prev is not None and prev[0].p == p:
            up = space.restrict(prolongate(prev[0], space, prev[1]))
            warm = up <= exact.psi_const + 1e-12
        q_ref = p + REFERENCE_OFFSET
        ref_prob, ref = _solve(space, q_ref, exact, config.tol, config.max_iter, warm)
        ref_norm = math.sqrt(max(ref.u @ (ref_prob.K_mat @ ref.u), 0.0))
        err_ref, eta_ref = h1_error(space, ref.u, exact)
        h = space.mesh.h
        for j in offsets:
            q = p + j
            rec = ConvergenceRecord(level=level, N=space.n_dofs, h=h, p=p, q=q,
                                    err_total=float("nan"), err_quad=float("nan"))
            if q == q_ref:
                rec.err_total, rec.per_element, rec.err_quad = err_ref, eta_ref, 0.0
                rec.floor = True
            elif q < 1:
                rec.failed, rec.note = True, "no quadrature points"
            else:
                try:
                    _, st = _solve(space, q, exact, config.tol, config.max_iter, ref.active)
                except (DefinitenessError, SolverFailure) as exc:
                    rec.failed, rec.note = True, f"{type(exc).__name__}: {exc}"
                else:
                    rec.err_total, rec.per_element = h1_error(space, st.u, exact)
                    rec.err_quad = h1_error(space, st.u, ref.u)[0]
                    rec.floor = rec.err_quad < ROUNDING_FLOOR * ref_norm
            recs = out[j]
            recs.append(rec)
            for name in ("total", "quad"):
                try:
                    setattr(rec, f"eoc_{name}", eoc(recs, f"err_{name}"))
                except UndefinedRate:
                    pass
        if progress is not None:
            progress(level, space.n_dofs, err_ref, time.perf_counter() - t0)
        log.info("level %d N=%d err=%.4e (%.1fs)", level, space.n_dofs, err_ref, time.perf_counter() - t0)
        prev = (space, ref.u)
        if level + 1 < config.levels:
            if config.mode == "h-uniform":
                mesh = refine_uniform(mesh)
            elif config.mode == "h-adaptive":
                mesh = refine_adaptive(mesh, dorfler_mark(eta_ref, config.theta))
    if config.out_dir is not None:
        for j, recs in out.items():
            write_records(recs, Path(config.out_dir) / config.filename(j))
    return out


CSV_COLUMNS = ("level", "N", "h", "err_total", "err_quad", "eoc_total", "eoc_quad")


def write_records(records, path) -> Path:
    """CSV with one row per level; floats in ``%.16e``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.level, r.N] + ["%.16e" % v for v in
                                         (r.h, r.err_total, r.err_quad, r.eoc_total, r.eoc_quad)])
    return path


def read_records(path):
    """Rows of a campaign CSV as dicts of numbers."""
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("level", "N") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def write_loglog(records, path) -> Path:
    """log10 (N, error) pairs for convergence plots."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("log10_N", "log10_err_total", "log10_err_quad"))
        for r in records:
            lq = math.log10(r.err_quad) if r.err_quad > 0 and not r.floor else float("nan")
            lt = math.log10(r.err_total) if r.err_total > 0 else float("nan")
            w.writerow(["%.16e" % math.log10(r.N), "%.16e" % lt, "%.16e" % lq])
    return path
