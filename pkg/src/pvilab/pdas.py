"""Primal-dual active set iteration for lower-bound constrained SPD systems.

Problem: find u with u >= psi, lambda = K u - l >= 0 and
lambda_i (u_i - psi_i) = 0.  Entries of ``psi`` equal to -inf are
unconstrained.  One step fixes u on the active set, solves for the rest and
updates the active set by the complementarity function
``lambda + c (psi - u)``.
"""
from __future__ import annotations

import logging
import sys
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "PdasState",
    "SolverFailure",
    "DefinitenessError",
    "pdas_solve",
    "solve_reduced_system",
    "initial_active_set",
]

log = logging.getLogger(__name__)


class SolverFailure(RuntimeError):
    """Iteration limit reached; ``state`` holds the last iterate."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


class DefinitenessError(np.linalg.LinAlgError):
    """The reduced matrix is not positive definite."""


@dataclass
class PdasState:
    u: np.ndarray
    lam: np.ndarray
    active: np.ndarray  # boolean mask
    iteration: int
    c_param: float = 1.0
    residual: float = field(default=np.nan)
    history: list = field(default_factory=list, repr=False)

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.active)


def _factor(K):
    """Sparse LU with diagonal pivoting; SPD matrices keep positive pivots."""
    K = sp.csc_matrix(K)
    try:
        lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
    except RuntimeError as exc:  # exactly singular
        raise DefinitenessError(str(exc)) from exc
    d = lu.U.diagonal()
    if d.size and (d.min() <= 1e-13 * np.abs(d).max()):
        raise DefinitenessError(f"non-positive pivot {d.min():.3e} (max {np.abs(d).max():.3e})")
    return lu


def solve_reduced_system(K, rhs, fixed=None, fixed_values=None, *, rtol=1e-12):
    """Solve ``K u = rhs`` with ``u[fixed] = fixed_values`` prescribed.

    Only the rows of the free indices are enforced.  Raises
    :class:`DefinitenessError` when the free block is not positive definite.
    """
    K = sp.csr_matrix(K)
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.size
    u = np.zeros(n)
    is_fixed = np.zeros(n, dtype=bool)
    if fixed is not None:
        fixed = np.asarray(fixed)
        is_fixed[fixed] = True
        u[fixed] = fixed_values
    free = np.flatnonzero(~is_fixed)
    if free.size == 0:
        return u
    b = rhs[free] - K[free] @ u if is_fixed.any() else rhs.copy()
    Kff = K[free][:, free]
    lu = _factor(Kff)
    x = lu.solve(b)
    nb = np.linalg.norm(b)
    for _ in range(3):  # iterative refinement up to the target residual
        r = b - Kff @ x
        if np.linalg.norm(r) <= rtol * nb:
            break
        x += lu.solve(r)
    u[free] = x
    return u


def initial_active_set(problem) -> np.ndarray:
    """Nodes where the unconstrained solution violates the obstacle."""
    u0 = solve_reduced_system(problem.K_mat, problem.load)
    return np.isfinite(problem.obstacle) & (u0 < problem.obstacle)


def pdas_solve(problem, tol: float = 1e-10, max_iter: int = 100, active0=None,
               c_param: float = 1.0, verbose: bool = False) -> PdasState:
    """Primal-dual active set solve of a ``DiscreteObstacleProblem``.

    Parameters
    ----------
    problem
        Anything with ``K_mat``, ``load`` and ``obstacle`` attributes.
    tol
        Relative tolerance; multipliers are compared against ``tol * |load|``
        and the primal feasibility against ``tol * max(1, |psi|_inf)``.
    active0
        Boolean mask or index array for the initial active set; the default
        is :func:`initial_active_set`.

    The iteration stops when the active set repeats itself.  If a longer
    cycle appears, the update switches to single least-index flips, which
    terminate for symmetric positive definite matrices.
    """
    K = sp.csr_matrix(problem.K_mat)
    ell = np.asarray(problem.load, dtype=float)
    psi = np.asarray(problem.obstacle, dtype=float)
    n = ell.size
    cons = np.isfinite(psi)
    psi_c = np.where(cons, psi, 0.0)
    lam_tol = tol * max(np.linalg.norm(ell), 1e-300)
    u_tol = tol * max(1.0, np.abs(psi_c).max(initial=0.0))

    if active0 is None:
        active = initial_active_set(problem)
    else:
        a0 = np.asarray(active0)
        if a0.dtype == bool:
            active = a0.copy()
        else:
            active = np.zeros(n, dtype=bool)
            active[a0.astype(np.int64)] = True
        active &= cons

    seen = set()
    single_flip = False
    history = []
    state = None
    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        u = solve_reduced_system(K, ell, idx, psi[idx])
        lam = K @ u - ell
        lam[~active] = 0.0
        res = float(np.abs(lam - np.maximum(0.0, lam + c_param * (psi_c - u)) * cons).max(initial=0.0))
        history.append((it, int(active.sum()), res))
        if verbose:
            print(f"iter {it} {int(active.sum())} {res:.3e}", file=sys.stderr)
        state = PdasState(u=u, lam=lam, active=active.copy(), iteration=it,
                          c_param=c_param, residual=res, history=history)
        if not single_flip:
            new = cons & (lam + c_param * (psi_c - u) > 0.0)
            if np.array_equal(new, active):
                return state
            seen.add(np.packbits(active).tobytes())
            if np.packbits(new).tobytes() not in seen:
                active = new
                continue
            log.info("active set cycle at iteration %d; switching to single flips", it)
            single_flip = True
        bad = np.flatnonzero((active & (lam < -lam_tol)) | (cons & ~active & (u < psi_c - u_tol)))
        if bad.size == 0:
            return state
        active = active.copy()
        active[bad[0]] = not active[bad[0]]
    raise SolverFailure(f"no convergence in {max_iter} iterations", state)
