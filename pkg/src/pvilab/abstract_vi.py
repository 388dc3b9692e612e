"""Finite-dimensional variational inequalities and their a priori bounds.

The abstract spaces are Euclidean: V = R^n with the Euclidean norm, which
also serves as the dual norm.  ``K = {v : v_i >= psi_i for constrained i}``.
Everything here is dense linear algebra; instances are small (n <= ~50).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PreconditionError",
    "SolverFailure",
    "DenseVIInstance",
    "PerturbedPair",
    "ConstrainedVIInstance",
    "BoundReport",
    "solve_dense_vi",
    "solve_saddle_vi",
    "strang_falk_rhs",
    "corollary_pert_rhs",
    "condense",
    "galerkin_condense",
    "galerkin_inverse",
    "constrained_constants",
    "verify_constrained_bound",
    "random_instance",
    "random_pair",
    "random_constrained_instance",
    "run_abstract_suite",
    "run_constrained_suite",
    "write_matrices",
    "read_matrices",
    "write_reports",
]

TOL_REL = 1e-10
TOL_ABS = 1e-24


class PreconditionError(ValueError):
    """Input violates a documented precondition."""


class SolverFailure(RuntimeError):
    def __init__(self, msg, u=None):
        super().__init__(msg)
        self.u = u


def ellipticity(A) -> float:
    """Smallest eigenvalue of the symmetric part."""
    A = np.asarray(A, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])


def continuity(A) -> float:
    """Largest singular value."""
    return float(np.linalg.norm(np.asarray(A, dtype=float), 2))


@dataclass
class DenseVIInstance:
    A: np.ndarray
    ell: np.ndarray
    psi: np.ndarray
    constrained: np.ndarray | None = None  # boolean mask; None means all

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.ell = np.atleast_1d(np.asarray(self.ell, dtype=float))
        self.psi = np.atleast_1d(np.asarray(self.psi, dtype=float))
        n = self.ell.size
        if self.A.shape != (n, n) or self.psi.size != n:
            raise PreconditionError("inconsistent dimensions")
        if self.constrained is None:
            self.constrained = np.ones(n, dtype=bool)
        else:
            c = np.asarray(self.constrained)
            if c.dtype != bool:
                mask = np.zeros(n, dtype=bool)
                mask[c.astype(np.int64)] = True
                c = mask
            self.constrained = c

    @property
    def n(self) -> int:
        return self.ell.size

    @property
    def alpha(self) -> float:
        return ellipticity(self.A)

    @property
    def c(self) -> float:
        return continuity(self.A)

    def lower(self) -> np.ndarray:
        """Bounds with -inf on unconstrained components."""
        return np.where(self.constrained, self.psi, -np.inf)

    def project(self, v) -> np.ndarray:
        """Euclidean projection onto K."""
        return np.maximum(v, self.lower())

    def contains(self, v, tol=0.0) -> bool:
        return bool(np.all(np.asarray(v)[self.constrained] >= self.psi[self.constrained] - tol))


@dataclass
class PerturbedPair:
    base: DenseVIInstance
    A_tilde: np.ndarray
    ell_tilde: np.ndarray
    psi_tilde: np.ndarray
    alpha_tilde: float = field(init=False)

    def __post_init__(self):
        self.A_tilde = np.asarray(self.A_tilde, dtype=float)
        self.ell_tilde = np.asarray(self.ell_tilde, dtype=float)
        self.psi_tilde = np.asarray(self.psi_tilde, dtype=float)
        self.alpha_tilde = ellipticity(self.A_tilde)
        if not self.alpha_tilde > 0.0:
            raise PreconditionError(f"perturbed operator is not elliptic (alpha~ = {self.alpha_tilde:.3e})")

    @property
    def perturbed(self) -> DenseVIInstance:
        return DenseVIInstance(self.A_tilde, self.ell_tilde, self.psi_tilde, self.base.constrained)

    @property
    def discrete(self) -> DenseVIInstance:
        """The exact operator and load on the perturbed set K~ (problem for u*)."""
        return DenseVIInstance(self.base.A, self.base.ell, self.psi_tilde, self.base.constrained)


@dataclass
class BoundReport:
    lhs: float
    rhs: float
    tol_rel: float = TOL_REL
    constants: dict = field(default_factory=dict)
    # squared norms of exact zeros come out at ~1e-30; without a floor a
    # right-hand side of exactly 0 would fail on rounding alone
    tol_abs: float = TOL_ABS

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.margin >= -(self.tol_rel * abs(self.rhs) + self.tol_abs)


# -- solver ----------------------------------------------------------------


def solve_dense_vi(inst: DenseVIInstance, tol: float = 1e-12, max_iter: int = 500):
    """Solve the box-constrained VI by primal-dual active sets.

    Returns ``(u, lam, active)`` with ``lam = A u - ell`` on active
    components (zero elsewhere) and ``active`` an index array.  Full active
    set updates are tried first; on a cycle the iteration falls back to
    single least-index flips, which terminate because A is a P-matrix.
    """
    if tol <= 0:
        raise PreconditionError("tol must be positive")
    if not inst.alpha > 0.0:
        raise PreconditionError("A is not elliptic on R^n")
    A, ell, psi, cons = inst.A, inst.ell, inst.psi, inst.constrained
    n = inst.n
    scale = max(1.0, np.abs(ell).max(initial=0.0), np.abs(psi[cons]).max(initial=0.0))
    u = np.linalg.solve(A, ell)
    active = cons & (u < psi)
    seen = set()
    single = False
    for _ in range(max_iter):
        u = np.empty(n)
        u[active] = psi[active]
        F = ~active
        if F.any():
            u[F] = np.linalg.solve(A[np.ix_(F, F)], ell[F] - A[np.ix_(F, active)] @ psi[active])
        lam = A @ u - ell
        lam[~active] = 0.0
        if not single:
            new = cons & (lam + (psi - u) > 0.0)
            if np.array_equal(new, active):
                break
            seen.add(active.tobytes())
            if new.tobytes() not in seen:
                active = new
                continue
            single = True
        bad = np.flatnonzero((active & (lam < -tol * scale)) | (cons & ~active & (u < psi - tol * scale)))
        if bad.size == 0:
            break
        active = active.copy()
        active[bad[0]] = not active[bad[0]]
    else:
        raise SolverFailure(f"no convergence in {max_iter} iterations", u)
    lam = np.where(active, A @ u - ell, 0.0)
    return u, lam, np.flatnonzero(active)


def _check_membership(inst, v, name, tol=1e-12):
    if not inst.contains(v, tol * max(1.0, np.abs(inst.psi).max(initial=0.0))):
        raise PreconditionError(f"{name} is not in the admissible set")


# -- bounds ----------------------------------------------------------------


def strang_falk_rhs(pair: PerturbedPair, u, u_tilde, v, v_tilde) -> float:
    """Right-hand side of the combined Strang/Falk estimate for |u - u~|^2."""
    base = pair.base
    _check_membership(base, v, "v")
    _check_membership(pair.perturbed, v_tilde, "v~")
    c, at = base.c, pair.alpha_tilde
    A, At = base.A, pair.A_tilde
    r = A @ u - base.ell
    cons = (A - At) @ v_tilde - (base.ell - pair.ell_tilde)
    return float((2 + 4 * c ** 2 / at ** 2) * np.sum((u - v_tilde) ** 2)
                 + 4 / at * r @ (v_tilde - u + v - u_tilde)
                 + 4 / at ** 2 * cons @ cons)


def corollary_pert_rhs(pair: PerturbedPair, u, u_star, u_tilde, v, v_tilde) -> float:
    """Bound for |u - u~|^2 through the intermediate solution u* on K~.

    ``u_tilde`` only enters through the left-hand side; it is accepted so the
    signature mirrors :func:`strang_falk_rhs`.
    """
    base = pair.base
    _check_membership(base, v, "v")
    _check_membership(pair.perturbed, v_tilde, "v~")
    c, a, at = base.c, base.alpha, pair.alpha_tilde
    A, At = base.A, pair.A_tilde
    r = A @ u - base.ell
    cons = (A - At) @ u_star - (base.ell - pair.ell_tilde)
    return float((4 + 8 * c ** 2 / a ** 2) * np.sum((u - v_tilde) ** 2)
                 + 8 / a * r @ (v_tilde - u + v - u_star)
                 + 8 / at ** 2 * cons @ cons)


# -- equality-constrained problems ----------------------------------------


@dataclass
class ConstrainedVIInstance:
    """u >= psi with D u + B^T lam >= f (VI) and B u - C lam = g."""

    D: np.ndarray
    B: np.ndarray
    C: np.ndarray
    f: np.ndarray
    g: np.ndarray
    psi: np.ndarray
    subspace_basis: np.ndarray  # (m, k)

    def __post_init__(self):
        for name in ("D", "B", "C", "f", "g", "psi", "subspace_basis"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n, m = self.D.shape[0], self.C.shape[0]
        if self.B.shape != (m, n):
            raise PreconditionError("B must be m x n")
        if self.subspace_basis.ndim != 2 or self.subspace_basis.shape[0] != m:
            self.subspace_basis = self.subspace_basis.reshape(m, -1)

    @property
    def n(self) -> int:
        return self.D.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]


def constrained_constants(inst: ConstrainedVIInstance) -> dict:
    """Continuity/ellipticity constants and C0..C3 of the combined bound."""
    cD, cB, cC = continuity(inst.D), continuity(inst.B), continuity(inst.C)
    cBT = continuity(inst.B.T)
    aD, aC = ellipticity(inst.D), ellipticity(inst.C)
    C0 = 2 + 4 * (cD * aC + cB ** 2) ** 2 / (aC * aD) ** 2 + 2 * (cBT * aC + cB) / aC
    k = 1 + 2 * cB / aC
    return dict(c_D=cD, c_B=cB, c_C=cC, c_BT=cBT, alpha_D=aD, alpha_C=aC, C0=C0,
                C1=k * C0, C2=k * (2 + (2 * cC + cBT * cC) / aC), C3=k * 4 / aD ** 2)


def _spd_solve(C, rhs):
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise PreconditionError("C is not symmetric positive definite") from exc
    return np.linalg.solve(L.T, np.linalg.solve(L, rhs))


def condense(inst: ConstrainedVIInstance) -> DenseVIInstance:
    """A = D + B^T C^-1 B, ell = f + B^T C^-1 g."""
    CiB = _spd_solve(inst.C, inst.B)
    Cig = _spd_solve(inst.C, inst.g)
    return DenseVIInstance(inst.D + inst.B.T @ CiB, inst.f + inst.B.T @ Cig, inst.psi)


def galerkin_inverse(C, P) -> np.ndarray:
    """Matrix of C~^-1 = P (P^T C P)^-1 P^T (zero for an empty basis)."""
    P = np.asarray(P, dtype=float)
    m = C.shape[0]
    if P.size == 0:
        return np.zeros((m, m))
    if np.linalg.matrix_rank(P) < P.shape[1]:
        raise PreconditionError("subspace basis is rank deficient")
    return P @ _spd_solve(P.T @ C @ P, P.T)


def galerkin_condense(inst: ConstrainedVIInstance) -> PerturbedPair:
    """Pair of the exactly and the Galerkin-condensed problems."""
    base = condense(inst)
    Ct = galerkin_inverse(inst.C, inst.subspace_basis)
    At = inst.D + inst.B.T @ Ct @ inst.B
    lt = inst.f + inst.B.T @ Ct @ inst.g
    return PerturbedPair(base, At, lt, inst.psi.copy())


def recover_multiplier(inst: ConstrainedVIInstance, u, Cinv=None) -> np.ndarray:
    r = inst.B @ u - inst.g
    return _spd_solve(inst.C, r) if Cinv is None else Cinv @ r


def solve_saddle_vi(inst: ConstrainedVIInstance, tol: float = 1e-12, max_iter: int = 500, P=None):
    """Active set iteration on the symmetric indefinite block system.

    Works on (u, lam) directly without forming C^-1; with a basis ``P`` the
    multiplier is sought in span(P).  Returns ``(u, lam)``.
    """
    n, m = inst.n, inst.m
    Pm = np.eye(m) if P is None else np.asarray(P, dtype=float).reshape(m, -1)
    k = Pm.shape[1]
    M = np.block([[inst.D, inst.B.T @ Pm], [Pm.T @ inst.B, -Pm.T @ inst.C @ Pm]])
    rhs = np.concatenate([inst.f, Pm.T @ inst.g])
    psi = inst.psi
    scale = max(1.0, np.abs(rhs).max(initial=0.0), np.abs(psi).max(initial=0.0))

    def solve(active):
        free = np.concatenate([~active, np.ones(k, dtype=bool)])
        x = np.zeros(n + k)
        x[:n][active] = psi[active]
        x[free] = np.linalg.solve(M[np.ix_(free, free)], rhs[free] - M[np.ix_(free, ~free)] @ x[~free])
        return x

    x = solve(np.zeros(n, dtype=bool))
    active = x[:n] < psi
    seen, single = set(), False
    for _ in range(max_iter):
        x = solve(active)
        u = x[:n]
        mult = np.where(active, (M @ x - rhs)[:n], 0.0)
        if not single:
            new = mult + (psi - u) > 0.0
            if np.array_equal(new, active):
                break
            seen.add(active.tobytes())
            if new.tobytes() not in seen:
                active = new
                continue
            single = True
        bad = np.flatnonzero((active & (mult < -tol * scale)) | (~active & (u < psi - tol * scale)))
        if bad.size == 0:
            break
        active = active.copy()
        active[bad[0]] = not active[bad[0]]
    else:
        raise SolverFailure(f"no convergence in {max_iter} iterations", x[:n])
    return x[:n], Pm @ x[n:]


def verify_constrained_bound(inst: ConstrainedVIInstance, trials: int = 10, rng=None):
    """Check the combined estimate for the Galerkin-condensed problem.

    Report 0 uses best approximations: v~ = u projected onto K~ (= K here),
    v = u~ projected onto K and mu~ the orthogonal projection of lambda onto
    span(P).  Further reports use random admissible v, v~ and random mu~.
    """
    rng = np.random.default_rng(rng)
    consts = constrained_constants(inst)
    base = condense(inst)
    u, _, _ = solve_dense_vi(base)
    lam = recover_multiplier(inst, u)
    Ct = galerkin_inverse(inst.C, inst.subspace_basis)
    pair = galerkin_condense(inst)
    ut, _, _ = solve_dense_vi(pair.perturbed)
    lt = Ct @ (inst.B @ ut - inst.g)
    lhs = float(np.sum((u - ut) ** 2) + np.sum((lam - lt) ** 2))
    P = inst.subspace_basis
    if P.size:
        Q, _ = np.linalg.qr(P)
        mu_best = Q @ (Q.T @ lam)
    else:
        mu_best = np.zeros(inst.m)
    r = inst.D @ u + inst.B.T @ lam - inst.f
    reports = []
    for t in range(max(int(trials), 1)):
        if t == 0:
            vt, v, mu = base.project(u), base.project(ut), mu_best
        else:
            vt = inst.psi + np.abs(rng.standard_normal(inst.n)) * rng.uniform(0, 1)
            v = inst.psi + np.abs(rng.standard_normal(inst.n)) * rng.uniform(0, 1)
            mu = P @ rng.standard_normal(P.shape[1]) if P.size else np.zeros(inst.m)
        rhs = (consts["C1"] * np.sum((u - vt) ** 2) + consts["C2"] * np.sum((lam - mu) ** 2)
               + consts["C3"] * r @ (vt - u + v - ut))
        reports.append(BoundReport(lhs=lhs, rhs=float(rhs), constants=consts))
    return reports


# -- random instances ------------------------------------------------------


def random_instance(rng, n: int, alpha: float = 0.1, constrained_fraction: float = 1.0) -> DenseVIInstance:
    """A = M^T M + alpha I with standard normal M; about half the bounds bite."""
    M = rng.standard_normal((n, n))
    A = M.T @ M + alpha * np.eye(n)
    ell = rng.standard_normal(n)
    u_free = np.linalg.solve(A, ell)
    psi = u_free + rng.standard_normal(n) * (np.abs(u_free).mean() + 1.0)
    cons = rng.random(n) < constrained_fraction
    return DenseVIInstance(A, ell, psi, cons)


def random_pair(rng, n: int, eps: float) -> PerturbedPair:
    """Perturb A by eps E (spectral norm 1), the load and the bounds by eps."""
    base = random_instance(rng, n, constrained_fraction=rng.uniform(0.5, 1.0))
    while True:
        E = rng.standard_normal((n, n))
        E /= np.linalg.norm(E, 2)
        try:
            return PerturbedPair(base, base.A + eps * E, base.ell + eps * rng.standard_normal(n),
                                 base.psi + eps * rng.standard_normal(n))
        except PreconditionError:
            continue


def random_constrained_instance(rng, n: int, m: int, k: int | None = None,
                                alpha: float = 0.1) -> ConstrainedVIInstance:
    M = rng.standard_normal((n, n))
    N = rng.standard_normal((m, m))
    D = M.T @ M + alpha * np.eye(n)
    C = N.T @ N + alpha * np.eye(m)
    B = rng.standard_normal((m, n))
    f = rng.standard_normal(n)
    g = rng.standard_normal(m)
    u0 = np.linalg.solve(D + B.T @ np.linalg.solve(C, B), f + B.T @ np.linalg.solve(C, g))
    psi = u0 + rng.standard_normal(n) * (np.abs(u0).mean() + 1.0)
    k = m // 2 if k is None else k
    return ConstrainedVIInstance(D, B, C, f, g, psi, rng.standard_normal((m, k)))


# -- suites ----------------------------------------------------------------


def _samples(rng, inst, count):
    lo = inst.lower()
    out = []
    for _ in range(count):
        v = rng.standard_normal(inst.n) * rng.uniform(0.1, 3.0)
        out.append(np.where(np.isfinite(lo), lo + np.abs(v), v))
    return out


def run_abstract_suite(trials: int = 1000, seed: int = 7, samples: int = 10, max_dim: int = 20):
    """Randomized checks of the combined estimate, the corollary and Lipschitz
    dependence.  Returns a dict of report lists keyed by check name."""
    rng = np.random.default_rng(seed)
    out = {"strang_falk": [], "corollary": [], "lipschitz": []}
    for t in range(trials):
        n = int(rng.integers(1, max_dim + 1))
        eps = (1e-1, 1e-3)[t % 2]
        pair = random_pair(rng, n, eps)
        base, pert, disc = pair.base, pair.perturbed, pair.discrete
        u, _, _ = solve_dense_vi(base)
        ut, _, _ = solve_dense_vi(pert)
        us, _, _ = solve_dense_vi(disc)
        lhs = float(np.sum((u - ut) ** 2))
        pairs = [(base.project(ut), pert.project(u))]
        pairs += list(zip(_samples(rng, base, samples), _samples(rng, pert, samples)))
        for v, vt in pairs:
            out["strang_falk"].append(BoundReport(lhs, strang_falk_rhs(pair, u, ut, v, vt)))
            out["corollary"].append(BoundReport(lhs, corollary_pert_rhs(pair, u, us, ut, v, vt)))
        ell2 = base.ell + rng.standard_normal(n) * rng.uniform(1e-3, 1.0)
        u2, _, _ = solve_dense_vi(DenseVIInstance(base.A, ell2, base.psi, base.constrained))
        out["lipschitz"].append(BoundReport(float(np.linalg.norm(u - u2)),
                                            2.0 / base.alpha * float(np.linalg.norm(base.ell - ell2))))
    return out


def run_constrained_suite(trials: int = 100, seed: int = 7, samples: int = 10, max_dim: int = 12):
    """Randomized checks for condensation and the combined constrained bound.

    Returns a dict with per-trial scalars: saddle/condensed disagreement,
    condensed ellipticity margin, Galerkin inverse semi-definiteness and norm
    margin, and the list of bound reports.
    """
    rng = np.random.default_rng(seed)
    out = {"agreement": [], "ellipticity": [], "psd": [], "norm": [], "bound": []}
    for _ in range(trials):
        n = int(rng.integers(2, max_dim + 1))
        m = int(rng.integers(2, max_dim + 1))
        inst = random_constrained_instance(rng, n, m)
        consts = constrained_constants(inst)
        base = condense(inst)
        u, _, _ = solve_dense_vi(base)
        lam = recover_multiplier(inst, u)
        us, ls = solve_saddle_vi(inst)
        out["agreement"].append(max(np.abs(u - us).max(), np.abs(lam - ls).max()))
        out["ellipticity"].append(base.alpha - consts["alpha_D"])
        Ct = galerkin_inverse(inst.C, inst.subspace_basis)
        out["psd"].append(float(np.linalg.eigvalsh(0.5 * (Ct + Ct.T))[0]))
        out["norm"].append(1.0 / consts["alpha_C"] - continuity(Ct))
        out["bound"].extend(verify_constrained_bound(inst, samples, rng))
    return out


# -- text formats ----------------------------------------------------------


def write_matrices(path, *arrays) -> None:
    """Blocks of a header line "rows cols" followed by rows in %.17g."""
    with open(path, "w") as fh:
        for a in arrays:
            a = np.atleast_2d(np.asarray(a, dtype=float))
            fh.write(f"{a.shape[0]} {a.shape[1]}\n")
            for row in a:
                fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def read_matrices(path) -> list:
    out = []
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    i = 0
    while i < len(lines):
        r, c = (int(x) for x in lines[i].split())
        block = np.array([[float(x) for x in lines[i + 1 + k].split()] for k in range(r)]).reshape(r, c)
        out.append(block)
        i += 1 + r
    return out


def write_reports(path, reports) -> Path:
    """CSV with columns trial,lhs,rhs,margin,holds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("trial", "lhs", "rhs", "margin", "holds"))
        for i, r in enumerate(reports):
            w.writerow((i, f"{r.lhs:.17g}", f"{r.rhs:.17g}", f"{r.margin:.17g}", int(r.holds)))
    return path
