"""Gauss-Legendre rules on [-1, 1] and their tensor products on [-1, 1]^2.

Besides the rules themselves this module carries the diagnostics used to
judge a rule for a tensor polynomial space Q_p: the admissibility rank test
(the gradient at the quadrature points determines a polynomial up to a
constant) and the norm-equivalence constants between the discrete
quadrature (semi)norms and the exact ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QuadRule1D",
    "TensorQuadRule",
    "QuadEquivalenceReport",
    "legendre",
    "gauss_legendre",
    "gauss_lobatto_nodes",
    "lagrange_1d",
    "tensor_rule",
    "legendre_tensor_basis",
    "check_admissibility",
    "estimate_equivalence_constants",
    "cauchy_schwarz_gap",
]

_NEWTON_TOL = 1e-15
_NEWTON_MAXIT = 100


def legendre(x, n):
    """Return ``(P_n(x), P_n'(x))`` by the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    p0 = np.ones_like(x)
    if n == 0:
        return p0, np.zeros_like(x)
    p1 = x.copy()
    for k in range(2, n + 1):
        p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
    # derivative from (x^2 - 1) P_n' = n (x P_n - P_{n-1}); valid off +-1
    with np.errstate(divide="ignore", invalid="ignore"):
        dp = n * (x * p1 - p0) / (x * x - 1.0)
    ends = np.isclose(np.abs(x), 1.0, rtol=0.0, atol=1e-300)
    if np.any(ends):
        dp = np.where(ends, np.sign(x) ** (n + 1) * n * (n + 1) / 2.0, dp)
    return p1, dp


@dataclass(frozen=True)
class QuadRule1D:
    """q-point Gauss-Legendre rule on [-1, 1]; exact up to degree 2q - 1."""

    q: int
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def order(self) -> int:
        return 2 * self.q

    def integrate(self, f) -> float:
        return float(np.dot(self.weights, f(self.nodes)))


def gauss_legendre(q: int) -> QuadRule1D:
    """Gauss-Legendre rule with ``q`` points, symmetrised to the last bit."""
    if int(q) != q or q < 1:
        raise ValueError(f"number of quadrature points must be >= 1, got {q!r}")
    q = int(q)
    x, w = np.polynomial.legendre.leggauss(q)
    x = 0.5 * (x - x[::-1])
    if q % 2:
        x[q // 2] = 0.0
    w = 0.5 * (w + w[::-1])
    return QuadRule1D(q, x, w)


def gauss_lobatto_nodes(p: int) -> np.ndarray:
    """The p + 1 Gauss-Lobatto points on [-1, 1] (endpoints and roots of P_p')."""
    if p < 1:
        raise ValueError("degree must be >= 1")
    if p == 1:
        return np.array([-1.0, 1.0])
    x = -np.cos(np.pi * np.arange(1, p) / p)
    for _ in range(_NEWTON_MAXIT):
        pn, dp = legendre(x, p)
        d2p = (2.0 * x * dp - p * (p + 1) * pn) / (1.0 - x * x)
        dx = dp / d2p
        x = x - dx
        if np.max(np.abs(dx)) <= _NEWTON_TOL:
            break
    x = np.concatenate([[-1.0], np.sort(x), [1.0]])
    x = 0.5 * (x - x[::-1])
    if p % 2 == 0:
        x[p // 2] = 0.0
    return x


def lagrange_1d(nodes, x):
    """Lagrange cardinal functions on ``nodes`` and their derivatives at ``x``.

    Returns two arrays of shape (len(x), len(nodes)).
    """
    t = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = t.size
    diff = x[:, None] - t[None, :]
    val = np.ones((x.size, n))
    der = np.zeros((x.size, n))
    for i in range(n):
        others = [k for k in range(n) if k != i]
        denom = np.prod(t[i] - t[others])
        val[:, i] = np.prod(diff[:, others], axis=1) / denom
        for m in others:
            rest = [k for k in others if k != m]
            der[:, i] += np.prod(diff[:, rest], axis=1) / denom
    return val, der


@dataclass(frozen=True)
class TensorQuadRule:
    """q x q tensor Gauss rule on the reference square [-1, 1]^2.

    ``points`` has shape (q*q, 2) with the first coordinate running fastest.
    """

    base: QuadRule1D
    points: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def q(self) -> int:
        return self.base.q

    @property
    def order(self) -> int:
        return self.base.order

    @property
    def npoints(self) -> int:
        return self.weights.size

    def integrate(self, values) -> float:
        """Apply the rule to point values (last axis runs over the points)."""
        return np.tensordot(np.asarray(values), self.weights, axes=([-1], [0]))


def tensor_rule(q: int) -> TensorQuadRule:
    base = gauss_legendre(q)
    X, Y = np.meshgrid(base.nodes, base.nodes, indexing="xy")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    w = np.outer(base.weights, base.weights).ravel()
    return TensorQuadRule(base, pts, w)


def legendre_tensor_basis(p: int, points):
    """Values and gradients of P_a(x) P_b(y), 0 <= a, b <= p, at ``points``.

    Returns ``(val, grad)`` of shapes (npts, nb) and (npts, 2, nb) with the
    basis index ``a + (p + 1) * b``.
    """
    pts = np.atleast_2d(points)
    n = p + 1
    vx = np.empty((pts.shape[0], n))
    dx = np.empty_like(vx)
    vy = np.empty_like(vx)
    dy = np.empty_like(vx)
    for k in range(n):
        vx[:, k], dx[:, k] = legendre(pts[:, 0], k)
        vy[:, k], dy[:, k] = legendre(pts[:, 1], k)
    val = (vx[:, :, None] * vy[:, None, :]).transpose(0, 2, 1).reshape(len(pts), -1)
    gx = (dx[:, :, None] * vy[:, None, :]).transpose(0, 2, 1).reshape(len(pts), -1)
    gy = (vx[:, :, None] * dy[:, None, :]).transpose(0, 2, 1).reshape(len(pts), -1)
    return val, np.stack([gx, gy], axis=1)


def _gradient_evaluation_matrix(p, rule):
    _, grad = legendre_tensor_basis(p, rule.points)
    return grad.reshape(-1, (p + 1) ** 2)


def check_admissibility(p: int, rule: TensorQuadRule) -> bool:
    """True iff grad v = 0 at every quadrature point forces v constant on Q_p."""
    G = _gradient_evaluation_matrix(p, rule)
    s = np.linalg.svd(G, compute_uv=False)
    rank = int(np.sum(s > s[0] * 1e-11)) if s.size and s[0] > 0 else 0
    return rank == (p + 1) ** 2 - 1


@dataclass(frozen=True)
class QuadEquivalenceReport:
    p: int
    q: int
    c_p: float
    d_p: float
    admissible: bool
    enough_points: bool  # q^2 >= dim Q_p


def _gram_pair(p, rule, exact):
    val_q, grad_q = legendre_tensor_basis(p, rule.points)
    val_e, grad_e = legendre_tensor_basis(p, exact.points)
    w, we = rule.weights, exact.weights
    Hq = np.einsum("k,kdi,kdj->ij", w, grad_q, grad_q)
    He = np.einsum("k,kdi,kdj->ij", we, grad_e, grad_e)
    Mq = np.einsum("k,ki,kj->ij", w, val_q, val_q)
    Me = np.einsum("k,ki,kj->ij", we, val_e, val_e)
    return Hq, He, Mq, Me


def _extreme_ratios(Sq, Se):
    from scipy.linalg import eigh

    mu = eigh(Sq, Se, eigvals_only=True)
    return mu[0], mu[-1]


def estimate_equivalence_constants(p: int, rule: TensorQuadRule) -> QuadEquivalenceReport:
    """Sharp constants c_p, d_p relating quadrature and exact (semi)norms on Q_p.

    c_p bounds Q(|grad v|^2) against |v|_{H^1}^2 on Q_p / R, d_p bounds
    Q(v^2) against ||v||_{L^2}^2 on Q_p.  Each is the larger of the extreme
    generalized eigenvalue and its reciprocal, and ``inf`` when the discrete
    quantity is only a seminorm (c_p is ``inf`` for every inadmissible rule).
    """
    admissible = check_admissibility(p, rule)
    enough = rule.npoints >= (p + 1) ** 2
    Hq, He, Mq, Me = _gram_pair(p, rule, tensor_rule(p + 2))
    keep = np.arange(1, (p + 1) ** 2)  # drop the constant P_0 P_0
    c_p = np.inf
    if admissible:
        lo, hi = _extreme_ratios(Hq[np.ix_(keep, keep)], He[np.ix_(keep, keep)])
        c_p = max(hi, 1.0 / lo)
    lo, hi = _extreme_ratios(Mq, Me)
    d_p = max(hi, 1.0 / lo) if lo > 1e-12 * hi else np.inf
    return QuadEquivalenceReport(p, rule.q, float(c_p), float(d_p), admissible, enough)


def cauchy_schwarz_gap(rule: TensorQuadRule, f_vals, g_vals) -> float:
    """sqrt(Q|f|^2) sqrt(Q|g|^2) - Q(f.g) for vector fields sampled at the points.

    ``f_vals`` and ``g_vals`` have shape (k, npoints).  The result is >= 0 up
    to rounding for any rule with positive weights.
    """
    f = np.atleast_2d(f_vals)
    g = np.atleast_2d(g_vals)
    w = rule.weights
    inner = np.sum(w * np.sum(f * g, axis=0))
    nf = np.sqrt(np.sum(w * np.sum(f * f, axis=0)))
    ng = np.sqrt(np.sum(w * np.sum(g * g, axis=0)))
    return float(nf * ng - inner)
