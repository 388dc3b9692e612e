import numpy as np
import pytest

cvxopt = pytest.importorskip("cvxopt")
from cvxopt import matrix, solvers  # noqa: E402

from pvilab.abstract_vi import (  # noqa: E402
    BoundReport,
    ConstrainedVIInstance,
    DenseVIInstance,
    PerturbedPair,
    PreconditionError,
    condense,
    constrained_constants,
    corollary_pert_rhs,
    galerkin_condense,
    galerkin_inverse,
    random_constrained_instance,
    random_instance,
    random_pair,
    read_matrices,
    recover_multiplier,
    run_abstract_suite,
    run_constrained_suite,
    solve_dense_vi,
    solve_saddle_vi,
    strang_falk_rhs,
    verify_constrained_bound,
    write_matrices,
    write_reports,
)

solvers.options.update(show_progress=False, abstol=1e-13, reltol=1e-13, feastol=1e-13)


def qp_oracle(inst):
    """Interior-point solution of min 1/2 v'Av - l'v subject to the bounds."""
    A = 0.5 * (inst.A + inst.A.T)
    idx = np.flatnonzero(inst.constrained)
    G = np.zeros((max(idx.size, 1), inst.n))
    h = np.zeros(max(idx.size, 1))
    if idx.size:
        G[np.arange(idx.size), idx] = -1.0
        h[:] = -inst.psi[idx]
    else:
        h[:] = 1.0  # harmless 0 <= 1
    sol = solvers.qp(matrix(A), matrix(-inst.ell), matrix(G), matrix(h))
    return np.array(sol["x"]).ravel()


def test_one_dimensional_example():
    # oracle: minimise v^2 - 4v over a fine grid of [3, 10]
    grid = np.linspace(3, 10, 70001)
    v_best = grid[np.argmin(grid**2 - 4 * grid)]
    u, lam, act = solve_dense_vi(DenseVIInstance([[2.0]], [4.0], [3.0]))
    assert u == pytest.approx([v_best], abs=1e-12)
    assert lam == pytest.approx([2.0]) and list(act) == [0]


def test_two_dimensional_example():
    x = np.linspace(2, 5, 301)
    X, Y = np.meshgrid(x, x, indexing="ij")
    E = X**2 + Y**2 - 2 * X - 6 * Y
    i, j = np.unravel_index(np.argmin(E), E.shape)
    u, lam, act = solve_dense_vi(DenseVIInstance(np.diag([2.0, 2.0]), [2.0, 6.0], [2.0, 2.0]))
    assert u == pytest.approx([x[i], x[j]], abs=1e-12)
    assert list(act) == [0]


def test_effectively_unconstrained():
    rng = np.random.default_rng(1)
    inst = random_instance(rng, 6)
    inst.psi[:] = -1e9
    u, lam, act = solve_dense_vi(inst)
    assert np.allclose(u, np.linalg.solve(inst.A, inst.ell), atol=1e-12)
    assert act.size == 0 and np.all(lam == 0)


@pytest.mark.parametrize("seed", range(25))
def test_dense_vi_against_qp_oracle(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, int(rng.integers(1, 21)), constrained_fraction=0.7)
    u, lam, act = solve_dense_vi(inst)
    ref = qp_oracle(inst)
    assert np.abs(u - ref).max() <= 1e-6 * max(1.0, np.abs(ref).max())
    # KKT to rounding
    cons = inst.constrained
    assert np.all(u[cons] >= inst.psi[cons] - 1e-12)
    assert np.all(lam[cons] >= -1e-10)
    assert np.abs((u - inst.psi)[cons] * lam[cons]).max(initial=0) <= 1e-10


def test_solver_preconditions():
    with pytest.raises(PreconditionError):
        solve_dense_vi(DenseVIInstance([[-1.0]], [1.0], [0.0]))
    with pytest.raises(PreconditionError):
        DenseVIInstance(np.eye(2), [1.0], [0.0, 0.0])
    with pytest.raises(PreconditionError):
        PerturbedPair(DenseVIInstance(np.eye(2), [1, 1], [0, 0]), -np.eye(2), [1, 1], [0, 0])


def test_identical_problems_give_zero_bound():
    rng = np.random.default_rng(2)
    base = random_instance(rng, 5)
    pair = PerturbedPair(base, base.A, base.ell, base.psi)
    u, _, _ = solve_dense_vi(base)
    assert strang_falk_rhs(pair, u, u, u, u) == pytest.approx(0.0, abs=1e-20)


def test_load_perturbation_recovers_lipschitz_bound():
    rng = np.random.default_rng(3)
    base = random_instance(rng, 7)
    ell2 = base.ell + 0.1 * rng.standard_normal(7)
    pair = PerturbedPair(base, base.A, ell2, base.psi)
    u, _, _ = solve_dense_vi(base)
    ut, _, _ = solve_dense_vi(pair.perturbed)
    rhs = strang_falk_rhs(pair, u, ut, ut, u)
    alpha = base.alpha
    assert rhs == pytest.approx(4 / alpha**2 * np.sum((base.ell - ell2) ** 2), rel=1e-10)
    assert np.linalg.norm(u - ut) <= 2 / alpha * np.linalg.norm(base.ell - ell2) * (1 + 1e-12)


def test_membership_preconditions():
    rng = np.random.default_rng(4)
    pair = random_pair(rng, 4, 1e-2)
    u, _, _ = solve_dense_vi(pair.base)
    bad = pair.base.psi - 1.0
    with pytest.raises(PreconditionError):
        strang_falk_rhs(pair, u, u, bad, pair.perturbed.project(u))
    with pytest.raises(PreconditionError):
        corollary_pert_rhs(pair, u, u, u, pair.base.project(u), pair.psi_tilde - 1.0)


def test_corollary_without_perturbation():
    rng = np.random.default_rng(5)
    base = random_instance(rng, 6)
    pair = PerturbedPair(base, base.A, base.ell, base.psi)
    u, _, _ = solve_dense_vi(base)
    v = base.project(u + rng.standard_normal(6))
    # third term vanishes when the operator and load are unperturbed
    a, c = base.alpha, base.c
    r = base.A @ u - base.ell
    expected = (4 + 8 * c**2 / a**2) * np.sum((u - v) ** 2) + 8 / a * r @ (v - u + v - u)
    assert corollary_pert_rhs(pair, u, u, u, v, v) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_bounds_hold_on_random_pairs(seed):
    rng = np.random.default_rng(100 + seed)
    pair = random_pair(rng, int(rng.integers(1, 21)), 1e-3)
    u, _, _ = solve_dense_vi(pair.base)
    ut, _, _ = solve_dense_vi(pair.perturbed)
    us, _, _ = solve_dense_vi(pair.discrete)
    lhs = np.sum((u - ut) ** 2)
    for _ in range(10):
        v = pair.base.project(u + rng.standard_normal(u.size))
        vt = pair.perturbed.project(ut + rng.standard_normal(u.size))
        assert BoundReport(lhs, strang_falk_rhs(pair, u, ut, v, vt)).holds
        assert BoundReport(lhs, corollary_pert_rhs(pair, u, us, ut, v, vt)).holds


def test_bound_report_slack():
    assert BoundReport(1.0, 1.0).holds
    assert BoundReport(1.0 + 5e-11, 1.0).holds
    assert not BoundReport(1.0 + 1e-9, 1.0).holds
    assert BoundReport(1.0, 2.0).margin == 1.0


def test_condense_identity_algebra():
    f, g = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    inst = ConstrainedVIInstance(np.eye(2), np.eye(2), np.eye(2), f, g, [-9, -9], np.eye(2))
    base = condense(inst)
    assert np.allclose(base.A, 2 * np.eye(2)) and np.allclose(base.ell, f + g)
    with pytest.raises(PreconditionError):
        condense(ConstrainedVIInstance(np.eye(2), np.eye(2), -np.eye(2), f, g, [0, 0], np.eye(2)))


@pytest.mark.parametrize("seed", range(8))
def test_condensation_properties(seed):
    rng = np.random.default_rng(seed)
    inst = random_constrained_instance(rng, int(rng.integers(2, 13)), int(rng.integers(2, 13)))
    consts = constrained_constants(inst)
    base = condense(inst)
    assert base.alpha >= consts["alpha_D"] - 1e-12
    u, _, _ = solve_dense_vi(base)
    lam = recover_multiplier(inst, u)
    assert np.linalg.norm(inst.B @ u - inst.C @ lam - inst.g) <= 1e-10
    us, ls = solve_saddle_vi(inst)
    assert np.abs(u - us).max() <= 1e-10 and np.abs(lam - ls).max() <= 1e-10
    # the condensed VI agrees with an independent QP solve
    assert np.abs(u - qp_oracle(base)).max() <= 1e-6 * max(1, np.abs(u).max())


def test_galerkin_extremes():
    rng = np.random.default_rng(9)
    inst = random_constrained_instance(rng, 5, 6)
    full = ConstrainedVIInstance(inst.D, inst.B, inst.C, inst.f, inst.g, inst.psi, np.eye(6))
    pair = galerkin_condense(full)
    assert np.abs(pair.A_tilde - condense(inst).A).max() <= 1e-12 * np.abs(pair.A_tilde).max()
    empty = ConstrainedVIInstance(inst.D, inst.B, inst.C, inst.f, inst.g, inst.psi, np.zeros((6, 0)))
    pair = galerkin_condense(empty)
    assert np.allclose(pair.A_tilde, inst.D) and np.allclose(pair.ell_tilde, inst.f)
    with pytest.raises(PreconditionError):
        galerkin_inverse(inst.C, np.ones((6, 2)))


@pytest.mark.parametrize("seed", range(6))
def test_galerkin_inverse_properties(seed):
    rng = np.random.default_rng(seed)
    inst = random_constrained_instance(rng, 6, 8, k=4)
    Ct = galerkin_inverse(inst.C, inst.subspace_basis)
    S = inst.B.T @ Ct @ inst.B
    assert np.linalg.eigvalsh(0.5 * (S + S.T))[0] >= -1e-12
    aC = constrained_constants(inst)["alpha_C"]
    for _ in range(20):
        phi = rng.standard_normal(8)
        assert np.linalg.norm(Ct @ phi) <= np.linalg.norm(phi) / aC + 1e-10
    # the multiplier of the restricted saddle problem lives in span(P)
    us, ls = solve_saddle_vi(inst, P=inst.subspace_basis)
    ut, _, _ = solve_dense_vi(galerkin_condense(inst).perturbed)
    assert np.abs(us - ut).max() <= 1e-9


def test_constrained_bound_full_subspace_is_trivial():
    rng = np.random.default_rng(11)
    inst = random_constrained_instance(rng, 5, 4, k=4)
    inst.subspace_basis = np.eye(4)
    reps = verify_constrained_bound(inst, 5, rng)
    assert reps[0].lhs <= 1e-20 and all(r.holds for r in reps)


def test_constrained_bound_over_subspace_sequence():
    rng = np.random.default_rng(12)
    inst = random_constrained_instance(rng, 6, 8)
    Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    lhs = []
    for k in range(0, 9):
        inst.subspace_basis = Q[:, :k]
        reps = verify_constrained_bound(inst, 3, rng)
        assert all(r.holds for r in reps)
        lhs.append(reps[0].lhs)
    assert lhs[-1] <= 1e-18
    assert lhs[-1] <= lhs[0]


def test_small_suites_are_clean():
    res = run_abstract_suite(trials=40, seed=3)
    assert len(res["strang_falk"]) == 40 * 11 and len(res["lipschitz"]) == 40
    assert all(r.holds for v in res.values() for r in v)
    res = run_constrained_suite(trials=10, seed=3)
    assert max(res["agreement"]) <= 1e-10
    assert min(res["ellipticity"]) >= -1e-10
    assert all(r.holds for r in res["bound"])


def test_suite_is_deterministic():
    a = run_abstract_suite(trials=5, seed=21)
    b = run_abstract_suite(trials=5, seed=21)
    assert [r.rhs for r in a["corollary"]] == [r.rhs for r in b["corollary"]]


def test_text_formats(tmp_path):
    A = np.array([[1.0, 2.5], [np.pi, -1e-300]])
    write_matrices(tmp_path / "m.txt", A, [1.0, 2.0, 3.0])
    back = read_matrices(tmp_path / "m.txt")
    assert np.array_equal(back[0], A) and back[1].shape == (1, 3)
    p = write_reports(tmp_path / "r.csv", [BoundReport(1.0, 2.0), BoundReport(3.0, 2.0)])
    lines = p.read_text().splitlines()
    assert lines[0] == "trial,lhs,rhs,margin,holds"
    assert lines[1].endswith(",1") and lines[2].endswith(",0")
