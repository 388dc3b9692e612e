import io

import numpy as np
import pytest
import scipy.sparse as sp

from pvilab.fem import (
    GeometryError,
    assemble,
    build_space,
    evaluate_solution,
    export_triplets,
    prolongate,
    reference_tables,
    spectrum_report,
)
from pvilab.mesh import MapKind, Mesh, build_initial_disk_mesh, refine_adaptive, refine_uniform
from pvilab.quadrature import estimate_equivalence_constants, tensor_rule


def square_mesh(n=1, h=1.0, origin=(0.0, 0.0)):
    """n x n affine squares of side h, no boundary circle (no Dirichlet DOFs)."""
    xs = origin[0] + h * np.arange(n + 1)
    ys = origin[1] + h * np.arange(n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    els = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            els.append((a, a + 1, a + n + 2, a + n + 1))
    ne = len(els)
    return Mesh(R=1.0, vertices=verts, elements=np.array(els, dtype=np.int64),
                kind=np.full(ne, MapKind.LINEAR, dtype=np.int8), level=np.zeros(ne, dtype=np.int64),
                base=np.arange(ne), path=np.zeros((ne, 2), dtype=np.int64), curved={},
                midpoints={}, on_circle=np.zeros(len(verts), dtype=bool))


@pytest.fixture(scope="module")
def disk():
    m0 = build_initial_disk_mesh(1.5)
    return [m0, refine_uniform(m0)]


def test_reference_basis_is_nodal_and_sums_to_one():
    from pvilab.quadrature import gauss_lobatto_nodes
    for p in (1, 2, 4):
        t = gauss_lobatto_nodes(p)
        X, Y = np.meshgrid(t, t, indexing="xy")
        val, grad = reference_tables(p, np.column_stack([X.ravel(), Y.ravel()]))
        assert np.allclose(val, np.eye((p + 1) ** 2), atol=1e-13)
        pts = np.random.default_rng(p).uniform(-1, 1, (9, 2))
        val, grad = reference_tables(p, pts)
        assert np.allclose(val.sum(1), 1.0, atol=1e-13)
        assert np.allclose(grad.sum(2), 0.0, atol=1e-12)


def test_affine_element_stiffness_and_load():
    space = build_space(square_mesh(), 1)
    assert space.n_dofs == 4
    prob = assemble(space, a=1.0, f=-2.0, q=2)
    order = space.mesh.elements[0]  # counter-clockwise from (0, 0)
    oracle = np.array([[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]]) / 6.0
    assert np.abs(prob.K_mat.toarray()[np.ix_(order, order)] - oracle).max() <= 1e-13
    for q in (1, 2, 5):
        assert np.abs(assemble(space, 1.0, -2.0, q).load + 0.5).max() <= 1e-13


def test_geometry_error_on_degenerate_element():
    m = square_mesh()
    m.vertices[2] = m.vertices[0]
    m.vertices[1] = m.vertices[0]
    with pytest.raises(GeometryError):
        assemble(build_space(m, 1), q=2)


def test_bad_arguments():
    space = build_space(square_mesh(), 1)
    with pytest.raises(ValueError):
        assemble(space, q=0)
    with pytest.raises(ValueError):
        build_space(square_mesh(), 0)


def test_p1_dofs_on_initial_mesh(disk):
    m0 = disk[0]
    space = build_space(m0, 1)
    assert space.n_dofs == int(np.sum(~m0.on_circle)) == 17
    # p = 1: the constraint nodes are exactly the interior vertices
    assert np.allclose(np.sort(space.constraint_points, axis=0),
                       np.sort(m0.vertices[~m0.on_circle], axis=0))


def test_dof_growth_under_refinement(disk):
    m = disk[1]
    n = [build_space(m, 2).n_dofs]
    for _ in range(2):
        m = refine_uniform(m)
        n.append(build_space(m, 2).n_dofs)
    ratios = np.array(n[1:]) / np.array(n[:-1])
    assert np.all(ratios > 3.7) and np.all(ratios < 4.3)
    assert abs(ratios[-1] - 4) < abs(ratios[0] - 4)


def test_overkill_saturation_and_symmetry(disk):
    space = build_space(disk[1], 2)
    K13 = assemble(space, q=13).K_mat
    K14 = assemble(space, q=14).K_mat
    d = abs(K13 - K14).max()
    assert d <= 1e-12 * abs(K13).max()
    for q in (1, 2, 3, 13):
        K = assemble(space, q=q).K_mat
        assert abs(K - K.T).max() <= 1e-13 * abs(K).max()


def test_rayleigh_quotient_on_affine_mesh():
    space = build_space(square_mesh(4, 0.5), 2)
    K = assemble(space, q=13).K_mat
    Kq = assemble(space, q=3).K_mat
    z = np.random.default_rng(0).standard_normal(space.n_dofs)
    assert (z @ (Kq @ z)) / (z @ (K @ z)) >= 1.0 - 1e-8


def test_linear_mesh_exact_with_p_plus_one():
    space = build_space(square_mesh(3, 0.25, (-0.3, -0.2)), 3)
    A = assemble(space, 1.0, 3.0, q=4)
    B = assemble(space, 1.0, 3.0, q=14)
    assert abs(A.K_mat - B.K_mat).max() <= 1e-12 * abs(B.K_mat).max()
    assert np.abs(A.load - B.load).max() <= 1e-12 * np.abs(B.load).max()


def test_spectrum_examples(disk):
    space = build_space(disk[1], 2)
    lo1, hi1 = spectrum_report(assemble(space, q=1))
    lo2, hi2 = spectrum_report(assemble(space, q=2))
    lo4, _ = spectrum_report(assemble(space, q=4))
    lo13, hi13 = spectrum_report(assemble(space, q=13))
    assert abs(lo1) <= 1e-10 * hi1
    assert 0 < lo2 < lo13
    assert abs(hi2 - hi13) <= 0.1 * hi13
    assert 0.9 <= lo4 / lo13 <= 1.1


def test_spectrum_lanczos_agrees_with_dense(disk):
    prob = assemble(build_space(disk[1], 2), q=3)
    dense = spectrum_report(prob)
    sparse = spectrum_report(prob, dense_limit=0)
    assert np.allclose(dense, sparse, rtol=1e-8)


@pytest.mark.parametrize("p,q", [(2, 3), (3, 4), (2, 2)])
def test_rayleigh_quotient_against_reference(disk, p, q):
    # On curved elements the integrands are not polynomial, so even an
    # admissible rule with c_p = 1 loses a little; allow one percent.
    space = build_space(disk[1], p)
    Kq = assemble(space, q=q).K_mat
    K = assemble(space, q=p + 11).K_mat
    dp = estimate_equivalence_constants(p, tensor_rule(q)).c_p
    rng = np.random.default_rng(q)
    for _ in range(50):
        z = rng.standard_normal(space.n_dofs)
        r = (z @ (Kq @ z)) / (z @ (K @ z))
        assert r >= 0.99 / dp


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_hanging_constraints_reproduce_polynomials(disk, p):
    m = disk[1]
    centers = np.array([m.vertices[el].mean(axis=0) for el in m.elements])
    m2 = refine_adaptive(m, [int(np.argmin(np.linalg.norm(centers, axis=1)))])
    space = build_space(m2, p)
    assert space.hanging.size > 0
    g = lambda x: x[..., 0] ** p - 0.5 * x[..., 0] * x[..., 1] ** (p - 1) + 0.3
    raw = space.interpolate(g)
    # every raw node, hanging or not, carries the polynomial value
    assert np.abs(raw - g(space.points)).max() <= 1e-12


def test_evaluate_solution(disk):
    space = build_space(disk[0], 2)
    lin = np.flatnonzero(disk[0].kind == MapKind.LINEAR)[0]
    rng = np.random.default_rng(5)
    xh = rng.uniform(-1, 1, (6, 2))
    v, g = evaluate_solution(space, space.interpolate(lambda x: x[..., 0]), lin, xh)
    assert np.allclose(g, [[1.0, 0.0]] * 6, atol=1e-13)
    v, g = evaluate_solution(space, np.zeros(space.n_dofs), lin, xh)
    assert np.all(v == 0) and np.all(g == 0)
    f = lambda x: x[..., 0] * x[..., 1]
    v, _ = evaluate_solution(space, space.interpolate(f), lin, xh)
    X = disk[0].evaluate(xh)[0][lin]
    assert np.abs(v - f(X)).max() <= 1e-13
    with pytest.raises(ValueError):
        evaluate_solution(space, np.zeros(space.n_dofs), lin, [(1.5, 0.0)])


def test_prolongation_exact_on_polynomials(disk):
    old = build_space(disk[1], 2)
    new = build_space(refine_uniform(disk[1]), 2)
    f = lambda x: 1.0 + x[..., 0] ** 2 - x[..., 0] * x[..., 1]
    up = prolongate(old, new, old.interpolate(f))
    ref = new.interpolate(f)
    # interior nodes match exactly; boundary-adjacent ones only approximately
    inner = np.hypot(*new.points.T) < 1.12
    assert np.abs(up - ref)[inner].max() <= 1e-12
    assert np.abs(up - ref).max() <= 5e-2


def test_export_triplets():
    K = sp.csr_matrix(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    fh = io.StringIO()
    export_triplets(K, fh)
    rows = [ln.split() for ln in fh.getvalue().splitlines()]
    assert rows[0] == ["0", "0", "2"] and rows[1] == ["0", "1", "-1"] and len(rows) == 4
