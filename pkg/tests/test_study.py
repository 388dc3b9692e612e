import math

import numpy as np
import pytest
from scipy.integrate import quad

from pvilab.fem import build_space
from pvilab.mesh import build_initial_disk_mesh, refine_uniform
from pvilab.study import (
    ConvergenceRecord,
    ExactRadialSolution,
    StudyConfig,
    UndefinedRate,
    dorfler_mark,
    eoc,
    h1_error,
    read_records,
    run_campaign,
    write_loglog,
    write_records,
)

EXACT = ExactRadialSolution()


def radial_oracle(R=1.5):
    # |grad u| = r - 1/r outside the contact disk
    val, _ = quad(lambda r: (r - 1 / r) ** 2 * 2 * math.pi * r, 1.0, R, epsabs=0.0, epsrel=1e-13)
    return val


def test_exact_solution_properties():
    assert EXACT.h1_seminorm_squared() == pytest.approx(radial_oracle(), rel=1e-13)
    assert math.sqrt(EXACT.h1_seminorm_squared()) == pytest.approx(1.0368, abs=1e-4)
    # boundary value, contact value, and the PDE -u'' - u'/r = -f outside
    assert EXACT.value(np.array([1.5, 0.0])) == pytest.approx(0.0, abs=1e-15)
    assert EXACT.value(np.array([0.3, 0.2])) == EXACT.psi_const
    r, h = 1.3, 1e-4
    u = lambda s: EXACT.value(np.array([s, 0.0]))
    lap = (u(r + h) - 2 * u(r) + u(r - h)) / h**2 + (u(r + h) - u(r - h)) / (2 * h * r)
    assert lap == pytest.approx(-EXACT.f, rel=1e-5)
    g = EXACT.grad(np.array([[0.6, 0.8], [1.2, 0.0]]))
    assert np.allclose(g, [[0.0, 0.0], [1.2 - 1 / 1.2, 0.0]])


@pytest.fixture(scope="module")
def meshes():
    out = [build_initial_disk_mesh(1.5)]
    for _ in range(3):
        out.append(refine_uniform(out[-1]))
    return out


@pytest.mark.parametrize("level", [0, 1, 2])
def test_zero_coefficients_give_seminorm_of_exact(meshes, level):
    space = build_space(meshes[level], 2)
    err, eta2 = h1_error(space, np.zeros(space.n_dofs), EXACT)
    assert abs(err - math.sqrt(radial_oracle())) <= 1e-10
    assert eta2.shape == (meshes[level].n_elements,) and np.all(eta2 >= 0)


def test_identical_coefficients_give_zero(meshes):
    space = build_space(meshes[1], 3)
    c = np.random.default_rng(0).standard_normal(space.n_dofs)
    err, eta2 = h1_error(space, c, c.copy())
    assert err == 0.0 and np.all(eta2 == 0.0)
    with pytest.raises(ValueError):
        h1_error(space, c[:-1], EXACT)


def test_interpolation_error_rate(meshes):
    errs, hs = [], []
    for m in meshes[1:]:
        space = build_space(m, 2)
        errs.append(h1_error(space, space.interpolate(EXACT.value), EXACT)[0])
        hs.append(m.h)
    rates = np.diff(np.log(errs)) / np.diff(np.log(hs))
    assert rates[-1] >= 1.4


def test_dorfler_examples():
    assert list(dorfler_mark([4, 3, 2, 1], 0.5)) == [0, 1]
    assert list(dorfler_mark([0, 3, 2, 0, 1], 1.0)) == [1, 2, 4]
    assert list(dorfler_mark([1, 5, 5, 2], 1e-9)) == [1]
    assert dorfler_mark(np.zeros(4), 0.5).size == 0
    # exact threshold: 5 of 10 is enough for theta = 0.5
    assert list(dorfler_mark([5, 3, 2], 0.5)) == [0]
    with pytest.raises(ValueError):
        dorfler_mark([1.0], 0.0)


def test_dorfler_minimal_on_random_data():
    rng = np.random.default_rng(3)
    for _ in range(50):
        eta = rng.random(30) ** 3
        theta = rng.uniform(0.05, 1.0)
        M = dorfler_mark(eta, theta)
        assert eta[M].sum() >= theta * eta.sum() * (1 - 1e-12)
        # dropping the smallest marked element breaks the bulk criterion
        if len(M) > 1:
            smallest = M[np.argmin(eta[M])]
            assert eta[M].sum() - eta[smallest] < theta * eta.sum()


def _records(N, err, field="err_total"):
    out = []
    for k, (n, e) in enumerate(zip(N, err)):
        r = ConvergenceRecord(level=k, N=n, h=1.0, p=1, q=1, err_total=e, err_quad=e)
        out.append(r)
    return out


def test_eoc_synthetic():
    N = [10, 40, 160, 640]
    recs = _records(N, [3.0 * n**-0.5 for n in N])
    assert eoc(recs) == pytest.approx(0.5, abs=1e-12)
    recs = _records(N, [n**-1.0 for n in N[:2]] + [n**-2.0 for n in N[2:]])
    assert eoc(recs, window=2) == pytest.approx(2.0, abs=1e-12)
    recs[-1].failed = True
    recs[-2].floor = True
    # err_quad skips floor rows, err_total does not
    assert eoc(recs, "err_total", window=2) == pytest.approx(
        -np.polyfit(np.log(N[1:3]), np.log([N[1] ** -1.0, N[2] ** -2.0]), 1)[0])
    with pytest.raises(UndefinedRate):
        eoc(recs[:1])
    with pytest.raises(UndefinedRate):
        eoc(_records([10, 20], [0.0, 0.0]))


def test_config_validation_and_names():
    cfg = StudyConfig(mode="h-adaptive", p=3, q_offset=2)
    assert cfg.tag == "a3" and cfg.filename() == "a3_j2.csv" and cfg.filename(11) == "a3_j11.csv"
    with pytest.raises(ValueError):
        StudyConfig(mode="x")
    with pytest.raises(ValueError):
        StudyConfig(theta=1.5)


def test_small_uniform_campaign(tmp_path):
    cfg = StudyConfig(mode="h-uniform", p=2, levels=3, out_dir=str(tmp_path))
    runs = run_campaign(cfg, offsets=[-1, 0, 1, 11])
    ref = runs[11]
    assert [r.N for r in ref] == [73, 305, 1249]
    assert all(r.err_quad == 0.0 and r.floor for r in ref)
    # q = p - 1 is singular: every level fails but the campaign goes on
    assert all(r.failed and "Definiteness" in r.note for r in runs[-1])
    for j in (0, 1):
        assert all(not r.failed for r in runs[j])
        # the total error is dominated by the discretisation error
        assert all(abs(a.err_total - b.err_total) <= 0.5 * b.err_total for a, b in zip(runs[j], ref))
    # quadrature errors shrink with j
    assert runs[1][-1].err_quad < runs[0][-1].err_quad
    rows = read_records(tmp_path / "h2_j1.csv")
    assert [r["N"] for r in rows] == [73, 305, 1249]
    assert rows[-1]["err_total"] == runs[1][-1].err_total
    assert math.isnan(rows[0]["eoc_total"])


def test_adaptive_and_p_campaigns():
    runs = run_campaign(StudyConfig(mode="h-adaptive", p=1, levels=4), offsets=[1, 11])
    N = [r.N for r in runs[11]]
    assert all(b > a for a, b in zip(N, N[1:]))
    assert N[-1] < 4**3 * N[0]  # fewer unknowns than uniform refinement
    runs = run_campaign(StudyConfig(mode="p-uniform", p=1, levels=3, q_offset=11))
    recs = runs[11]
    assert [r.p for r in recs] == [1, 2, 3]
    assert recs[0].N == build_space(refine_uniform(build_initial_disk_mesh()), 1).n_dofs


def test_max_dofs_stops_campaign():
    runs = run_campaign(StudyConfig(p=1, levels=6, max_dofs=400))
    assert [r.N for r in runs[11]] == [17, 73, 305]


def test_loglog_file(tmp_path):
    recs = _records([10, 100], [1e-2, 1e-3])
    recs[1].floor = True
    p = write_loglog(recs, tmp_path / "ll.csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "log10_N,log10_err_total,log10_err_quad"
    vals = [float(x) for x in lines[2].split(",")]
    assert vals[0] == pytest.approx(2.0) and vals[1] == pytest.approx(-3.0) and math.isnan(vals[2])
    write_records(recs, tmp_path / "r.csv")
    assert len(read_records(tmp_path / "r.csv")) == 2
