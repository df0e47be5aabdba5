import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from rtipping import mol
from rtipping.errors import DomainError, MeshError
from rtipping.mol import build_system, diff_matrices, fd_weights, find_fixed_point, integrate, integrate_trbdf2


def _random_mesh(rng, n=80):
    z = np.sort(rng.uniform(-3, 3, n))
    return z[np.concatenate([[True], np.diff(z) > 1e-3])]


def test_fd_weights_classic():
    c = fd_weights(0.0, np.array([-2.0, -1.0, 0.0, 1.0, 2.0]), 2)
    assert np.allclose(c[1], [1 / 12, -2 / 3, 0, 2 / 3, -1 / 12], atol=1e-14)
    assert np.allclose(c[2], [-1 / 12, 4 / 3, -5 / 2, 4 / 3, -1 / 12], atol=1e-14)


def test_quartic_exactness(rng):
    z = _random_mesh(rng)
    D1, D2 = diff_matrices(z)
    for k in range(5):
        u = z**k
        du = k * z ** max(k - 1, 0) if k >= 1 else 0 * z
        d2u = k * (k - 1) * z ** max(k - 2, 0) if k >= 2 else 0 * z
        scale = 1 + np.max(np.abs(u))
        assert np.max(np.abs(D1 @ u - du)) < 1e-9 * scale * 10**k
        assert np.max(np.abs(D2 @ u - d2u)) < 1e-9 * scale * 10**k


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_quartic_exactness_relative(seed):
    rng = np.random.default_rng(seed)
    z = np.sort(rng.uniform(-1, 1, 30))
    if np.min(np.diff(z)) < 1e-3:
        return
    D1, D2 = diff_matrices(z)
    c = rng.normal(size=5)
    u = np.polyval(c, z)
    du = np.polyval(np.polyder(c), z)
    d2u = np.polyval(np.polyder(c, 2), z)
    assert np.max(np.abs(D1 @ u - du)) <= 1e-9 * max(1.0, np.max(np.abs(du)))
    assert np.max(np.abs(D2 @ u - d2u)) <= 1e-9 * max(1.0, np.max(np.abs(d2u)))


def test_stencil_structure(setup):
    sys = setup.system
    assert np.max(np.abs(sys.D1 @ np.ones(sys.N))) < 1e-10
    assert np.max(np.abs(sys.D2 @ np.ones(sys.N))) < 1e-10
    assert np.max(np.abs((sys.D2 @ sys.z**2)[2:-2] - 2)) < 1e-9
    assert np.max(np.diff(sys.D1.indptr)) == 5


def test_derivative_of_sine(setup, stable):
    from rtipping.pulses import canonical_mesh
    # the default mesh (spacing <= 0.5) is sized for the pulses, which vary on
    # the 1/beta scale; a unit-frequency sine needs spacing ~0.1 for 1e-5
    z = canonical_mesh(stable, 0.1)
    D1, _ = diff_matrices(z)
    err = D1 @ np.sin(z) - np.cos(z)
    assert np.max(np.abs(err[2:-2])) < 1e-5
    # on the default mesh the error follows the h^4 truncation bound
    zd = setup.system.z
    errd = np.abs(setup.system.D1 @ np.sin(zd) - np.cos(zd))[2:-2]
    h = np.maximum(np.diff(zd)[1:-2], np.diff(zd)[2:-1])
    assert np.all(errd <= h**4 / 10 + 1e-12)


def test_mesh_errors():
    with pytest.raises(MeshError):
        diff_matrices(np.array([0.0, 1.0, 1.0, 2.0, 3.0, 4.0]))
    with pytest.raises(MeshError):
        build_system(np.linspace(0, 1, 20), None)


def test_rhs_properties(setup, stable):
    sys = setup.system
    a = sys.params.a
    res = mol.rhs(sys.pack(stable(sys.z), -a), sys)
    assert np.max(np.abs(res[2:-2])) < 1e-4
    assert res[-1] == 0.0
    for g in (-a, -3.0, 0.0, a):
        out = mol.rhs(sys.pack(np.zeros(sys.N), g), sys)
        assert np.all(out[:-1] == 0)
    assert mol.rhs(sys.pack(np.zeros(sys.N), 0.0), sys)[-1] == pytest.approx(sys.params.r * a)
    with pytest.raises(DomainError):
        mol.rhs(sys.pack(np.zeros(sys.N), a + 1e-3), sys)


def test_jacobian_matches_finite_differences(setup, rng):
    sys = setup.system.with_rate(0.8)
    y = sys.pack(setup.V_s * rng.uniform(0.5, 1.5, sys.N), 3.7)
    J = mol.jacobian(y, sys).toarray()
    h = 1e-6
    cols = np.concatenate([rng.choice(sys.N, 40, replace=False), [sys.N]])
    for j in cols:
        e = np.zeros_like(y)
        e[j] = h * max(1.0, abs(y[j]))
        fd = (mol.rhs(y + e, sys) - mol.rhs(y - e, sys)) / (2 * e[j])
        assert np.max(np.abs(J[:, j] - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))


def test_jacobian_special_entries(setup):
    sys = setup.system.with_rate(1.3)
    a = sys.params.a
    J0 = mol.jacobian(sys.pack(setup.V_s, 0.0), sys).toarray()
    assert np.all(J0[:-1, -1] == 0)
    Jm = mol.jacobian(sys.pack(setup.V_s, -a), sys)
    assert Jm[-1, -1] == pytest.approx(2 * 1.3)


def test_fixed_points(setup, stable, unstable):
    sys = setup.system
    a = sys.params.a
    V, it = find_fixed_point(sys, stable(sys.z), -a)
    assert it <= 5
    assert np.max(np.abs(V - stable(sys.z))) < 1e-6
    Vu, _ = find_fixed_point(sys, unstable(sys.z), a)
    assert Vu.max() == pytest.approx(0.0657, abs=2e-3)
    V0, _ = find_fixed_point(sys, np.zeros(sys.N), a)
    assert np.all(V0 == 0)
    with pytest.raises(DomainError):
        find_fixed_point(sys, V0, 0.0)


def test_equilibrium_preservation(setup):
    sys = setup.system.with_rate(1.0)
    y0 = sys.pack(setup.V_s, -sys.params.a)
    tr = integrate(sys, y0, (0.0, 100.0))
    assert np.max(np.abs(tr.y - y0)) < 1e-6


def test_l_stability():
    lam = -1000.0
    tr = integrate_trbdf2(lambda t, y: lam * y, lambda t, y: sp.csc_matrix([[lam]]), [1.0], (0.0, 10.0),
                          atol=1e-6, rtol=1e-6)
    assert np.max(np.diff(tr.t)) > 50 * 2 / 1000
    assert abs(tr.y[-1, 0]) < 1e-6
    assert np.all(np.abs(tr.y[:, 0]) <= 1.0 + 1e-12)


def test_self_convergence():
    # nonlinear scalar problem with exact solution y = 1 / (1 + t)
    fun = lambda t, y: -y**2
    jac = lambda t, y: sp.csc_matrix([[-2 * y[0]]])
    errs = []
    for tol in (1e-6, 5e-7, 1e-8):
        tr = integrate_trbdf2(fun, jac, [1.0], (0.0, 5.0), atol=tol, rtol=tol)
        errs.append(abs(tr.y[-1, 0] - 1 / 6))
    assert errs[1] < errs[0] and errs[2] < errs[1]
    assert errs[2] < errs[0] / 10


def test_dense_output_hermite():
    fun = lambda t, y: np.array([y[1], -y[0]])
    jac = lambda t, y: sp.csc_matrix([[0.0, 1.0], [-1.0, 0.0]])
    tr = integrate_trbdf2(fun, jac, [0.0, 1.0], (0.0, 6.0), atol=1e-10, rtol=1e-10)
    tq = np.linspace(0, 6, 101)
    assert np.max(np.abs(tr(tq)[:, 0] - np.sin(tq))) < 1e-6
    assert np.max(np.abs(tr.derivative(tq)[:, 0] - np.cos(tq))) < 1e-5
    assert np.allclose(tr(tr.t), tr.y, atol=1e-14)
