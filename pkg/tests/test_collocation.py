import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from rtipping.collocation import BvpProblem, refine_mesh, solve_bvp
from rtipping.errors import MeshError, RefinementLimitError


def _second_order(rhs):
    return lambda z, y, p: np.vstack([y[1], rhs(z, y[0], p)])


def test_linear_exact():
    pb = BvpProblem(_second_order(lambda z, u, p: 0 * u), lambda ya, yb, yi, p: np.array([ya[0], yb[0] - 1]),
                    n_y=2, z_lo=0.0, z_hi=1.0)
    z = np.linspace(0, 1, 7)
    sol = solve_bvp(pb, z, np.zeros((2, 7)))
    assert np.max(np.abs(sol.y[0] - sol.z)) < 1e-12
    assert np.allclose(sol(sol.z), sol.y, atol=1e-15)


def test_cubic_solution_exact_on_coarse_mesh():
    # u = z^3: u'' = 6z, reproduced exactly by the piecewise cubic
    pb = BvpProblem(_second_order(lambda z, u, p: 6 * z), lambda ya, yb, yi, p: np.array([ya[0], yb[0] - 8]),
                    n_y=2, z_lo=0.0, z_hi=2.0)
    sol = solve_bvp(pb, np.linspace(0, 2, 5), np.zeros((2, 5)), adapt=False)
    zq = np.linspace(0, 2, 33)
    assert np.max(np.abs(sol(zq)[0] - zq**3)) < 1e-12
    assert sol.residual_norm < 1e-12


def test_free_parameter_eigenvalue():
    pb = BvpProblem(_second_order(lambda z, u, p: -p[0] * u),
                    lambda ya, yb, yi, p: np.array([ya[0], yb[0], ya[1] - np.pi]),
                    n_y=2, n_p=1, z_lo=0.0, z_hi=1.0)
    z = np.linspace(0, 1, 11)
    guess = np.vstack([np.sin(np.pi * z), np.pi * np.cos(np.pi * z)])
    sol = solve_bvp(pb, z, guess, p=[9.0], tol=1e-10)
    assert sol.p[0] == pytest.approx(np.pi**2, abs=1e-8)


def test_interior_condition():
    # u'' = -1, u(0) = 0, u(0.3) = 0.2 -> u = -z^2/2 + c z
    c = (0.2 + 0.045) / 0.3
    pb = BvpProblem(_second_order(lambda z, u, p: -np.ones_like(u)),
                    lambda ya, yb, yi, p: np.array([ya[0], yi[0, 0] - 0.2]),
                    n_y=2, z_lo=0.0, z_hi=1.0, interior=[0.3])
    sol = solve_bvp(pb, np.linspace(0, 1, 9), np.zeros((2, 9)))
    assert np.any(sol.z == 0.3)
    zq = np.linspace(0, 1, 41)
    assert np.max(np.abs(sol(zq)[0] - (-zq**2 / 2 + c * zq))) < 1e-12


def test_condition_count_rejected_at_construction():
    with pytest.raises(ValueError):
        BvpProblem(_second_order(lambda z, u, p: u), lambda ya, yb, yi, p: np.array([ya[0]]),
                   n_y=2, z_lo=0.0, z_hi=1.0)
    with pytest.raises(MeshError):
        BvpProblem(_second_order(lambda z, u, p: u), lambda ya, yb, yi, p: np.array([ya[0], yb[0]]),
                   n_y=2, z_lo=0.0, z_hi=1.0, interior=[1.5])


def test_too_few_nodes():
    pb = BvpProblem(_second_order(lambda z, u, p: 0 * u), lambda ya, yb, yi, p: np.array([ya[0], yb[0] - 1]),
                    n_y=2, z_lo=0.0, z_hi=1.0)
    with pytest.raises(MeshError):
        solve_bvp(pb, np.linspace(0, 1, 4), np.zeros((2, 4)))


def _pendulum_oracle():
    """u'' = -sin u, u(0)=0, u(1)=1 by shooting with a tight explicit integrator."""
    def end(s, dense=False):
        sol = solve_ivp(lambda z, y: [y[1], -np.sin(y[0])], (0, 1), [0.0, s], method="DOP853",
                        rtol=1e-13, atol=1e-14, dense_output=dense)
        return sol if dense else sol.y[0, -1] - 1.0
    s = brentq(end, 0.5, 3.0, xtol=1e-15)
    return end(s, dense=True).sol


def test_fourth_order_convergence():
    oracle = _pendulum_oracle()
    pb = BvpProblem(_second_order(lambda z, u, p: -np.sin(u)),
                    lambda ya, yb, yi, p: np.array([ya[0], yb[0] - 1]), n_y=2, z_lo=0.0, z_hi=1.0)
    errs = []
    ns = [6, 11, 21, 41]
    for n in ns:
        z = np.linspace(0, 1, n)
        sol = solve_bvp(pb, z, np.vstack([z, np.ones_like(z)]), adapt=False, tol_newton=1e-15)
        errs.append(np.max(np.abs(sol.y[0] - oracle(z)[0])))
    slopes = -np.diff(np.log(errs)) / np.log(2)
    assert np.all(np.abs(slopes - 4.0) < 0.3), slopes


def _layer_problem(eps=1e-3):
    return BvpProblem(lambda z, y, p: np.vstack([y[1], y[0] / eps]),
                      lambda ya, yb, yi, p: np.array([ya[0] - 1, yb[0] - 1]), n_y=2, z_lo=0.0, z_hi=1.0)


def test_boundary_layer_refinement():
    eps = 1e-3
    z = np.linspace(0, 1, 21)
    sol = solve_bvp(_layer_problem(eps), z, np.vstack([np.ones_like(z), np.zeros_like(z)]), tol=1e-6)
    w = 10 * np.sqrt(eps)
    zz = np.unique(sol.z)
    near = (np.sum(zz < w) + np.sum(zz > 1 - w)) / (2 * w)
    mid = np.sum((zz >= w) & (zz <= 1 - w)) / (1 - 2 * w)
    assert near >= 3 * mid
    exact = np.cosh((zz - 0.5) / np.sqrt(eps)) / np.cosh(0.5 / np.sqrt(eps))
    assert np.max(np.abs(sol(zz)[0] - exact)) < 1e-5


def test_refine_mesh_idempotent_and_monotone():
    eps = 1e-3
    z = np.linspace(0, 1, 21)
    pb = _layer_problem(eps)
    coarse = solve_bvp(pb, z, np.vstack([np.ones_like(z), np.zeros_like(z)]), adapt=False)
    finer = refine_mesh(coarse, 1e-6)
    assert finer.residuals.max() <= coarse.residuals.max()
    done = solve_bvp(pb, z, np.vstack([np.ones_like(z), np.zeros_like(z)]), tol=1e-6)
    again = refine_mesh(done, 1e-6)
    assert again is done or np.array_equal(again.z, done.z)


def test_node_cap():
    z = np.linspace(0, 1, 21)
    with pytest.raises(RefinementLimitError):
        solve_bvp(_layer_problem(1e-4), z, np.vstack([np.ones_like(z), np.zeros_like(z)]), tol=1e-10,
                  max_nodes=60)
