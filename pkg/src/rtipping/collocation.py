"""Two-point boundary value solver: 3-stage Lobatto IIIA collocation.

The discrete unknowns are the solution values at the mesh nodes plus any free
parameters.  On each subinterval the solution is the C1 cubic fixed by the end
values and end slopes, and it must satisfy the ODE at the midpoint
(Hermite-Simpson form).  Interior condition points split the domain into
segments; the junction node is stored twice with a zero-length interval between
the copies, for which the collocation equation reduces to continuity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import MeshError, NoConvergenceError, RefinementLimitError

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps
MAX_NODES = 20_000

# Lobatto points for the residual estimate, relative to the interval
_RES_OFFSET = 0.5 * np.sqrt(3.0 / 7.0)


@dataclass
class BvpProblem:
    """y' = fun(z, y, p) on [z_lo, z_hi] with n_y + n_p conditions from ``bc``.

    ``fun(z, y, p)`` is vectorised: z has shape (m,), y shape (n_y, m).
    ``bc(ya, yb, yint, p)`` gets the end values, an (n_y, k) array of values at
    the interior points and the parameters; it returns n_y + n_p residuals.
    Optional ``fun_jac(z, y, p)`` returns (df/dy of shape (n_y, n_y, m),
    df/dp of shape (n_y, n_p, m)).  Missing Jacobians are built by forward
    differences.
    """

    fun: Callable
    bc: Callable
    n_y: int
    z_lo: float
    z_hi: float
    n_p: int = 0
    interior: Sequence[float] = ()
    fun_jac: Optional[Callable] = None

    def __post_init__(self):
        self.interior = tuple(sorted(float(c) for c in self.interior))
        if not self.z_lo < self.z_hi:
            raise MeshError("z_lo must be below z_hi")
        for c in self.interior:
            if not self.z_lo < c < self.z_hi:
                raise MeshError(f"interior point {c} is not strictly inside the domain")
        if len(set(self.interior)) != len(self.interior):
            raise MeshError("duplicate interior points")
        # solvability count is checked once, here
        k = len(self.interior)
        probe = np.asarray(
            self.bc(np.zeros(self.n_y), np.zeros(self.n_y), np.zeros((self.n_y, k)), np.zeros(self.n_p)),
            dtype=float,
        )
        if probe.shape != (self.n_y + self.n_p,):
            raise ValueError(
                f"boundary/interior conditions return {probe.size} residuals, "
                f"expected n_y + n_p = {self.n_y + self.n_p}"
            )


@dataclass
class BvpSolution:
    z: np.ndarray  # nodes, junction nodes repeated
    y: np.ndarray  # (n_y, m)
    f: np.ndarray  # slopes at nodes
    y_mid: np.ndarray  # midpoint stage values per interval
    p: np.ndarray
    residuals: np.ndarray  # relative rms collocation residual per interval
    bc_residual: float
    iterations: int
    problem: BvpProblem = field(repr=False)

    @property
    def residual_norm(self) -> float:
        return float(max(self.residuals.max(initial=0.0), self.bc_residual))

    @property
    def nodes(self) -> np.ndarray:
        """Strictly increasing node set (junction duplicates removed)."""
        return np.unique(self.z)

    def __call__(self, zq):
        """Evaluate the piecewise-cubic interpolant; returns (n_y, len(zq))."""
        return _hermite_eval(self.z, self.y, self.f, np.atleast_1d(np.asarray(zq, dtype=float)))[0]

    def derivative(self, zq):
        return _hermite_eval(self.z, self.y, self.f, np.atleast_1d(np.asarray(zq, dtype=float)))[1]


def _hermite_eval(z, y, f, zq):
    h_all = np.diff(z)
    # right-closed search so that queries on a node land on a positive-length interval
    idx = np.searchsorted(z, zq, side="right") - 1
    idx = np.clip(idx, 0, len(z) - 2)
    # step off zero-length junction intervals
    zero = h_all[idx] == 0
    idx[zero] -= 1
    idx = np.clip(idx, 0, len(z) - 2)
    h = h_all[idx]
    t = (zq - z[idx]) / h
    y0, y1 = y[:, idx], y[:, idx + 1]
    f0, f1 = f[:, idx] * h, f[:, idx + 1] * h
    t2, t3 = t * t, t * t * t
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + t
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    val = h00 * y0 + h10 * f0 + h01 * y1 + h11 * f1
    d00 = (6 * t2 - 6 * t) / h
    d10 = (3 * t2 - 4 * t + 1) / h
    d01 = (-6 * t2 + 6 * t) / h
    d11 = (3 * t2 - 2 * t) / h
    der = d00 * y0 + d10 * f0 + d01 * y1 + d11 * f1
    return val, der


class _Discretization:
    """Residual and sparse Jacobian of the collocation system on a fixed mesh."""

    def __init__(self, problem: BvpProblem, z: np.ndarray, junction_idx: np.ndarray):
        self.pb = problem
        self.z = z
        self.h = np.diff(z)
        self.m = len(z)
        self.junction_idx = junction_idx  # index of the left copy of each interior node
        self.n = problem.n_y
        self.k = problem.n_p

    # -- function and Jacobian evaluation --
    def f(self, z, y, p):
        return np.asarray(self.pb.fun(z, y, p), dtype=float).reshape(self.n, -1)

    def f_jac(self, z, y, p):
        if self.pb.fun_jac is not None:
            dfdy, dfdp = self.pb.fun_jac(z, y, p)
            dfdy = np.asarray(dfdy, dtype=float).reshape(self.n, self.n, -1)
            dfdp = None if self.k == 0 else np.asarray(dfdp, dtype=float).reshape(self.n, self.k, -1)
            return dfdy, dfdp
        f0 = self.f(z, y, p)
        dfdy = np.empty((self.n, self.n, len(z)))
        for j in range(self.n):
            step = np.sqrt(EPS) * (1.0 + np.abs(y[j]))
            yp = y.copy()
            yp[j] += step
            dfdy[:, j, :] = (self.f(z, yp, p) - f0) / step
        dfdp = None
        if self.k:
            dfdp = np.empty((self.n, self.k, len(z)))
            for j in range(self.k):
                step = np.sqrt(EPS) * (1.0 + abs(p[j]))
                pp = p.copy()
                pp[j] += step
                dfdp[:, j, :] = (self.f(z, y, pp) - f0) / step
        return dfdy, dfdp

    def bc(self, y, p):
        yint = y[:, self.junction_idx]
        return np.asarray(self.pb.bc(y[:, 0], y[:, -1], yint, p), dtype=float)

    def bc_jac(self, y, p):
        # columns: ya (n), yb (n), yint (n*k_int), p
        r0 = self.bc(y, p)
        cols = [(0, j) for j in range(self.n)] + [(self.m - 1, j) for j in range(self.n)]
        cols += [(int(i), j) for i in self.junction_idx for j in range(self.n)]
        entries = []
        for node, j in cols:
            step = np.sqrt(EPS) * (1.0 + abs(y[j, node]))
            yp = y.copy()
            yp[j, node] += step
            entries.append((node, j, (self.bc(yp, p) - r0) / step))
        dp = np.empty((len(r0), self.k))
        for j in range(self.k):
            step = np.sqrt(EPS) * (1.0 + abs(p[j]))
            pp = p.copy()
            pp[j] += step
            dp[:, j] = (self.bc(y, pp) - r0) / step
        return entries, dp

    def stages(self, y, p):
        fy = self.f(self.z, y, p)
        z_mid = self.z[:-1] + 0.5 * self.h
        y_mid = 0.5 * (y[:, 1:] + y[:, :-1]) - 0.125 * self.h * (fy[:, 1:] - fy[:, :-1])
        f_mid = self.f(z_mid, y_mid, p)
        return fy, z_mid, y_mid, f_mid

    def residual(self, y, p):
        fy, _, y_mid, f_mid = self.stages(y, p)
        col = y[:, 1:] - y[:, :-1] - self.h / 6.0 * (fy[:, :-1] + fy[:, 1:] + 4.0 * f_mid)
        return np.concatenate([col.T.ravel(), self.bc(y, p)]), fy, y_mid, f_mid

    def jacobian(self, y, p, fy, y_mid):
        n, m, k = self.n, self.m, self.k
        h = self.h
        z_mid = self.z[:-1] + 0.5 * h
        J, Jp = self.f_jac(self.z, y, p)
        Jm, Jpm = self.f_jac(z_mid, y_mid, p)
        I = np.eye(n)[:, :, None]
        # dy_mid/dy_i and dy_mid/dy_{i+1}
        A = 0.5 * I + 0.125 * h * J[:, :, :-1]
        B = 0.5 * I - 0.125 * h * J[:, :, 1:]
        JmA = np.einsum("ijm,jkm->ikm", Jm, A)
        JmB = np.einsum("ijm,jkm->ikm", Jm, B)
        dLeft = -I - h / 6.0 * (J[:, :, :-1] + 4.0 * JmA)
        dRight = I - h / 6.0 * (J[:, :, 1:] + 4.0 * JmB)

        # block (i, i) and (i, i+1) entries
        rows_blk = np.arange(m - 1)
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        r_idx = (rows_blk[:, None, None] * n + ii[None]).ravel()
        cL = (rows_blk[:, None, None] * n + jj[None]).ravel()
        cR = ((rows_blk[:, None, None] + 1) * n + jj[None]).ravel()
        vL = np.moveaxis(dLeft, 2, 0).ravel()
        vR = np.moveaxis(dRight, 2, 0).ravel()
        rows = [r_idx, r_idx]
        cols = [cL, cR]
        vals = [vL, vR]

        nrow_col = n * (m - 1)
        if k:
            dymid_dp = -0.125 * h * (Jp[:, :, 1:] - Jp[:, :, :-1])
            dP = -h / 6.0 * (Jp[:, :, :-1] + Jp[:, :, 1:] + 4.0 * (Jpm + np.einsum("ijm,jkm->ikm", Jm, dymid_dp)))
            ip, jp = np.meshgrid(np.arange(n), np.arange(k), indexing="ij")
            rows.append((rows_blk[:, None, None] * n + ip[None]).ravel())
            cols.append(np.broadcast_to(n * m + jp[None], (m - 1, n, k)).ravel())
            vals.append(np.moveaxis(dP, 2, 0).ravel())

        entries, dbp = self.bc_jac(y, p)
        nbc = n + k
        for node, j, colvals in entries:
            nz = np.nonzero(colvals)[0]
            rows.append(nrow_col + nz)
            cols.append(np.full(len(nz), node * n + j))
            vals.append(colvals[nz])
        if k:
            bi, bj = np.meshgrid(np.arange(nbc), np.arange(k), indexing="ij")
            rows.append(nrow_col + bi.ravel())
            cols.append(n * m + bj.ravel())
            vals.append(dbp.ravel())
        size = n * m + k
        return sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
        )

    def rms_residuals(self, y, p, fy):
        """Relative rms residual of the collocation cubic on every interval."""
        pos = self.h > 0
        res = np.zeros(len(self.h))
        if not np.any(pos):
            return res
        zl = self.z[:-1][pos]
        hh = self.h[pos]
        out = []
        for off in (0.5 - _RES_OFFSET, 0.5 + _RES_OFFSET):
            zq = zl + off * hh
            val, der = _hermite_eval(self.z, y, fy, zq)
            fq = self.f(zq, val, p)
            out.append((der - fq) / (1.0 + np.abs(fq)))
        # the midpoint residual vanishes by construction
        r2 = 49.0 / 90.0 * (np.sum(out[0] ** 2, axis=0) + np.sum(out[1] ** 2, axis=0))
        res[pos] = np.sqrt(0.5 * r2)
        return res


def _newton(disc: _Discretization, y, p, tol_newton, max_iter=50, max_halvings=30):
    n, m, k = disc.n, disc.m, disc.k
    x = np.concatenate([y.T.ravel(), p])

    def unpack(x):
        return x[: n * m].reshape(m, n).T, x[n * m :]

    R, fy, y_mid, _ = disc.residual(y, p)
    merit = np.linalg.norm(R)
    for it in range(1, max_iter + 1):
        Jac = disc.jacobian(y, p, fy, y_mid)
        try:
            lu = splu(Jac)
        except RuntimeError as exc:
            raise NoConvergenceError(f"singular collocation Jacobian: {exc}", (y, p)) from exc
        dx = lu.solve(-R)
        if not np.all(np.isfinite(dx)):
            raise NoConvergenceError("non-finite Newton step", (y, p))
        step = 1.0
        for _ in range(max_halvings):
            x_new = x + step * dx
            y_new, p_new = unpack(x_new)
            R_new, fy_new, ymid_new, _ = disc.residual(y_new, p_new)
            merit_new = np.linalg.norm(R_new)
            if np.isfinite(merit_new) and merit_new <= (1.0 - 1e-4 * step) * merit:
                break
            step *= 0.5
        else:
            # accept tiny step only if we are already at the tolerance floor
            if np.max(np.abs(R)) < tol_newton * 10:
                return y, p, it
            raise NoConvergenceError("damped Newton line search failed", (y, p))
        x, y, p, R, fy, y_mid, merit = x_new, y_new, p_new, R_new, fy_new, ymid_new, merit_new
        if np.max(np.abs(R)) < tol_newton and step == 1.0:
            return y, p, it
        if np.max(np.abs(step * dx)) < 1e-14 * (1.0 + np.max(np.abs(x))):
            return y, p, it
    raise NoConvergenceError(f"Newton did not converge in {max_iter} iterations", (y, p))


def _setup_mesh(problem: BvpProblem, z, y):
    """Insert interior points as duplicated nodes; interpolate the guess onto them."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float).reshape(problem.n_y, -1)
    if len(z) < 2 or np.any(np.diff(z) < 0):
        raise MeshError("mesh must be non-decreasing with at least two nodes")
    # strip pre-existing duplicates so interior handling is uniform
    keep = np.concatenate([[True], np.diff(z) > 0])
    z, y = z[keep], y[:, keep]
    if abs(z[0] - problem.z_lo) > 1e-12 * (1 + abs(problem.z_lo)) or abs(z[-1] - problem.z_hi) > 1e-12 * (
        1 + abs(problem.z_hi)
    ):
        raise MeshError("guess mesh must span [z_lo, z_hi]")
    for c in problem.interior:
        if not np.any(z == c):
            i = np.searchsorted(z, c)
            yc = np.array([np.interp(c, z, row) for row in y])
            z = np.insert(z, i, c)
            y = np.insert(y, i, yc, axis=1)
    for c in problem.interior:
        i = int(np.nonzero(z == c)[0][0])
        z = np.insert(z, i + 1, c)
        y = np.insert(y, i + 1, y[:, i], axis=1)
    junction = [int(np.nonzero(z == c)[0][0]) for c in problem.interior]
    return z, y, np.asarray(junction, dtype=int)


def _solve_on_mesh(problem, z, y, p, junction, tol_newton):
    disc = _Discretization(problem, z, junction)
    y, p, iters = _newton(disc, y, p, tol_newton)
    R, fy, y_mid, _ = disc.residual(y, p)
    res = disc.rms_residuals(y, p, fy)
    bc_res = float(np.max(np.abs(R[disc.n * (disc.m - 1) :]), initial=0.0))
    return BvpSolution(z=z, y=y, f=fy, y_mid=y_mid, p=p, residuals=res, bc_residual=bc_res,
                       iterations=iters, problem=problem)


def _refined_mesh(sol: BvpSolution, tol: float):
    """Subdivide intervals whose residual exceeds tol (1 node, or 2 for large residuals)."""
    z, res = sol.z, sol.residuals
    new_z = [z[:1]]
    for i in range(len(z) - 1):
        a, b = z[i], z[i + 1]
        if b > a and res[i] > tol:
            nins = 1 if res[i] < 100 * tol else 2
            new_z.append(a + (b - a) * np.arange(1, nins + 1) / (nins + 1))
        new_z.append(z[i + 1 : i + 2])
    return np.concatenate(new_z)


def refine_mesh(solution: BvpSolution, tol: float, max_nodes: int = MAX_NODES, tol_newton=None) -> BvpSolution:
    """One refinement pass followed by a re-solve on the new mesh.

    Intervals already below ``tol`` keep their nodes, so a converged solution
    comes back on an identical mesh.
    """
    if solution.residuals.max(initial=0.0) <= tol:
        return solution
    pb = solution.problem
    z_new = _refined_mesh(solution, tol)
    if len(z_new) > max_nodes:
        raise RefinementLimitError(f"mesh refinement would exceed {max_nodes} nodes")
    y_new = solution(z_new)
    # junction copies: evaluate consistently from both sides
    zz, yy, junction = _setup_mesh(pb, z_new, y_new)
    tol_newton = tol_newton if tol_newton is not None else min(1e-10, 1e-2 * tol)
    return _solve_on_mesh(pb, zz, yy, solution.p.copy(), junction, tol_newton)


def solve_bvp(problem: BvpProblem, z, y, p=None, tol: float = 1e-8, max_nodes: int = MAX_NODES,
              adapt: bool = True, max_refinements: int = 40, tol_newton=None) -> BvpSolution:
    """Solve ``problem`` from the initial guess (z, y, p).

    With ``adapt=False`` the mesh is kept fixed (used for convergence studies).
    """
    z = np.asarray(z, dtype=float)
    if len(z) < 5:
        raise MeshError("guess mesh needs at least 5 nodes")
    p = np.zeros(problem.n_p) if p is None else np.atleast_1d(np.asarray(p, dtype=float)).copy()
    if p.shape != (problem.n_p,):
        raise ValueError(f"expected {problem.n_p} parameters")
    zz, yy, junction = _setup_mesh(problem, z, y)
    if len(zz) > max_nodes:
        raise RefinementLimitError("initial mesh exceeds node cap")
    tol_newton = tol_newton if tol_newton is not None else min(1e-10, 1e-2 * tol)
    sol = _solve_on_mesh(problem, zz, yy, p, junction, tol_newton)
    if not adapt:
        return sol
    for _ in range(max_refinements):
        if sol.residuals.max(initial=0.0) <= tol:
            break
        log.debug("refining: %d nodes, max residual %.3e", len(sol.z), sol.residuals.max())
        sol = refine_mesh(sol, tol, max_nodes=max_nodes, tol_newton=tol_newton)
    else:
        raise RefinementLimitError("residual still above tolerance after maximum refinements")
    return sol
