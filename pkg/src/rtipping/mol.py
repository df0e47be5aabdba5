"""Method of lines for the compactified moving-frame equation.

State layout is ``y = (V_1, ..., V_N, gamma)``:

    V'     = D2 V + r g(gamma) D1 V + f(V, H(z))
    gamma' = r g(gamma)

D1 and D2 come from degree-4 interpolation through the five nearest nodes (one
sided near the ends), so both are banded with five nonzeros per row.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DomainError, MeshError, NoConvergenceError, StiffnessError, WrongBranchError
from .model import ModelParams, ShiftField, habitat, reaction, reaction_du

log = logging.getLogger(__name__)

STENCIL = 5


def fd_weights(x0: float, x: np.ndarray, m: int) -> np.ndarray:
    """Fornberg's recursion: weights c[k, j] so that sum_j c[k, j] u(x_j) ~ u^(k)(x0)."""
    n = len(x)
    c = np.zeros((m + 1, n))
    c1 = 1.0
    c4 = x[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - x0
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[k, i] = c1 * (k * c[k - 1, i - 1] - c5 * c[k, i - 1]) / c2
                c[0, i] = -c1 * c5 * c[0, i - 1] / c2
            for k in range(mn, 0, -1):
                c[k, j] = (c4 * c[k, j] - k * c[k - 1, j]) / c3
            c[0, j] = c4 * c[0, j] / c3
        c1 = c2
    return c


def diff_matrices(z: np.ndarray, width: int = STENCIL):
    """Sparse first and second derivative matrices on the mesh ``z``."""
    z = np.asarray(z, dtype=float)
    n = len(z)
    if n < width:
        raise MeshError(f"need at least {width} nodes")
    if np.any(np.diff(z) <= 0):
        raise MeshError("mesh nodes must be strictly increasing (duplicate or unsorted nodes)")
    half = width // 2
    rows, cols, v1, v2 = [], [], [], []
    for i in range(n):
        lo = min(max(i - half, 0), n - width)
        idx = np.arange(lo, lo + width)
        w = fd_weights(z[i], z[idx], 2)
        rows.extend([i] * width)
        cols.extend(idx)
        v1.extend(w[1])
        v2.extend(w[2])
    D1 = sp.csr_matrix((v1, (rows, cols)), shape=(n, n))
    D2 = sp.csr_matrix((v2, (rows, cols)), shape=(n, n))
    return D1, D2


def trapezoid_weights(z: np.ndarray) -> np.ndarray:
    h = np.diff(z)
    w = np.zeros_like(z)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


@dataclass
class SemidiscreteSystem:
    z: np.ndarray
    params: ModelParams
    D1: sp.csr_matrix = field(repr=False)
    D2: sp.csr_matrix = field(repr=False)
    H: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    shift: ShiftField = field(repr=False)
    V_s: Optional[np.ndarray] = field(default=None, repr=False)
    V_u: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return len(self.z)

    def with_rate(self, r: float) -> "SemidiscreteSystem":
        """Same mesh and matrices, different rate (cheap; matrices are shared)."""
        return SemidiscreteSystem(self.z, self.params.replace(r=r), self.D1, self.D2, self.H,
                                  self.weights, self.shift, self.V_s, self.V_u)

    def l2(self, V) -> float:
        """Continuum-like L2 norm with trapezoidal mesh weights."""
        V = np.asarray(V)
        return float(np.sqrt(np.sum(self.weights * V * V, axis=-1)))

    def pack(self, V, gamma) -> np.ndarray:
        return np.concatenate([np.asarray(V, dtype=float), [float(gamma)]])

    def _check_gamma(self, gamma):
        a = self.params.a
        if abs(gamma) > a * (1 + 1e-9):
            raise DomainError(f"gamma={gamma} outside [-a, a]")

    def rhs(self, t, y) -> np.ndarray:
        V, gamma = y[:-1], y[-1]
        self._check_gamma(gamma)
        p = self.params
        c = p.r * (p.a - gamma * gamma / p.a)
        dV = self.D2 @ V + c * (self.D1 @ V) + reaction(V, self.H, p)
        return np.concatenate([dV, [c]])

    def jacobian(self, t, y) -> sp.csc_matrix:
        V, gamma = y[:-1], y[-1]
        p = self.params
        c = p.r * (p.a - gamma * gamma / p.a)
        dc = -2.0 * p.r * gamma / p.a
        A = self.D2 + c * self.D1 + sp.diags(reaction_du(V, self.H, p))
        col = dc * (self.D1 @ V)
        return sp.bmat([[A, sp.csr_matrix(col[:, None])],
                        [None, sp.csr_matrix([[dc]])]], format="csc")

    def static_operator(self, V) -> sp.csc_matrix:
        """Linearisation of the static equation (gamma = +-a) about V."""
        return (self.D2 + sp.diags(reaction_du(V, self.H, self.params))).tocsc()

    def static_residual(self, V) -> np.ndarray:
        return self.D2 @ V + reaction(V, self.H, self.params)


def build_system(pulse_mesh, p: ModelParams, shift: Optional[ShiftField] = None) -> SemidiscreteSystem:
    z = np.asarray(pulse_mesh, dtype=float)
    if len(z) < 50:
        raise MeshError("method-of-lines mesh needs at least 50 nodes")
    D1, D2 = diff_matrices(z)
    return SemidiscreteSystem(z=z, params=p, D1=D1, D2=D2, H=habitat(z, p.L),
                              weights=trapezoid_weights(z), shift=shift or ShiftField(p.a))


def rhs(state, sys: SemidiscreteSystem):
    return sys.rhs(0.0, np.asarray(state, dtype=float))


def jacobian(state, sys: SemidiscreteSystem):
    return sys.jacobian(0.0, np.asarray(state, dtype=float))


def find_fixed_point(sys: SemidiscreteSystem, V_guess, gamma_fixed: float, tol: float = 1e-10,
                     max_iter: int = 30, check_branch: bool = True):
    """Newton on the static residual; returns (V, iterations)."""
    a = sys.params.a
    if not (math.isclose(abs(gamma_fixed), a)):
        raise DomainError("fixed points exist only at gamma = -a or +a")
    V = np.array(V_guess, dtype=float)
    for it in range(max_iter + 1):
        R = sys.static_residual(V)
        if np.max(np.abs(R)) < tol:
            break
        if it == max_iter:
            raise NoConvergenceError("fixed-point Newton did not converge", V)
        dV = splu(sys.static_operator(V)).solve(-R)
        V = V + dV
    if check_branch and abs(V.max() - np.max(V_guess)) > 0.1:
        raise WrongBranchError(f"Newton left the guessed branch (peak {np.max(V_guess):.4f} -> {V.max():.4f})")
    return V, it


@dataclass
class Trajectory:
    t: np.ndarray
    y: np.ndarray  # (n_samples, N + 1)
    f: np.ndarray = field(repr=False)
    stats: dict = field(default_factory=dict)

    @property
    def V(self) -> np.ndarray:
        return self.y[:, :-1]

    @property
    def gamma(self) -> np.ndarray:
        return self.y[:, -1]

    def __call__(self, tq):
        """Cubic Hermite dense output; returns (len(tq), N + 1) or one state."""
        scalar = np.ndim(tq) == 0
        tq = np.atleast_1d(np.asarray(tq, dtype=float))
        i = np.clip(np.searchsorted(self.t, tq, side="right") - 1, 0, len(self.t) - 2)
        h = (self.t[i + 1] - self.t[i])[:, None]
        s = (tq[:, None] - self.t[i][:, None]) / h
        s2, s3 = s * s, s * s * s
        out = ((2 * s3 - 3 * s2 + 1) * self.y[i] + (s3 - 2 * s2 + s) * h * self.f[i]
               + (-2 * s3 + 3 * s2) * self.y[i + 1] + (s3 - s2) * h * self.f[i + 1])
        return out[0] if scalar else out

    def shifted(self, dt: float) -> "Trajectory":
        """Same orbit with the time axis moved by -dt (the system is autonomous)."""
        return Trajectory(self.t - dt, self.y, self.f, dict(self.stats))

    def derivative(self, tq):
        scalar = np.ndim(tq) == 0
        tq = np.atleast_1d(np.asarray(tq, dtype=float))
        i = np.clip(np.searchsorted(self.t, tq, side="right") - 1, 0, len(self.t) - 2)
        h = (self.t[i + 1] - self.t[i])[:, None]
        s = (tq[:, None] - self.t[i][:, None]) / h
        s2 = s * s
        out = ((6 * s2 - 6 * s) / h * self.y[i] + (3 * s2 - 4 * s + 1) * self.f[i]
               + (-6 * s2 + 6 * s) / h * self.y[i + 1] + (3 * s2 - 2 * s) * self.f[i + 1])
        return out[0] if scalar else out


# TR-BDF2 coefficients (Hosea & Shampine)
_G = 2.0 - math.sqrt(2.0)
_D = _G / 2.0
_W = math.sqrt(2.0) / 4.0


def integrate_trbdf2(fun, jac, y0, t_span, atol=1e-8, rtol=1e-6, h0=None, max_step=np.inf,
                     min_step=1e-12, max_steps=200_000, newton_iter=6) -> Trajectory:
    """Adaptive TR-BDF2 for y' = fun(t, y) with sparse Jacobian ``jac(t, y)``.

    One trapezoidal stage to t + gamma h, one BDF2 stage to t + h, both using
    the same iteration matrix I - d h J.  The local error estimate is the
    difference to the embedded third-order formula, filtered through that
    matrix to stay bounded on stiff components.
    """
    t0, tf = map(float, t_span)
    if not tf > t0:
        raise ValueError("t_span must be increasing")
    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("initial state must be finite")
    n = len(y)
    I = sp.identity(n, format="csc")
    f = fun(t0, y)
    scale = atol + rtol * np.abs(y)
    if h0 is None:
        d0 = np.sqrt(np.mean((f / scale) ** 2))
        h0 = 0.01 / d0 if d0 > 1e-10 else 1e-3 * (tf - t0)
    h = min(h0, max_step, tf - t0)
    ts, ys, fs = [t0], [y.copy()], [f.copy()]
    nfev = njev = nlu = nrej = 0
    t = t0
    J = None
    J_fresh = False
    while t < tf:
        if len(ts) > max_steps:
            raise StiffnessError("maximum number of steps exceeded", t, y)
        h = min(h, max_step)
        if t + h > tf or t + 1.1 * h >= tf:
            h = tf - t
        if J is None:
            J = jac(t, y)
            njev += 1
            J_fresh = True
        M = (I - (_D * h) * J).tocsc()
        lu = splu(M)
        nlu += 1
        scale = atol + rtol * np.abs(y)

        def solve_stage(rhs_const, coeff, t_new, guess):
            # x = rhs_const + coeff * f(t_new, x), simplified Newton
            x = guess.copy()
            fx = fun(t_new, x)
            nonlocal nfev
            nfev += 1
            prev = None
            for _ in range(newton_iter):
                res = rhs_const + coeff * fx - x
                dx = lu.solve(res)
                x = x + dx
                fx = fun(t_new, x)
                nfev += 1
                dn = np.sqrt(np.mean((dx / scale) ** 2))
                if dn < 1e-3:
                    return x, fx, True
                if prev is not None and dn > 0.9 * prev:
                    return x, fx, False
                prev = dn
            return x, fx, False

        try:
            # trapezoidal stage
            yg, fg, ok = solve_stage(y + _D * h * f, _D * h, t + _G * h, y + _G * h * f)
            if ok:
                # BDF2 stage
                c1 = 1.0 / (_G * (2.0 - _G))
                c0 = (1.0 - _G) ** 2 / (_G * (2.0 - _G))
                guess = yg + (1.0 - _G) * h * fg
                yn, fn, ok = solve_stage(c1 * yg - c0 * y, _D * h, t + h, guess)
        except DomainError:
            ok = False
        if not ok:
            nrej += 1
            if not J_fresh:
                J = None
            else:
                h *= 0.25
            if h < min_step:
                raise StiffnessError(f"step size underflow at t={t:.6g}", t, y)
            continue
        est = h * ((1 - _W) / 3 * f + (3 * _W + 1) / 3 * fg + _D / 3 * fn) - (yn - y)
        err = lu.solve(est)
        en = np.sqrt(np.mean((err / (atol + rtol * np.maximum(np.abs(y), np.abs(yn)))) ** 2))
        if not np.isfinite(en):
            en = 1e10
        if en > 1.0:
            nrej += 1
            h *= max(0.2, 0.9 * en ** (-1 / 3))
            if h < min_step:
                raise StiffnessError(f"step size underflow at t={t:.6g}", t, y)
            continue
        t = t + h
        y, f = yn, fn
        ts.append(t)
        ys.append(y.copy())
        fs.append(f.copy())
        factor = min(5.0, 0.9 * en ** (-1 / 3)) if en > 0 else 5.0
        h *= factor
        J = None
        J_fresh = False
    return Trajectory(np.array(ts), np.array(ys), np.array(fs),
                      {"nfev": nfev, "njev": njev, "nlu": nlu, "nrej": nrej, "nsteps": len(ts) - 1})


def integrate(sys: SemidiscreteSystem, y0, t_span, tol: float = 1e-8, rtol: Optional[float] = None,
              **kw) -> Trajectory:
    """Integrate the semidiscrete system; ``tol`` is absolute, ``rtol`` defaults to 100 * tol."""
    rtol = 100 * tol if rtol is None else rtol
    return integrate_trbdf2(sys.rhs, sys.jacobian, y0, t_span, atol=tol, rtol=rtol, **kw)


def snapshot_rows(traj: Trajectory, sys: SemidiscreteSystem, times):
    """(t, z, V) rows of full-field snapshots for plotting panels."""
    states = traj(np.asarray(times, dtype=float))
    rows = []
    for t, s in zip(np.atleast_1d(times), np.atleast_2d(states)):
        for zj, vj in zip(sys.z, s[:-1]):
            rows.append((float(t), float(zj), float(vj)))
    return rows


def summary_rows(traj: Trajectory, sys: SemidiscreteSystem):
    """(t, gamma, ||V||_2, max V) per accepted step."""
    return [(float(t), float(y[-1]), sys.l2(y[:-1]), float(y[:-1].max())) for t, y in zip(traj.t, traj.y)]
