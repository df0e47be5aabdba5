"""Steady pulses of the static-habitat equation u'' + f(u, H(z)) = 0.

A pulse is a homoclinic orbit of (u, v)' = (v, -f(u, H(z))) to the origin.  It
is computed on the half line [-Z, 0] as a doubled system: (u, v) describes the
left half and ut(z) = u(-z), vt(z) = v(-z) the right half, so that ut' = -vt
and vt' = f(ut, H(-z)).  The origin is a saddle
with eigenpairs (+beta, (1, beta)) and (-beta, (1, -beta)); the far-end rows
kill the component along the direction that grows away from the origin.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .collocation import BvpProblem, BvpSolution, solve_bvp
from .errors import InvalidParameterError, WrongBranchError
from .model import ModelParams, habitat, reaction, reaction_du

KINDS = ("stable", "unstable", "trivial")

# peak guesses that select each branch
PEAK_GUESS = {"stable": 0.56, "unstable": 0.15}


@dataclass
class PulseProfile:
    kind: str
    z: np.ndarray
    u: np.ndarray
    v: np.ndarray
    xi: float
    params: ModelParams
    residual: float = 0.0
    bvp: Optional[BvpSolution] = field(default=None, repr=False)

    def __call__(self, zq):
        """Pulse values at arbitrary positions (cubic Hermite, zero outside [-Z, Z])."""
        return self._eval(zq, 0)

    def derivative(self, zq):
        return self._eval(zq, 1)

    def _eval(self, zq, which):
        zq = np.asarray(zq, dtype=float)
        flat = np.atleast_1d(zq)
        if self.bvp is None:
            out = np.interp(flat, self.z, self.u if which == 0 else self.v, left=0.0, right=0.0)
        else:
            # even profile: evaluate the left half at -|z|
            out = self.bvp(-np.minimum(np.abs(flat), self.params.Z))[which]
            if which == 1:
                out = out * np.where(flat <= 0, 1.0, -1.0)
            out = np.where(np.abs(flat) <= self.params.Z, out, 0.0)
        return out.reshape(np.shape(zq)) if np.ndim(zq) else float(out[0])

    @property
    def half_mesh(self) -> np.ndarray:
        return self.z[self.z <= 0]


def _doubled_problem(p: ModelParams) -> BvpProblem:
    beta, L = p.beta, p.L

    def fun(z, y, xi):
        u, v, ut, vt = y
        hl, hr = habitat(z, L), habitat(-z, L)
        return np.vstack([v, -reaction(u, hl, p), -vt, reaction(ut, hr, p)])

    def fun_jac(z, y, xi):
        u, _, ut, _ = y
        hl, hr = habitat(z, L), habitat(-z, L)
        m = len(z)
        J = np.zeros((4, 4, m))
        J[0, 1] = 1.0
        J[1, 0] = -reaction_du(u, hl, p)
        J[2, 3] = -1.0
        J[3, 2] = reaction_du(ut, hr, p)
        return J, np.zeros((4, 1, m))

    def bc(ya, yb, yint, xi):
        return np.array([
            yb[0] - yb[2],
            yb[1] - yb[3],
            beta * ya[0] - ya[1],
            beta * ya[2] + ya[3],
            yb[0] - xi[0],
        ])

    return BvpProblem(fun=fun, bc=bc, n_y=4, n_p=1, z_lo=-p.Z, z_hi=0.0, fun_jac=fun_jac)


def initial_guess(kind: str, p: ModelParams, z: np.ndarray, xi: Optional[float] = None):
    """Doubled-system guess built from a closed-form bump and its derivative."""
    xi = PEAK_GUESS[kind] if xi is None else xi
    if kind == "unstable":
        # width matched to the far-field decay rate; a unit-width sech falls to u = 0
        w = p.beta
        u = lambda s: xi / np.cosh(w * s)
        du = lambda s: -w * xi * np.tanh(w * s) / np.cosh(w * s)
    else:
        u = lambda s: 0.5 * xi * (np.tanh(s + p.L / 2) - np.tanh(s - p.L / 2))
        du = lambda s: 0.5 * xi * (1 / np.cosh(s + p.L / 2) ** 2 - 1 / np.cosh(s - p.L / 2) ** 2)
    y = np.vstack([u(z), du(z), u(-z), du(-z)])
    return y, xi


def compute_pulse(kind: str, p: ModelParams, n_init: int = 301, xi_guess: Optional[float] = None,
                  max_nodes: int = 20_000) -> PulseProfile:
    if kind not in KINDS:
        raise InvalidParameterError(f"kind must be one of {KINDS}")
    if kind == "trivial":
        z = np.linspace(-p.Z, p.Z, 2 * n_init - 1)
        return PulseProfile("trivial", z, np.zeros_like(z), np.zeros_like(z), 0.0, p)
    problem = _doubled_problem(p)
    z0 = np.linspace(-p.Z, 0.0, n_init)
    y0, xi0 = initial_guess(kind, p, z0, xi_guess)
    sol = solve_bvp(problem, z0, y0, p=[xi0], tol=p.tol_bvp, max_nodes=max_nodes)
    xi = float(sol.p[0])
    if xi < 1e-4:
        raise WrongBranchError(f"{kind} pulse solve converged to the trivial state (xi={xi:.3e})")
    zh = sol.z
    u_l, v_l, u_r, v_r = sol.y
    z = np.concatenate([zh, -zh[-2::-1]])
    u = np.concatenate([u_l, u_r[-2::-1]])
    v = np.concatenate([v_l, v_r[-2::-1]])
    return PulseProfile(kind, z, u, v, xi, p, residual=sol.residual_norm, bvp=_HalfLine(sol))


class _HalfLine:
    """Adapter exposing (u, u') of the left half from the doubled BVP solution."""

    def __init__(self, sol: BvpSolution):
        self.sol = sol

    def __call__(self, zq):
        y = self.sol(zq)
        return y[0], y[1]


def pointwise_order(upper: PulseProfile, lower: PulseProfile, interior_only: bool = False) -> dict:
    """Check upper(z) > lower(z) on the upper profile's mesh.

    With ``interior_only`` the far tails (where both decay below 1e-6) are
    ignored, which is what makes the check meaningful against the trivial state.
    """
    z = upper.z
    gap = upper(z) - lower(z)
    mask = np.ones_like(z, dtype=bool)
    caveat = None
    if interior_only:
        mask = np.maximum(np.abs(upper(z)), np.abs(lower(z))) > 1e-6
        caveat = "tails below 1e-6 excluded (both profiles decay to 0 there)"
    g = gap[mask]
    return {"min_gap": float(g.min()), "argmin": float(z[mask][np.argmin(g)]),
            "verdict": bool(g.min() > 0), "caveat": caveat}


def static_residual(pulse: PulseProfile, D2: np.ndarray | None = None) -> np.ndarray:
    """u'' + f(u, H) on the pulse mesh; uses the given second-derivative matrix."""
    from .mol import diff_matrices
    if D2 is None:
        _, D2 = diff_matrices(pulse.z)
    return D2 @ pulse.u + reaction(pulse.u, habitat(pulse.z, pulse.params.L), pulse.params)


def canonical_mesh(pulse: PulseProfile, max_spacing: Optional[float] = None) -> np.ndarray:
    """Whole-line spatial mesh for the method of lines, taken from the pulse solve.

    ``max_spacing`` optionally subdivides coarse tail intervals.
    """
    z = np.unique(pulse.z)
    if max_spacing is None:
        return z
    out = [z[:1]]
    for a, b in zip(z[:-1], z[1:]):
        k = int(np.ceil((b - a) / max_spacing))
        out.append(a + (b - a) * np.arange(1, k + 1) / k)
    z = np.concatenate(out)
    # keep exact mirror symmetry
    half = z[z <= 0]
    return np.concatenate([half, -half[-2::-1]])
