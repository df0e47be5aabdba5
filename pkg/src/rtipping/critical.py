"""Critical rate r_c(d): bisection, heteroclinic refinement, sweep, transversality.

The heteroclinic refinement uses the fact that the unstable manifold of
(u2*, -a) is one-dimensional: the connection to (u1*, +a) exists exactly when
the forward trajectory lands on the codimension-one stable manifold of the edge
state, i.e. when its component along the edge state's unstable direction
vanishes.  That scalar "miss" is root-found in r.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import mol
from .errors import BracketError, RefinementError, RTippingError, TruncationError, UnresolvedError
from .model import ModelParams, reaction_du
from .pullback import Outcome, Setup, compute_pullback, manifold_trajectory, prepare
from .spectrum import unstable_eigenpair, unstable_left_right

log = logging.getLogger(__name__)

R_MAX = 50.0
N_PROBE = 12
R_PROBE_MIN = 1e-2


@dataclass
class CriticalRateResult:
    d: float
    r_lo: float
    r_hi: float
    outcome_lo: Outcome
    outcome_hi: Outcome
    method: str = "bisection"
    history: list = field(default_factory=list)  # (r, outcome) in evaluation order
    miss_slope: Optional[float] = None

    @property
    def r_c(self) -> float:
        return 0.5 * (self.r_lo + self.r_hi)

    @property
    def width(self) -> float:
        return self.r_hi - self.r_lo


def _outcome(setup: Setup, r: float, **kw) -> Outcome:
    return compute_pullback(setup, r, **kw).classification


def bisect_rc(setup: Setup, r_lo: float, r_hi: float, tol_r: float = 1e-4, known: Optional[dict] = None,
              **kw) -> CriticalRateResult:
    """Bisection on the tracking/extinction classification.

    ``known`` may carry already computed outcomes for the bracket ends.
    """
    known = dict(known or {})
    history = []

    def outcome(r):
        if r in known:
            o = known[r]
        else:
            o = _outcome(setup, r, **kw)
        history.append((r, o))
        return o

    o_lo, o_hi = outcome(r_lo), outcome(r_hi)
    if o_lo is not Outcome.TRACKING or o_hi is not Outcome.EXTINCT:
        raise BracketError(f"[{r_lo}, {r_hi}] is not a tracking/extinct bracket ({o_lo.value}, {o_hi.value})")
    while r_hi - r_lo > tol_r:
        mid = 0.5 * (r_lo + r_hi)
        o = outcome(mid)
        if o is Outcome.TRACKING:
            r_lo = mid
        elif o is Outcome.EXTINCT:
            r_hi = mid
        else:
            raise UnresolvedError(f"classification undetermined at r={mid} after horizon extension",
                                  bracket=(r_lo, r_hi))
    return CriticalRateResult(setup.params.d, r_lo, r_hi, Outcome.TRACKING, Outcome.EXTINCT, history=history)


def bracket_invariant_ok(history) -> bool:
    """No tracking outcome at a rate above an extinct one."""
    tr = [r for r, o in history if o is Outcome.TRACKING]
    ex = [r for r, o in history if o is Outcome.EXTINCT]
    return not tr or not ex or max(tr) < min(ex)


# ---------------------------------------------------------------- heteroclinic


@dataclass
class EdgeDirection:
    eigenvalue: float
    right: np.ndarray
    left: np.ndarray


def edge_direction(setup: Setup, r: float) -> EdgeDirection:
    sys = setup.system.with_rate(r)
    J = sys.jacobian(0.0, sys.pack(setup.V_u, sys.params.a))
    lam, v, l = unstable_left_right(J)
    return EdgeDirection(lam, v, l)


def miss(setup: Setup, r: float, T: float, edge: Optional[EdgeDirection] = None, tol: Optional[float] = None):
    """Normalised component of y(T; r) - (V_u, a) along the edge's left unstable vector.

    Positive values lie on the survival side of the edge state's stable manifold.
    Returns (m, trajectory).
    """
    edge = edge or edge_direction(setup, r)
    sys, traj = manifold_trajectory(setup, r, T, tol=tol)
    dev = traj.y[-1] - sys.pack(setup.V_u, sys.params.a)
    return float(edge.left @ dev / np.linalg.norm(dev)), traj


@dataclass
class HeteroclinicSolution:
    trajectory: mol.Trajectory = field(repr=False)
    r_c: float
    T: float
    miss: float
    start_residual: float  # ||U(t_start) - u2*||_2
    end_residual: float  # ||U(T) - u1*||_2
    phase_residual: float  # |gamma(0)|
    min_edge_distance: float
    bracket: tuple
    miss_slope: float
    params: ModelParams = field(repr=False)

    def to_dict(self):
        return {"r_c": self.r_c, "T": self.T, "miss": self.miss, "start_residual": self.start_residual,
                "end_residual": self.end_residual, "phase_residual": self.phase_residual,
                "min_edge_distance": self.min_edge_distance, "bracket": list(self.bracket),
                "miss_slope": self.miss_slope}


def _root_miss(fun, lo, hi, m_lo, m_hi, tol_m=1e-8, max_iter=100):
    """Secant steps inside a sign-changing bracket, bisection when they leave it."""
    a, b, fa, fb = lo, hi, m_lo, m_hi
    x_prev, f_prev = a, fa
    x, fx = b, fb
    for _ in range(max_iter):
        if fx != f_prev:
            cand = x - fx * (x - x_prev) / (fx - f_prev)
        else:
            cand = 0.5 * (a + b)
        if not (min(a, b) < cand < max(a, b)) or abs(cand - x) > 0.5 * abs(b - a):
            cand = 0.5 * (a + b)
        fc, extra = fun(cand)
        if abs(fc) < tol_m or abs(b - a) < 4 * np.finfo(float).eps * max(abs(a), 1.0):
            return cand, fc, extra, (a, b)
        if (fc > 0) == (fa > 0):
            a, fa = cand, fc
        else:
            b, fb = cand, fc
        x_prev, f_prev, x, fx = x, fx, cand, fc
    return cand, fc, extra, (a, b)


def refine_heteroclinic(setup: Setup, r_lo: float, r_hi: float, T: Optional[float] = None,
                        T_max: float = 4000.0, tol_m: float = 1e-8, start_tol: float = 1e-4,
                        end_tol: float = 1e-3) -> HeteroclinicSolution:
    """Root of the miss function inside a tracking/extinct bracket.

    T doubles from 50/r until the connecting orbit's endpoint residuals meet
    their bounds; the last root is returned with the residuals it achieved, and
    a ``TruncationError`` is raised only when even T_max cannot bring the end
    state within ``end_tol`` of the edge pulse.
    """
    r0 = 0.5 * (r_lo + r_hi)
    edge = edge_direction(setup, r0)
    T = 50.0 / r0 if T is None else T
    best = None
    while True:
        fun = lambda r: miss(setup, r, T, edge)
        m_lo, _ = fun(r_lo)
        m_hi, _ = fun(r_hi)
        if (m_lo > 0) == (m_hi > 0):
            if T * 2 <= T_max:
                T *= 2
                continue
            raise RefinementError(f"miss function has no sign change on [{r_lo}, {r_hi}] (T={T})")
        rc, mc, traj, br = _root_miss(fun, r_lo, r_hi, m_lo, m_hi, tol_m=tol_m)
        sol = _heteroclinic_record(setup, traj, rc, T, mc, br, (m_hi - m_lo) / (r_hi - r_lo))
        best = sol
        if sol.end_residual < end_tol and sol.start_residual < start_tol:
            return sol
        if 2 * T > T_max:
            break
        T *= 2
    raise TruncationError(
        f"endpoint residual {best.end_residual:.3e} above {end_tol} at T={best.T}; best r_c={best.r_c}")


def _heteroclinic_record(setup, traj, rc, T, mc, bracket, slope):
    sys = setup.system.with_rate(rc)
    end_res = sys.l2(traj.y[-1, :-1] - setup.V_u)
    start_res = sys.l2(traj.y[0, :-1] - setup.V_s)
    dists = np.sqrt(np.sum(sys.weights * (traj.V - setup.V_u) ** 2, axis=1))
    gamma0 = float(traj(0.0)[-1]) if traj.t[0] <= 0.0 <= traj.t[-1] else float("nan")
    return HeteroclinicSolution(traj, float(rc), float(T), float(mc), float(start_res), float(end_res),
                                abs(gamma0), float(dists.min()), tuple(bracket), float(slope), sys.params)


def refine_from_bisection(setup: Setup, result: CriticalRateResult, **kw) -> HeteroclinicSolution:
    return refine_heteroclinic(setup, result.r_lo, result.r_hi, **kw)


# ---------------------------------------------------------------- transversality


@dataclass
class TransversalityResult:
    inner_product: float
    tangent: np.ndarray = field(repr=False)
    edge_vector: np.ndarray = field(repr=False)
    degenerate: bool
    raw_norm: float


def variational_matrix(sys: mol.SemidiscreteSystem, Vbar, gamma_c, r_c) -> sp.csc_matrix:
    """Jacobian of the r-augmented system (V, gamma, r) along the base orbit."""
    p = sys.params
    a = p.a
    g = a - gamma_c * gamma_c / a
    dgam = -2.0 * r_c * gamma_c / a
    A = sys.D2 + (r_c * g) * sys.D1 + sp.diags(reaction_du(Vbar, sys.H, p))
    DV = sys.D1 @ Vbar
    border = np.column_stack([dgam * DV, g * DV])
    bottom = sp.csr_matrix(np.array([[dgam, g], [0.0, 0.0]]))
    return sp.bmat([[A, sp.csr_matrix(border)], [None, bottom]], format="csc")


def transversality(het: HeteroclinicSolution, setup: Setup, w0=None, tol: float = 1e-10) -> TransversalityResult:
    """Unit tangent of the r-family of unstable manifolds paired with the edge's unstable direction."""
    sys = setup.system.with_rate(het.r_c)
    traj = het.trajectory
    n = sys.N + 2
    w0 = np.concatenate([np.zeros(sys.N + 1), [1.0]]) if w0 is None else np.asarray(w0, dtype=float)

    def M(t):
        yb = traj(t)
        return variational_matrix(sys, yb[:-1], yb[-1], het.r_c)

    t0, t1 = float(traj.t[0]), float(traj.t[-1])
    if not np.any(w0):
        w_end = np.zeros(n)
    else:
        sol = mol.integrate_trbdf2(lambda t, w: M(t) @ w, lambda t, w: M(t), w0, (t0, t1),
                                   atol=tol, rtol=1e-8, max_step=10.0)
        w_end = sol.y[-1]
    raw = float(np.linalg.norm(w_end))
    tangent = w_end / raw if raw > 0 else w_end
    _, e = unstable_eigenpair(sys.jacobian(0.0, sys.pack(setup.V_u, sys.params.a)))
    ip = float(tangent[:-1] @ e)
    return TransversalityResult(ip, tangent, e, abs(ip) < 1e-10, raw)


# ---------------------------------------------------------------- diagram


@dataclass
class DiagramEntry:
    d: float
    r_c: Optional[float]
    r_lo: Optional[float]
    r_hi: Optional[float]
    status: str  # "tipping", "no-tipping", "error"
    history: list = field(default_factory=list)
    message: str = ""


@dataclass
class TippingDiagram:
    entries: list
    params: dict
    r_max: float
    tol_r: float

    def rows(self):
        return [(e.d, e.r_c, e.r_lo, e.r_hi, e.status) for e in self.entries]


def probe_grid(r_max: float = R_MAX, n: int = N_PROBE, r_min: float = R_PROBE_MIN):
    return np.geomspace(r_min, r_max, n)


def critical_rate_for_d(p_base: ModelParams, d: float, r_max: float = R_MAX, tol_r: float = 1e-3,
                        r_warm: Optional[float] = None, n_probe: int = N_PROBE) -> DiagramEntry:
    p = p_base.replace(a=0.5 * d)
    try:
        setup = prepare(p)
        known = {}
        history = []

        def outcome(r):
            if r not in known:
                known[r] = _outcome(setup, r)
                history.append((r, known[r]))
            return known[r]

        bracket = None
        if r_warm is not None and r_warm <= r_max:
            # r_c decreases with d: the previous critical rate is a likely upper end
            hi = r_warm
            if outcome(hi) is Outcome.EXTINCT:
                lo = hi / 2
                while lo > R_PROBE_MIN / 2 and outcome(lo) is Outcome.EXTINCT:
                    hi, lo = lo, lo / 2
                if outcome(lo) is Outcome.TRACKING:
                    bracket = (lo, hi)
        if bracket is None:
            prev = None
            for r in probe_grid(r_max, n_probe):
                o = outcome(float(r))
                if o is Outcome.EXTINCT:
                    if prev is None:
                        raise BracketError(f"extinct already at the smallest probe rate {r}")
                    bracket = (prev, float(r))
                    break
                if o is Outcome.TRACKING:
                    prev = float(r)
        if bracket is None:
            return DiagramEntry(d, None, None, None, "no-tipping", history)
        res = bisect_rc(setup, *bracket, tol_r=tol_r, known=known)
        history.extend(h for h in res.history if h[0] not in dict(history))
        return DiagramEntry(d, res.r_c, res.r_lo, res.r_hi, "tipping", history)
    except RTippingError as exc:
        log.warning("d=%g failed: %s", d, exc)
        return DiagramEntry(d, None, None, None, "error", message=str(exc))


def _entry_worker(args):
    return critical_rate_for_d(*args)


def sweep_diagram(p_base: ModelParams, d_values: Sequence[float], r_max: float = R_MAX, tol_r: float = 1e-3,
                  workers: int = 1, warm_start: bool = True) -> TippingDiagram:
    d_values = [float(d) for d in d_values]
    if any(b <= a for a, b in zip(d_values, d_values[1:])):
        raise ValueError("d values must be strictly increasing")
    entries = []
    if workers > 1:
        # independent d values in parallel; no warm start across workers
        with ProcessPoolExecutor(max_workers=workers) as ex:
            entries = list(ex.map(_entry_worker, [(p_base, d, r_max, tol_r, None) for d in d_values]))
    else:
        r_warm = None
        for d in d_values:
            e = critical_rate_for_d(p_base, d, r_max, tol_r, r_warm if warm_start else None)
            entries.append(e)
            if e.r_c is not None:
                r_warm = e.r_hi
    return TippingDiagram(entries, p_base.to_dict(), r_max, tol_r)
