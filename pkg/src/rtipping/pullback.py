"""Pullback attractors: the unstable-manifold trajectory of (u2*, -a).

The run starts at (V_s, -a) + eps * X, where X is the unstable eigenvector of
the semidiscrete Jacobian, and is integrated forward.  The start time is placed
where the tanh ramp passes the initial gamma, so gamma(t) = a tanh(r t) along
the trajectory and gamma(0) = 0.  Because gamma starts below the absolute
tolerance away from -a, the time origin is re-fixed once gamma crosses zero.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import identity
from scipy.optimize import brentq
from scipy.sparse.linalg import splu

from . import mol
from .errors import PreconditionError, StructureError
from .model import ModelParams
from .pulses import PulseProfile, canonical_mesh, compute_pulse

log = logging.getLogger(__name__)

EPSILON = 1e-8
T_END = 1000.0
T_END_MAX = 16_000.0
MAX_SPACING = 0.5
PHASE_SPAN = 5.0  # integrate to 5 / r before fixing the time origin


class Outcome(str, enum.Enum):
    TRACKING = "Tracking"
    EXTINCT = "Extinct"
    UNDETERMINED = "Undetermined"


@dataclass
class Setup:
    """Everything that depends on (beta, lambda_r, L, Z, a) but not on r."""

    params: ModelParams
    stable: PulseProfile
    unstable: PulseProfile
    system: mol.SemidiscreteSystem

    @property
    def V_s(self):
        return self.system.V_s

    @property
    def V_u(self):
        return self.system.V_u

    def thresholds(self):
        d = 0.1 * self.system.l2(self.V_s)
        return d, d


def prepare(p: ModelParams, max_spacing: Optional[float] = MAX_SPACING) -> Setup:
    """Pulses, MOL mesh and the two discrete fixed points."""
    stable = compute_pulse("stable", p)
    unstable = compute_pulse("unstable", p)
    z = canonical_mesh(stable, max_spacing)
    sys = mol.build_system(z, p)
    V_s, _ = mol.find_fixed_point(sys, stable(z), -p.a)
    V_u, _ = mol.find_fixed_point(sys, unstable(z), p.a)
    sys.V_s, sys.V_u = V_s, V_u
    return Setup(p, stable, unstable, sys)


def manifold_direction(sys: mol.SemidiscreteSystem):
    """Unstable eigenpair at (V_s, -a), oriented towards gamma > -a.

    The Jacobian is block upper triangular with the gamma eigenvalue 2r on the
    diagonal; the V-block is the stable static linearisation, so the
    eigenvector is (x, 1) with (A - 2r) x = -2r D1 V_s.
    """
    p = sys.params
    lam = 2.0 * p.r
    A = sys.static_operator(sys.V_s)
    b = lam * (sys.D1 @ sys.V_s)
    x = splu((A - lam * identity(sys.N, format="csc")).tocsc()).solve(-b)
    X = np.concatenate([x, [1.0]])
    return lam, X / np.linalg.norm(X)


@dataclass
class PullbackRun:
    params: ModelParams
    trajectory: mol.Trajectory = field(repr=False)
    classification: Outcome
    dist_stable: float  # ||U(t_end) - u2*||_2
    norm_end: float  # ||U(t_end)||_2
    sup_error: float  # sup_t max_z |U(t) - u2*|
    t_end: float
    t_start: float
    initial_deviation: float


def classify(dist_stable: float, norm_end: float, delta1: float, delta2: float) -> Outcome:
    tracking = dist_stable < delta1
    extinct = norm_end < delta2
    if tracking and not extinct:
        return Outcome.TRACKING
    if extinct and not tracking:
        return Outcome.EXTINCT
    return Outcome.UNDETERMINED


def initial_state(setup: Setup, r: float, eps: float = EPSILON):
    sys = setup.system.with_rate(r)
    _, X = manifold_direction(sys)
    y0 = sys.pack(setup.V_s, -sys.params.a) + eps * X
    t0 = float(sys.shift.time_of(y0[-1], r))
    return sys, y0, t0


def align_phase(traj: mol.Trajectory) -> mol.Trajectory:
    """Shift time so that gamma crosses zero exactly at t = 0.

    gamma starts within eps of -a, below the absolute tolerance, so the
    integrated ramp can drift from a tanh(r t) by an O(1) time shift.
    """
    g = traj.gamma
    k = np.nonzero(g >= 0.0)[0]
    if len(k) == 0 or k[0] == 0:
        raise StructureError("trajectory does not cross gamma = 0")
    i = k[0]
    ts = brentq(lambda t: traj(t)[-1], traj.t[i - 1], traj.t[i], xtol=1e-14, rtol=4 * np.finfo(float).eps)
    return traj.shifted(ts)


def _join(first: mol.Trajectory, second: mol.Trajectory) -> mol.Trajectory:
    return mol.Trajectory(np.concatenate([first.t, second.t[1:]]),
                          np.concatenate([first.y, second.y[1:]]),
                          np.concatenate([first.f, second.f[1:]]),
                          {k: first.stats.get(k, 0) + second.stats.get(k, 0)
                           for k in set(first.stats) | set(second.stats)})


def manifold_trajectory(setup: Setup, r: float, t_end: float, eps: float = EPSILON,
                        tol: Optional[float] = None):
    """Unstable-manifold trajectory on [t_start, t_end] with gamma(0) = 0.

    Returns (system, trajectory).
    """
    tol = setup.params.tol_ode if tol is None else tol
    sys, y0, t0 = initial_state(setup, r, eps)
    t_phase = min(PHASE_SPAN / r, t_end)
    head = align_phase(mol.integrate(sys, y0, (t0, t_phase), tol=tol))
    if head.t[-1] >= t_end:
        return sys, head
    tail = mol.integrate(sys, head.y[-1], (head.t[-1], t_end), tol=tol)
    return sys, _join(head, tail)


def _run(setup: Setup, r: float, t_end: float, eps: float, tol: float, t_start=None, y_start=None,
         traj_prev=None):
    if t_start is None:
        return manifold_trajectory(setup, r, t_end, eps, tol)
    sys = setup.system.with_rate(r)
    traj = mol.integrate(sys, y_start, (t_start, t_end), tol=tol)
    return sys, (traj if traj_prev is None else _join(traj_prev, traj))


def compute_pullback(setup: Setup, r: float, t_end: float = T_END, eps: float = EPSILON,
                     tol: Optional[float] = None, extend: bool = True,
                     t_end_max: float = T_END_MAX) -> PullbackRun:
    """Integrate the pullback attractor to ``t_end`` and classify it.

    Undetermined outcomes are re-integrated with a doubled horizon up to
    ``t_end_max`` when ``extend`` is set.
    """
    p = setup.params.replace(r=r)
    tol = p.tol_ode if tol is None else tol
    sys, traj = _run(setup, r, t_end, eps, tol)
    d1, d2 = setup.thresholds()
    while True:
        U = traj.y[-1, :-1]
        dist = sys.l2(U - setup.V_s)
        nrm = sys.l2(U)
        outcome = classify(dist, nrm, d1, d2)
        if outcome is not Outcome.UNDETERMINED or not extend or 2 * t_end > t_end_max:
            break
        log.info("r=%.8g undetermined at t=%g, extending horizon", r, t_end)
        new_end = 2 * t_end
        _, traj = _run(setup, r, new_end, eps, tol, t_start=traj.t[-1], y_start=traj.y[-1], traj_prev=traj)
        t_end = new_end
    sup_err = float(np.max(np.abs(traj.V - setup.V_s), axis=1).max())
    init_dev = float(np.linalg.norm(traj.y[0] - sys.pack(setup.V_s, -p.a)))
    return PullbackRun(p, traj, outcome, dist, nrm, sup_err, t_end, float(traj.t[0]), init_dev)


def tracking_error(setup: Setup, r: float, t_end: Optional[float] = None, **kw) -> float:
    """sup over time of max over z of |U - u2*| for a tracking run.

    The horizon defaults to max(1000, 30 / r) so slow ramps finish.
    """
    t_end = max(T_END, 30.0 / r) if t_end is None else t_end
    run = compute_pullback(setup, r, t_end=t_end, **kw)
    if run.classification is not Outcome.TRACKING:
        raise PreconditionError(f"tracking error requested for a {run.classification.value} run at r={r}")
    return run.sup_error


def trajectory_rows(run: PullbackRun, sys: mol.SemidiscreteSystem):
    return mol.summary_rows(run.trajectory, sys)


def check_unstable_structure(setup: Setup, r: float):
    """Dense check that (V_s, -a) has exactly one unstable direction."""
    from .spectrum import unstable_eigenpair
    sys = setup.system.with_rate(r)
    J = sys.jacobian(0.0, sys.pack(setup.V_s, -sys.params.a))
    return unstable_eigenpair(J)
