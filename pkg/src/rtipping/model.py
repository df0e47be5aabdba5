"""Reaction term, habitat profile, shift field and the parameter record.

All functions are vectorised over numpy arrays and free of side effects.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, InvalidParameterError


@dataclass(frozen=True)
class ModelParams:
    beta: float = 0.15
    lambda_r: Optional[float] = None  # None -> 4*beta
    L: float = 25.0
    a: float = 15.65
    r: float = 1.0
    Z: float = 150.0
    tol_bvp: float = 1e-8
    tol_ode: float = 1e-8
    tol_newton: float = 1e-10

    def __post_init__(self):
        if self.lambda_r is None:
            object.__setattr__(self, "lambda_r", 4.0 * self.beta)
        for name in ("beta", "L", "a", "r", "Z", "tol_bvp", "tol_ode", "tol_newton"):
            val = getattr(self, name)
            if not (isinstance(val, (int, float)) and math.isfinite(val) and val > 0):
                raise InvalidParameterError(f"{name} must be a finite positive number, got {val!r}")
        if not math.isfinite(self.lambda_r) or self.lambda_r < 0:
            raise InvalidParameterError(f"lambda_r must be finite and >= 0, got {self.lambda_r!r}")

    @property
    def d(self) -> float:
        return 2.0 * self.a

    def replace(self, **changes) -> "ModelParams":
        # an explicit beta change without lambda_r keeps the 4*beta coupling
        if "beta" in changes and "lambda_r" not in changes and self.lambda_r == 4.0 * self.beta:
            changes["lambda_r"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def habitat(x, L):
    """Normalised habitat density, equal to 1 at the centre and decaying like exp(-2|x|)."""
    if not (np.isscalar(L) and math.isfinite(L) and L > 0):
        raise InvalidParameterError(f"habitat width must be positive, got {L!r}")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError("habitat position must be finite")
    h = (np.tanh(x + 0.5 * L) - np.tanh(x - 0.5 * L)) / (2.0 * np.tanh(0.5 * L))
    return h if h.ndim else float(h)


def _check_finite(*args):
    for v in args:
        if not np.all(np.isfinite(v)):
            raise InvalidParameterError("non-finite input to reaction term")


def reaction(u, h, p: ModelParams):
    u = np.asarray(u, dtype=float)
    _check_finite(u, h)
    return -p.beta**2 * u + p.lambda_r * h * u**2 - u**3


def reaction_du(u, h, p: ModelParams):
    u = np.asarray(u, dtype=float)
    _check_finite(u, h)
    return -p.beta**2 + 2.0 * p.lambda_r * h * u - 3.0 * u**2


@dataclass(frozen=True)
class ShiftField:
    """Velocity field g(gamma) that moves the habitat from -a to +a.

    Subclasses must keep g(+-a) = 0, g'(+-a) != 0 and g > 0 strictly inside.
    The default is the quadratic field a - gamma**2/a, whose flow is a*tanh(r t).
    """

    a: float

    def _check(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        if np.any(np.abs(gamma) > self.a * (1 + 1e-12)):
            raise DomainError(f"|gamma| must not exceed a={self.a}")
        return gamma

    def g(self, gamma):
        gamma = self._check(gamma)
        return self.a - gamma**2 / self.a

    def dg(self, gamma):
        gamma = self._check(gamma)
        return -2.0 * gamma / self.a

    def flow(self, t, r):
        """Solution of gamma' = r g(gamma) with gamma(0) = 0."""
        return self.a * np.tanh(r * np.asarray(t, dtype=float))

    def time_of(self, gamma, r):
        """Inverse of :meth:`flow`."""
        return np.arctanh(np.asarray(gamma, dtype=float) / self.a) / r


def shift_velocity(gamma, a):
    return ShiftField(a).g(gamma)


def ramp(t, r, a):
    if not r > 0:
        raise InvalidParameterError("rate must be positive")
    out = ShiftField(a).flow(t, r)
    return out if np.ndim(out) else float(out)
