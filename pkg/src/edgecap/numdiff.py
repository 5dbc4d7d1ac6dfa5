"""Force and frequency-shift observables from sampled capacitance curves.

Derivatives come from the quadratic (Lagrange three-point) interpolant on
possibly uneven grids, evaluated in a transformed coordinate system and
mapped back to ``d`` by the chain rule:

* ``Log``:     ``u = ln d``, ``w = ln C``  -- exact for pure power laws;
* ``SemiLog``: ``u = ln d``, ``w = C``     -- exact for ``C0 + K ln d``.

Interior points use the centred stencil (i-1, i, i+1); the two end points
use the one-sided stencils (0, 1, 2) and (n-3, n-2, n-1).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidSpecError


class Transform(str, enum.Enum):
    LOG = "Log"
    SEMILOG = "SemiLog"


class Observable(str, enum.Enum):
    FORCE = "force"
    CURVATURE = "curvature"
    SLOPE = "dC/dd"
    SECOND = "d2C/dd2"


@dataclass(frozen=True)
class CapacitanceCurve:
    """Ordered ``(d, C)`` samples in SI units with free-form metadata."""

    d: np.ndarray
    C: np.ndarray
    geometry: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.array(self.d, dtype=float).ravel()
        C = np.array(self.C, dtype=float).ravel()
        if d.shape != C.shape:
            raise InvalidSpecError("d and C must have the same length")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(C))):
            raise InvalidSpecError("curve samples must be finite")
        if len(d) > 1 and np.any(np.diff(d) <= 0):
            raise InvalidSpecError("d must be strictly increasing")
        if np.any(d <= 0) or np.any(C <= 0):
            raise InvalidSpecError("d and C must be strictly positive")
        d.flags.writeable = False
        C.flags.writeable = False
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "C", C)

    def __len__(self):
        return len(self.d)

    @classmethod
    def from_function(cls, fn, d, **meta):
        d = np.asarray(d, float)
        return cls(d, np.array([float(fn(x)) for x in d]), geometry=meta)

    def window(self, d_min=None, d_max=None):
        """Samples with ``d_min <= d <= d_max`` (a small relative slack is allowed)."""
        lo = -np.inf if d_min is None else d_min * (1 - 1e-9)
        hi = np.inf if d_max is None else d_max * (1 + 1e-9)
        m = (self.d >= lo) & (self.d <= hi)
        return CapacitanceCurve(self.d[m], self.C[m], dict(self.geometry), dict(self.solver))


@dataclass(frozen=True)
class DerivedCurve:
    """``(d, y)`` samples of a derivative-based observable."""

    d: np.ndarray
    y: np.ndarray
    observable: str
    transform: str
    stencil: str = "lagrange3 (centred interior, one-sided ends)"
    parameters: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.d)


# ---------------------------------------------------------------------------
# stencils


def _weights(x0, x1, x2, at):
    """First- and second-derivative weights of the quadratic through three nodes."""
    if x0 == x1 or x1 == x2 or x0 == x2:
        raise InvalidSpecError("lagrange3 abscissae must be distinct")
    w1 = np.array([
        (2 * at - x1 - x2) / ((x0 - x1) * (x0 - x2)),
        (2 * at - x0 - x2) / ((x1 - x0) * (x1 - x2)),
        (2 * at - x0 - x1) / ((x2 - x0) * (x2 - x1)),
    ])
    w2 = np.array([
        2 / ((x0 - x1) * (x0 - x2)),
        2 / ((x1 - x0) * (x1 - x2)),
        2 / ((x2 - x0) * (x2 - x1)),
    ])
    return w1, w2


def lagrange3_derivative(xs, ys, at):
    """Derivative at ``at`` of the parabola through three (unevenly spaced) points."""
    xs = [float(v) for v in xs]
    ys = np.asarray(ys, float)
    if len(xs) != 3 or ys.shape != (3,):
        raise InvalidSpecError("lagrange3_derivative needs exactly three points")
    w1, _ = _weights(*xs, float(at))
    return float(w1 @ ys)


def lagrange3_second_derivative(xs, ys):
    """Second derivative of the parabola through three points (constant)."""
    xs = [float(v) for v in xs]
    _, w2 = _weights(*xs, xs[1])
    return float(w2 @ np.asarray(ys, float))


def _stencil_derivatives(u, w):
    """First and second derivative of ``w(u)`` at every node."""
    n = len(u)
    if n < 3:
        raise InvalidSpecError("at least three samples are needed for a three-point stencil")
    d1 = np.empty(n)
    d2 = np.empty(n)
    for i in range(n):
        j = min(max(i - 1, 0), n - 3)
        w1, w2 = _weights(u[j], u[j + 1], u[j + 2], u[i])
        d1[i] = w1 @ w[j:j + 3]
        d2[i] = w2 @ w[j:j + 3]
    return d1, d2


def capacitance_derivatives(curve, transform=Transform.LOG):
    """``(dC/dd, d2C/dd2)`` at every sample via the chosen transformed domain."""
    transform = Transform(transform)
    d, C = curve.d, curve.C
    u = np.log(d)
    if transform is Transform.LOG:
        w1, w2 = _stencil_derivatives(u, np.log(C))
        c1 = C / d * w1
        c2 = C / d**2 * (w1 * w1 - w1 + w2)
    else:
        w1, w2 = _stencil_derivatives(u, C)
        c1 = w1 / d
        c2 = (w2 - w1) / d**2
    return c1, c2


def _check_finite(**kw):
    for k, v in kw.items():
        if not math.isfinite(v):
            raise InvalidSpecError(f"{k} must be finite")


def force_curve(curve, V=1.0, transform=Transform.LOG):
    """Electrostatic force ``F = -(1/2) dC/dd V**2`` at every sample (newtons)."""
    _check_finite(V=V)
    c1, _ = capacitance_derivatives(curve, transform)
    return DerivedCurve(curve.d.copy(), -0.5 * c1 * V**2, Observable.FORCE.value,
                        Transform(transform).value, parameters={"V": V})


def curvature_curve(curve, V=1.0, m_eff=1.0, transform=Transform.LOG):
    """Square frequency shift ``d2C/dd2 V**2 / (8 pi**2 m_eff)`` (Hz**2)."""
    _check_finite(V=V, m_eff=m_eff)
    if not m_eff > 0:
        raise InvalidSpecError("m_eff must be positive")
    _, c2 = capacitance_derivatives(curve, transform)
    return DerivedCurve(curve.d.copy(), c2 * V**2 / (8 * math.pi**2 * m_eff),
                        Observable.CURVATURE.value, Transform(transform).value,
                        parameters={"V": V, "m_eff": m_eff})


def convergence_order(errors, spacings):
    """Least-squares slope of ``log(error)`` versus ``log(spacing)``."""
    e = np.log(np.asarray(errors, float))
    h = np.log(np.asarray(spacings, float))
    return float(np.polyfit(h, e, 1)[0])
