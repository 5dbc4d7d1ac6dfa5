"""Closed-form probe/plane capacitances used as oracles and fit-model generators.

All functions take SI inputs (meters) and return farads.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError

EPS0 = 8.8541878128e-12  # F/m, CODATA 2018

MAX_SERIES_TERMS = 10_000_000


class ModelKind(str, enum.Enum):
    PARALLEL_PLATE_IDEAL = "ParallelPlateIdeal"
    SPHERE_EXACT = "SphereExact"
    SPHERE_IPFA = "SphereIPFA"
    SPHERE_PFA = "SpherePFA"
    CYLINDER_EXACT = "CylinderExact"
    CYLINDER_PFA = "CylinderPFA"


class SeriesValue(float):
    """A float that also carries series-truncation metadata."""

    terms: int
    last_term_ratio: float
    truncation_bound: float

    def __new__(cls, value, terms, last_term_ratio, truncation_bound):
        obj = super().__new__(cls, value)
        obj.terms = terms
        obj.last_term_ratio = last_term_ratio
        obj.truncation_bound = truncation_bound
        return obj


def _positive(**kw):
    for k, v in kw.items():
        if not np.all(np.isfinite(v)) or np.any(np.asarray(v) <= 0):
            raise DomainError(f"{k} must be positive and finite")


def cap_parallel_ideal(A, d):
    """``eps0 * A / d``."""
    _positive(A=A, d=d)
    return EPS0 * A / d


def energy_capacitance(W_el, V):
    """Capacitance from stored energy, ``C = 2 W / V**2``."""
    return 2.0 * W_el / V**2


def _sphere_sum(alpha, tol):
    """``sum_{n>=1} 1/sinh(n*alpha)`` truncated at a relative size ``tol``.

    Terms decay like ``2*exp(-n*alpha)``, so the tail after the last kept term
    ``t_N`` is bounded by ``t_N * r/(1-r)`` with ``r = exp(-alpha)``.
    """
    r = math.exp(-alpha)
    # chunks of terms keep the loop in numpy for tiny alpha
    total = 0.0
    n0 = 1
    chunk = 64
    while True:
        n = np.arange(n0, n0 + chunk, dtype=float)
        with np.errstate(over="ignore"):
            terms = 1.0 / np.sinh(n * alpha)
        csum = total + np.cumsum(terms)
        # stop once both the term and the bound on the remaining tail are small
        hit = np.nonzero(terms * max(1.0, r / (1 - r)) < tol * csum)[0]
        if len(hit):
            k = hit[0]
            total = float(csum[k])
            last = float(terms[k])
            nterms = int(n0 + k)
            break
        total = float(csum[-1])
        n0 += chunk
        chunk = min(chunk * 2, 1 << 20)
        if n0 > MAX_SERIES_TERMS:
            warnings.warn("sphere series did not reach tolerance within the term cap",
                          RuntimeWarning, stacklevel=3)
            last = float(terms[-1])
            nterms = n0 - 1
            break
    bound = last * r / (1 - r) if r < 1 else math.inf
    return total, nterms, last / total, bound


def cap_sphere_exact(R, d, tol=1e-12):
    """Sphere of radius ``R`` at gap ``d`` from a grounded infinite plane.

    ``C = 4 pi eps0 R sinh(a) sum_n 1/sinh(n a)`` with ``cosh(a) = 1 + d/R``.
    The returned :class:`SeriesValue` records the number of terms and an
    upper bound on the truncated tail (in farads).
    """
    _positive(R=R, d=d, tol=tol)
    alpha = math.acosh(1.0 + d / R)
    s, n, ratio, bound = _sphere_sum(alpha, tol)
    pref = 4 * math.pi * EPS0 * R * math.sinh(alpha)
    return SeriesValue(pref * s, n, ratio, pref * bound)


def cap_sphere_exact_derivative(R, d, tol=1e-14):
    """Analytic ``dC/dd`` of :func:`cap_sphere_exact` (term-wise differentiation)."""
    _positive(R=R, d=d)
    alpha = math.acosh(1.0 + d / R)
    dalpha = 1.0 / (R * math.sinh(alpha))
    total = 0.0
    dtotal = 0.0
    n = 1
    while True:
        sn = math.sinh(n * alpha)
        t = 1.0 / sn
        dt = -n * math.cosh(n * alpha) / sn**2
        total += t
        dtotal += dt
        if abs(dt) < tol * abs(dtotal) and t < tol * total:
            break
        n += 1
        if n > MAX_SERIES_TERMS:
            break
    pref = 4 * math.pi * EPS0 * R
    return pref * (math.cosh(alpha) * total + math.sinh(alpha) * dtotal) * dalpha


def cap_sphere_ipfa(R, d, theta=0.5):
    """Small-gap sphere-plane expansion ``2 pi eps0 R (ln(R/d) + ln 2 + 23/20 + theta/63)``.

    ``theta`` is only known to lie in ``[0, 1]``; evaluate both ends to
    bracket the exact value.
    """
    _positive(R=R, d=d)
    if not 0.0 <= theta <= 1.0:
        raise DomainError("theta must lie in [0, 1]")
    if np.any(np.asarray(d) / R >= 1.0):
        raise DomainError("the small-gap expansion needs d/R < 1")
    return 2 * math.pi * EPS0 * R * (np.log(R / d) + math.log(2) + 23 / 20 + theta / 63)


def cap_sphere_pfa(R, d):
    """Distance-dependent part of the sphere-plane expansion, ``2 pi eps0 R ln(R/d)``."""
    _positive(R=R, d=d)
    return 2 * math.pi * EPS0 * R * np.log(R / d)


def cap_cylinder_exact(R, L, d):
    """Cylinder (radius ``R``, length ``L``) parallel to an infinite plane at gap ``d``."""
    _positive(R=R, L=L, d=d)
    return 2 * math.pi * EPS0 * L / np.arccosh(1.0 + d / R)


def cap_cylinder_exact_derivatives(R, L, d):
    """First and second ``d``-derivatives of :func:`cap_cylinder_exact`."""
    _positive(R=R, L=L, d=d)
    x = 1.0 + np.asarray(d, float) / R
    a = np.arccosh(x)
    s = np.sqrt(x * x - 1.0)
    k = 2 * math.pi * EPS0 * L
    da = 1.0 / (R * s)
    dda = -x / (R * R * s**3)
    c1 = -k * da / a**2
    c2 = k * (2 * da**2 / a**3 - dda / a**2)
    return c1, c2


PFA_CYLINDER_VALIDITY = 0.1


def cap_cylinder_pfa(R, L, d):
    """Leading small-gap term ``sqrt(2R) pi eps0 L / sqrt(d)``; warns for ``d/R >= 0.1``."""
    _positive(R=R, L=L, d=d)
    if np.any(np.asarray(d) / R >= PFA_CYLINDER_VALIDITY):
        warnings.warn("cylinder PFA used outside the small-gap regime (d/R >= 0.1)",
                      RuntimeWarning, stacklevel=2)
    return math.sqrt(2 * R) * math.pi * EPS0 * L / np.sqrt(d)


@dataclass(frozen=True)
class AnalyticModel:
    """A named closed-form model with its geometric parameters."""

    kind: ModelKind
    A: float | None = None
    R: float | None = None
    L: float | None = None
    theta: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        for k in ("A", "R", "L"):
            v = getattr(self, k)
            if v is not None and not v > 0:
                raise DomainError(f"{k} must be positive")
        if not 0 <= self.theta <= 1:
            raise DomainError("theta must lie in [0, 1]")

    def __call__(self, d):
        k = self.kind
        if k is ModelKind.PARALLEL_PLATE_IDEAL:
            return cap_parallel_ideal(self.A, d)
        if k is ModelKind.SPHERE_EXACT:
            return np.array([cap_sphere_exact(self.R, x) for x in np.atleast_1d(d)]).reshape(np.shape(d))
        if k is ModelKind.SPHERE_IPFA:
            return cap_sphere_ipfa(self.R, d, self.theta)
        if k is ModelKind.SPHERE_PFA:
            return cap_sphere_pfa(self.R, d)
        if k is ModelKind.CYLINDER_EXACT:
            return cap_cylinder_exact(self.R, self.L, d)
        return cap_cylinder_pfa(self.R, self.L, d)
