"""Nonlinear least-squares calibration fits with a distance offset.

Three models share the parameter names ``offset`` (``C0`` or ``F0``), ``K``,
``d0`` and ``eps``::

    PowerLawCap    C = C0 + K / (d - d0)**eps
    LogCap         C = C0 + K * ln(d - d0)
    PowerLawForce  F = F0 + K V**2 / (d - d0)**eps

Fits use a Levenberg-Marquardt iteration with analytic Jacobians, solved as
a scaled linear least-squares problem at each step. ``d0`` is kept below
``0.9 * min(d)`` of the fit window by rejecting any step that would leave
that region (the damping is then increased), so ``(d - d0)**eps`` stays real.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, validate_data

from .exceptions import FitConvergenceError, InvalidSpecError
from .numdiff import CapacitanceCurve, DerivedCurve

logger = logging.getLogger(__name__)

PARAMS = ("offset", "K", "d0", "eps")
D0_LIMIT = 0.9


class ModelKind(str, enum.Enum):
    POWER_LAW_CAP = "PowerLawCap"
    LOG_CAP = "LogCap"
    POWER_LAW_FORCE = "PowerLawForce"


class Weights(str, enum.Enum):
    UNIFORM = "Uniform"
    RELATIVE = "RelativeError"


_DEFAULT_FREE = {
    ModelKind.POWER_LAW_CAP: ("K", "d0", "eps"),
    ModelKind.LOG_CAP: ("offset", "K", "d0"),
    ModelKind.POWER_LAW_FORCE: ("K", "d0", "eps"),
}


@dataclass(frozen=True)
class FitModel:
    """Model kind plus which parameters are free; the rest take ``fixed`` values.

    Unlisted fixed values default to ``offset = 0``, ``d0 = 0`` and
    ``eps = eps_ideal`` (1 for caps, 2 for forces unless overridden).
    ``V`` is the drive voltage of force models.
    """

    kind: ModelKind = ModelKind.POWER_LAW_CAP
    free: tuple = ()
    fixed: dict = field(default_factory=dict)
    V: float = 1.0
    eps_ideal: float | None = None

    def __post_init__(self):
        kind = ModelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        free = tuple(self.free) or _DEFAULT_FREE[kind]
        for p in free:
            if p not in PARAMS:
                raise InvalidSpecError(f"unknown parameter {p!r}; expected one of {PARAMS}")
        if kind is ModelKind.LOG_CAP and "eps" in free:
            raise InvalidSpecError("the logarithmic model has no exponent")
        if "K" not in free:
            raise InvalidSpecError("K must be a free parameter")
        object.__setattr__(self, "free", tuple(p for p in PARAMS if p in free))
        for k, v in self.fixed.items():
            if k not in PARAMS:
                raise InvalidSpecError(f"unknown fixed parameter {k!r}")
            if not math.isfinite(v):
                raise InvalidSpecError(f"fixed value of {k} must be finite")
        if not math.isfinite(self.V) or self.V == 0:
            raise InvalidSpecError("V must be finite and non-zero")

    # convenience constructors ------------------------------------------------
    @classmethod
    def power_cap(cls, eps=None, *, d0=None, offset=0.0):
        """``C0 + K/(d-d0)**eps``; pass ``eps``/``d0``/``offset`` as numbers to fix, ``None`` to free."""
        return cls._build(ModelKind.POWER_LAW_CAP, eps=eps, d0=d0, offset=offset)

    @classmethod
    def log_cap(cls, *, d0=None, offset=None):
        return cls._build(ModelKind.LOG_CAP, eps=0.0, d0=d0, offset=offset)

    @classmethod
    def power_force(cls, eps=None, *, d0=None, offset=0.0, V=1.0):
        return cls._build(ModelKind.POWER_LAW_FORCE, eps=eps, d0=d0, offset=offset, V=V)

    @classmethod
    def _build(cls, kind, V=1.0, **vals):
        free = ["K"]
        fixed = {}
        for k, v in vals.items():
            if kind is ModelKind.LOG_CAP and k == "eps":
                continue
            if v is None:
                free.append(k)
            else:
                fixed[k] = float(v)
        return cls(kind, tuple(free), fixed, V)

    @property
    def default_eps(self):
        if self.eps_ideal is not None:
            return self.eps_ideal
        return 2.0 if self.kind is ModelKind.POWER_LAW_FORCE else 1.0

    def fixed_value(self, name):
        if name in self.fixed:
            return self.fixed[name]
        return self.default_eps if name == "eps" else 0.0

    @property
    def offset_name(self):
        return "F0" if self.kind is ModelKind.POWER_LAW_FORCE else "C0"

    # evaluation ----------------------------------------------------------------
    def full_params(self, free_values):
        p = {k: self.fixed_value(k) for k in PARAMS}
        p.update(zip(self.free, free_values))
        return p

    def evaluate(self, d, params):
        d = np.asarray(d, float)
        s = d - params["d0"]
        if self.kind is ModelKind.LOG_CAP:
            return params["offset"] + params["K"] * np.log(s)
        scale = self.V**2 if self.kind is ModelKind.POWER_LAW_FORCE else 1.0
        return params["offset"] + params["K"] * scale * s ** (-params["eps"])

    def jacobian(self, d, params):
        """Columns of ``d model / d p`` for the free parameters."""
        d = np.asarray(d, float)
        s = d - params["d0"]
        K = params["K"]
        cols = {}
        if self.kind is ModelKind.LOG_CAP:
            cols = {"offset": np.ones_like(s), "K": np.log(s), "d0": -K / s}
        else:
            scale = self.V**2 if self.kind is ModelKind.POWER_LAW_FORCE else 1.0
            e = params["eps"]
            pw = scale * s ** (-e)
            cols = {"offset": np.ones_like(s), "K": pw, "d0": K * e * pw / s,
                    "eps": -K * np.log(s) * pw}
        return np.stack([cols[k] for k in self.free], axis=1)


@dataclass
class FitResult:
    """Estimates, uncertainties and diagnostics of one fit."""

    model: FitModel
    params: dict
    stderr: dict
    covariance: np.ndarray
    rss: float
    n_points: int
    window: tuple
    iterations: int
    step_norm: float
    converged: bool
    weights: str = Weights.UNIFORM.value
    diagnostics: dict = field(default_factory=dict)

    @property
    def dof(self):
        return self.n_points - len(self.model.free)

    @property
    def d_min(self):
        return self.window[0]

    @property
    def d0_over_dmin(self):
        return self.params["d0"] / self.window[0]

    def predict(self, d):
        return self.model.evaluate(d, self.params)

    def d_abs(self, d):
        """Absolute distance ``d - d0``."""
        return np.asarray(d, float) - self.params["d0"]

    def to_record(self):
        """Flat key-value record (floats and strings only)."""
        rec = {"model": self.model.kind.value, "weights": self.weights,
               "free": " ".join(self.model.free), "d_min_m": self.window[0],
               "d_max_m": self.window[1], "n_points": self.n_points}
        for k in PARAMS:
            if self.model.kind is ModelKind.LOG_CAP and k == "eps":
                continue
            name = self.model.offset_name if k == "offset" else k
            rec[name] = self.params[k]
            rec[f"{name}_err"] = self.stderr.get(k, 0.0)
        rec.update(d0_over_dmin=self.d0_over_dmin, rss=self.rss, iterations=self.iterations,
                   step_norm=self.step_norm, converged=self.converged)
        rec.update(self.diagnostics)
        return rec


# ---------------------------------------------------------------------------
# engine


def _as_xy(curve):
    if isinstance(curve, CapacitanceCurve):
        return curve.d, curve.C
    if isinstance(curve, DerivedCurve):
        return curve.d, curve.y
    d, y = curve
    return np.asarray(d, float), np.asarray(y, float)


def _initial_guess(model, d, y, w):
    """Linear least squares for ``offset``/``K`` at the fixed or ideal ``d0``/``eps``."""
    p = {k: model.fixed_value(k) for k in PARAMS}
    if "d0" in model.free:
        p["d0"] = 0.0
    if "eps" in model.free and "offset" not in model.free:
        # K and eps are strongly coupled; seed eps from the log-log slope
        z = y - p["offset"]
        if np.all(z > 0) or np.all(z < 0):
            slope = np.polyfit(np.log(d), np.log(np.abs(z)), 1, w=np.sqrt(w) * np.abs(z))[0]
            if np.isfinite(slope) and slope < 0:
                p["eps"] = -slope
    basis = model.jacobian(d, {**p, "K": 1.0})
    lin = [k for k in ("offset", "K") if k in model.free]
    A = np.stack([basis[:, model.free.index(k)] for k in lin], axis=1)
    target = y - (p["offset"] if "offset" not in model.free else 0.0)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], target * sw, rcond=None)
    p.update(zip(lin, coef))
    return np.array([p[k] for k in model.free])


def fit(curve, model, window=None, weights=Weights.UNIFORM, *, p0=None, max_iter=500,
        xtol=1e-13, ftol=1e-15):
    """Weighted least-squares fit of ``model`` to the samples inside ``window``.

    ``curve`` is a :class:`CapacitanceCurve`, a :class:`DerivedCurve` or a
    ``(d, y)`` pair. ``window = (d_min, d_max)`` in meters (``None`` = all).
    Raises :class:`FitConvergenceError` (with the last state attached) when
    the iteration hits ``max_iter`` without meeting the tolerances.
    """
    if not isinstance(model, FitModel):
        raise InvalidSpecError("model must be a FitModel")
    weights = Weights(weights)
    d, y = _as_xy(curve)
    if window is not None:
        lo, hi = window
        if not lo < hi:
            raise InvalidSpecError("window must satisfy d_min < d_max")
        m = (d >= lo * (1 - 1e-9)) & (d <= hi * (1 + 1e-9))
        d, y = d[m], y[m]
    npar = len(model.free)
    if len(d) < npar + 1:
        raise InvalidSpecError(f"{len(d)} points in window; need at least {npar + 1}")
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(y))):
        raise InvalidSpecError("samples must be finite")
    order = np.argsort(d)
    d, y = d[order], y[order]
    if np.any(y == 0) and weights is Weights.RELATIVE:
        raise InvalidSpecError("relative weights need non-zero data")
    w = np.ones_like(y) if weights is Weights.UNIFORM else 1.0 / y**2
    d_lim = D0_LIMIT * d[0]
    if model.fixed_value("d0") >= d_lim and "d0" not in model.free:
        raise InvalidSpecError("fixed d0 must be below 0.9 * min(d)")

    x = _initial_guess(model, d, y, w) if p0 is None else np.array(
        [p0.get(k, model.fixed_value(k)) for k in model.free], float)
    if not np.all(np.isfinite(x)):
        raise InvalidSpecError("initial guesses must be finite")
    sw = np.sqrt(w)

    def residual(xv):
        return sw * (y - model.evaluate(d, model.full_params(xv)))

    lin_idx = [model.free.index(k) for k in ("offset", "K") if k in model.free]

    def project(xv):
        # offset and K enter linearly: re-solve them exactly for the current d0/eps
        if len(lin_idx) == npar:
            return xv
        p = model.full_params(xv)
        Jl = model.jacobian(d, {**p, "K": 1.0})[:, lin_idx]
        base = model.evaluate(d, {**p, "offset": p["offset"] if "offset" not in model.free
                                  else 0.0, "K": 0.0})
        coef, *_ = np.linalg.lstsq(Jl * sw[:, None], (y - base) * sw, rcond=None)
        out = xv.copy()
        out[lin_idx] = coef
        return out

    def feasible(xv):
        return "d0" not in model.free or xv[model.free.index("d0")] < d_lim

    r = residual(x)
    rss = float(r @ r)
    yscale = float(np.sum(w * y * y))
    lam = 1e-3
    converged = False
    bound_hits = 0
    step_norm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        J = sw[:, None] * model.jacobian(d, model.full_params(x))
        cn = np.linalg.norm(J, axis=0)
        cn[cn == 0] = 1.0
        Js = J / cn
        improved = False
        while lam < 1e20:
            A = np.vstack([Js, math.sqrt(lam) * np.eye(npar)])
            b = np.concatenate([r, np.zeros(npar)])
            dz, *_ = np.linalg.lstsq(A, b, rcond=None)
            dx = dz / cn
            xn = x + dx
            if not feasible(xn):
                bound_hits += 1
                lam *= 10
                continue
            xn = project(xn)
            rn = residual(xn)
            rss_n = float(rn @ rn)
            if np.isfinite(rss_n) and rss_n <= rss:
                improved = True
                break
            lam *= 10
        if not improved:
            # no descent direction left: the current point is a minimum to precision
            converged = True
            step_norm = 0.0
            break
        step_norm = float(np.linalg.norm(dx / np.maximum(np.abs(xn), 1e-300)))
        drop = rss - rss_n
        x, r, rss = xn, rn, rss_n
        lam = max(lam / 10, 1e-12)
        small_step = np.linalg.norm(dz) <= xtol * (np.linalg.norm(x * cn) + xtol)
        if small_step or drop <= ftol * max(rss, 1e-300) or rss <= 1e-30 * yscale:
            converged = True
            break

    p = model.full_params(x)
    J = sw[:, None] * model.jacobian(d, p)
    dof = len(d) - npar
    sigma2 = rss / dof
    cn = np.linalg.norm(J, axis=0)
    cn[cn == 0] = 1.0
    Js = J / cn
    # column scaling keeps (J^T J)^-1 well conditioned despite disparate units
    cov = sigma2 * np.linalg.pinv(Js.T @ Js, rcond=1e-15, hermitian=True) / np.outer(cn, cn)
    cov = 0.5 * (cov + cov.T)
    stderr = {k: float(math.sqrt(max(cov[i, i], 0.0))) for i, k in enumerate(model.free)}
    diag = {"bound_active": bool("d0" in model.free and p["d0"] > 0.999 * d_lim),
            "bound_rejections": bound_hits, "d0_limit_m": d_lim}
    result = FitResult(model, p, stderr, cov, rss, len(d), (float(d[0]), float(d[-1])), it,
                       step_norm, converged, weights.value, diag)
    if not converged:
        raise FitConvergenceError(
            f"fit did not converge in {max_iter} iterations (last relative step {step_norm:.3g})",
            partial=result)
    return result


# ---------------------------------------------------------------------------
# scans and tables


@dataclass(frozen=True)
class DriftPoint:
    d_max: float
    d0_fixed: FitResult
    d0_free: FitResult


def exponent_drift_scan(curve, d_max_list, *, eps_ideal=1.0, d_min=None, weights=Weights.UNIFORM):
    """Free-exponent power-law fits over windows ``[d_min, d_max]`` for each ``d_max``.

    Each window is fitted twice: with ``d0`` fixed at zero and with ``d0``
    free (``C0`` fixed at zero in both). Returns one :class:`DriftPoint` per
    ``d_max``, in the given order.
    """
    d, _ = _as_xy(curve)
    lo = d.min() if d_min is None else d_min
    fixed = FitModel(ModelKind.POWER_LAW_CAP, ("K", "eps"), {"d0": 0.0, "offset": 0.0},
                     eps_ideal=eps_ideal)
    free = FitModel(ModelKind.POWER_LAW_CAP, ("K", "d0", "eps"), {"offset": 0.0},
                    eps_ideal=eps_ideal)
    out = []
    for dm in d_max_list:
        out.append(DriftPoint(float(dm), fit(curve, fixed, (lo, dm), weights),
                              fit(curve, free, (lo, dm), weights)))
    return out


@dataclass
class Table:
    """Rows of flat records plus the column order used for text/CSV output."""

    title: str
    columns: list
    rows: list

    def to_csv(self):
        import csv
        import io

        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=self.columns, extrasaction="ignore", lineterminator="\n")
        wr.writeheader()
        for r in self.rows:
            wr.writerow({k: _fmt(r.get(k, "")) for k in self.columns})
        return buf.getvalue()

    def to_text(self):
        cells = [[str(c) for c in self.columns]]
        cells += [[_fmt(r.get(c, "")) for c in self.columns] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.columns))]
        lines = [self.title]
        for j, row in enumerate(cells):
            lines.append("  ".join(s.rjust(w) for s, w in zip(row, widths)))
            if j == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


TABLE_ONE_GEOMETRIES = {
    # name: (model used, ideal exponent or None for the logarithmic model)
    "parallel_plates": 1.0,
    "whole_sphere": None,
    "truncated_sphere": None,
    "truncated_cylinder": 0.5,
}


def table_one(curves, windows=None, weights=Weights.UNIFORM, reference=None):
    """Capacitance-fit offsets for the four configurations.

    ``curves`` maps each key of :data:`TABLE_ONE_GEOMETRIES` to a curve;
    ``windows`` optionally maps keys to ``(d_min, d_max)``. Power-law
    geometries get a fixed-exponent row and a free-exponent row; the
    spheres get one logarithmic-model row (``C0`` free, see module notes).
    ``reference`` (key -> dict) is merged into the rows as ``ref_*`` columns.
    """
    rows = []
    for key, eps in TABLE_ONE_GEOMETRIES.items():
        if key not in curves:
            raise InvalidSpecError(f"table_one: missing curve for {key!r}")
        win = (windows or {}).get(key)
        ref = (reference or {}).get(key, {})
        if eps is None:
            variants = [("log", FitModel.log_cap())]
        else:
            variants = [("fixed_eps", FitModel.power_cap(eps)),
                        ("free_eps", FitModel(ModelKind.POWER_LAW_CAP, ("K", "d0", "eps"),
                                              {"offset": 0.0}, eps_ideal=eps))]
        for label, model in variants:
            res = fit(curves[key], model, win, weights)
            row = {"geometry": key, "variant": label, "d_min_m": res.window[0],
                   "d_max_m": res.window[1], "d0_m": res.params["d0"],
                   "d0_err_m": res.stderr["d0"], "d0_over_dmin": res.d0_over_dmin,
                   "eps": res.params["eps"] if model.kind is not ModelKind.LOG_CAP else float("nan"),
                   "eps_err": res.stderr.get("eps", 0.0), "result": res}
            for k, v in ref.get(label, {}).items():
                row[f"ref_{k}"] = v
            rows.append(row)
    cols = ["geometry", "variant", "d_min_m", "d_max_m", "d0_m", "d0_err_m", "d0_over_dmin", "eps",
            "eps_err"]
    extra = sorted({k for r in rows for k in r if k.startswith("ref_")})
    return Table("capacitance fits (C0 = 0 for power laws, C0 free for the logarithm)",
                 cols + extra, rows)


def table_two(force_curves, windows, weights=Weights.UNIFORM, reference=None, V=1.0):
    """Free-exponent force fits per geometry and window.

    ``force_curves`` maps geometry -> :class:`DerivedCurve`; ``windows`` maps
    geometry -> list of ``(d_min, d_max)``. ``F0`` is fixed at zero.
    """
    rows = []
    for key, wins in windows.items():
        if key not in force_curves:
            raise InvalidSpecError(f"table_two: missing force curve for {key!r}")
        fc = force_curves[key]
        for i, win in enumerate(wins):
            if win is None or len(win) != 2:
                raise InvalidSpecError(f"table_two: malformed window for {key!r}")
            dd, _ = _as_xy(fc)
            if not np.any((dd >= win[0] * (1 - 1e-9)) & (dd <= win[1] * (1 + 1e-9))):
                raise InvalidSpecError(f"table_two: window {win} for {key!r} holds no samples")
            res = fit(fc, FitModel.power_force(V=V), win, weights)
            row = {"geometry": key, "window_um": f"{win[0] * 1e6:g}-{win[1] * 1e6:g}",
                   "K_f": res.params["K"], "K_f_err": res.stderr["K"], "eps_f": res.params["eps"],
                   "eps_f_err": res.stderr["eps"], "d0_m": res.params["d0"],
                   "d0_err_m": res.stderr["d0"], "d0_over_dmin": res.d0_over_dmin, "result": res}
            refs = (reference or {}).get(key, [])
            if i < len(refs):
                for k, v in refs[i].items():
                    row[f"ref_{k}"] = v
            rows.append(row)
    cols = ["geometry", "window_um", "K_f", "K_f_err", "eps_f", "eps_f_err", "d0_m", "d0_err_m",
            "d0_over_dmin"]
    extra = sorted({k for r in rows for k in r if k.startswith("ref_")})
    return Table("force fits F = K V^2/(d-d0)^eps (F0 = 0)", cols + extra, rows)


# ---------------------------------------------------------------------------
# estimator interface


class OffsetPowerLawRegressor(RegressorMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit`.

    ``X`` is the distance column (shape ``(n, 1)``, meters) and ``y`` the
    capacitance or force. Parameters set to ``None`` are fitted; numbers fix
    them. Fitted values are exposed as ``params_``, ``stderr_`` and
    ``result_``.
    """

    def __init__(self, kind="PowerLawCap", eps=None, d0=None, offset=0.0, V=1.0,
                 weights="Uniform", max_iter=500):
        self.kind = kind
        self.eps = eps
        self.d0 = d0
        self.offset = offset
        self.V = V
        self.weights = weights
        self.max_iter = max_iter

    def _model(self):
        kind = ModelKind(self.kind)
        if kind is ModelKind.LOG_CAP:
            return FitModel.log_cap(d0=self.d0, offset=self.offset)
        if kind is ModelKind.POWER_LAW_FORCE:
            return FitModel.power_force(self.eps, d0=self.d0, offset=self.offset, V=self.V)
        return FitModel.power_cap(self.eps, d0=self.d0, offset=self.offset)

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=2, y_numeric=True)
        X, y = validate_data(self, X, y, reset=True)
        if X.shape[1] != 1:
            raise ValueError("X must have exactly one column (the distance)")
        self.result_ = fit((X[:, 0], y), self._model(), None, self.weights,
                           max_iter=self.max_iter)
        self.params_ = dict(self.result_.params)
        self.stderr_ = dict(self.result_.stderr)
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        X = validate_data(self, X, reset=False)
        return self.result_.predict(X[:, 0])
