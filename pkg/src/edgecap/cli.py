"""Command-line front end: ``python -m edgecap {sweep,fit,reproduce}``.

Config files are INI-style (``[geometry]``, ``[solver]``, ``[fit]``,
``[output]``). Every length key carries the ``_m`` suffix and takes meters;
unknown keys are rejected with their line number. Exit codes: 0 success,
2 configuration/input error, 3 solver error, 4 fit non-convergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bem import SolverSettings
from .exceptions import (ConfigError, EdgecapError, FitConvergenceError, InvalidSpecError,
                         SolverError)
from .fitting import FitModel, ModelKind, Weights, fit
from .geometry import ShapeSpec, ShapeTag
from .numdiff import CapacitanceCurve, Transform, force_curve
from .pipeline import SweepPlan, TIERS, reproduce_paper, run_sweep, write_curve_csv

logger = logging.getLogger("edgecap")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_FIT = 0, 2, 3, 4

CSV_HEADER = ["d_m", "C_F", "geometry", "resolution"]

_SHAPES = {"square_plate": ShapeTag.SQUARE_PLATE, "rect_plate": ShapeTag.RECT_PLATE,
           "sphere": ShapeTag.SPHERE, "truncated_sphere": ShapeTag.TRUNCATED_SPHERE,
           "cylinder": ShapeTag.CYLINDER}
_MODELS = {"powercap": ModelKind.POWER_LAW_CAP, "logcap": ModelKind.LOG_CAP,
           "powerforce": ModelKind.POWER_LAW_FORCE}

# key -> parser; lengths end in _m and are given in meters
SCHEMA = {
    "geometry": {
        "label": str, "probe": str, "plate": str,
        "probe_side_m": float, "probe_lx_m": float, "probe_ly_m": float,
        "probe_radius_m": float, "probe_cap_height_m": float, "probe_length_m": float,
        "probe_truncation_half_angle_rad": float,
        "plate_side_m": float, "plate_lx_m": float, "plate_ly_m": float,
        "offset_m": float, "gap_start_m": float, "gap_end_m": float, "points": int,
        "resolution": int, "refinement": float, "growth": float,
    },
    "solver": {
        "quadrature_order": int, "near_field": float, "mid_field": float, "solve_method": str,
        "iterative_tol": float, "max_iterations": int, "dense_limit": int, "max_panels": int,
        "symmetry": "bool", "workers": int,
    },
    "fit": {
        "model": str, "eps": str, "d0_m": str, "offset": str, "window_min_m": float,
        "window_max_m": float, "weights": str, "transform": str, "voltage_v": float,
    },
    "output": {"directory": str, "formats": str},
}


@dataclass
class Config:
    """Validated configuration; every precondition is checked on load."""

    plan: SweepPlan
    workers: int = 1
    fit: dict | None = None
    output_dir: Path = Path(".")
    formats: tuple = ("csv", "text", "json")
    source: dict = field(default_factory=dict)


def _line_of(text, section, key):
    cur = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
        elif cur == section and s.split("=", 1)[0].split(":", 1)[0].strip().lower() == key:
            return i
    return "?"


def _convert(section, key, raw, text):
    kind = SCHEMA[section][key]
    where = f"[{section}] {key} (line {_line_of(text, section, key)})"
    try:
        if kind == "bool":
            v = raw.strip().lower()
            if v not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return v in ("true", "yes", "1", "on")
        val = kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None
    if isinstance(val, float) and not math.isfinite(val):
        raise ConfigError(f"{where}: value must be finite")
    return val


def load_config(path):
    """Parse and validate a config file; raises :class:`ConfigError`."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    vals = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        vals[section] = {}
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                hint = " (lengths take the _m suffix, in meters)" if "_" in key else ""
                raise ConfigError(f"unknown key {key!r} in [{section}] at line "
                                  f"{_line_of(text, section, key)}{hint}")
            vals[section][key] = _convert(section, key, raw, text)
    if "geometry" not in vals:
        raise ConfigError("missing [geometry] section")
    try:
        return _build_config(vals)
    except InvalidSpecError as exc:
        raise ConfigError(str(exc)) from None


def _shape(prefix, g, mesh):
    name = g.get(prefix)
    if name is None:
        raise ConfigError(f"[geometry] {prefix} is required")
    if name not in _SHAPES:
        raise ConfigError(f"[geometry] {prefix}: unknown shape {name!r}; choose from {sorted(_SHAPES)}")
    tag = _SHAPES[name]
    kw = dict(mesh)
    for k in ("side", "lx", "ly", "radius", "cap_height", "length"):
        if f"{prefix}_{k}_m" in g:
            kw[k] = g[f"{prefix}_{k}_m"]
    if tag is ShapeTag.CYLINDER:
        th = g.get(f"{prefix}_truncation_half_angle_rad", math.pi)
        return ShapeSpec.cylinder(kw.pop("radius", None), kw.pop("length", None), th, **kw)
    return ShapeSpec(tag, **kw)


def _build_config(vals):
    g = vals["geometry"]
    mesh = {k: g[k] for k in ("resolution", "refinement", "growth") if k in g}
    probe = _shape("probe", g, mesh)
    plate = _shape("plate", g, mesh)
    if plate.shape not in (ShapeTag.SQUARE_PLATE, ShapeTag.RECT_PLATE):
        raise ConfigError("[geometry] plate must be square_plate or rect_plate")
    for k in ("gap_start_m", "gap_end_m"):
        if k not in g:
            raise ConfigError(f"[geometry] {k} is required")
        if not g[k] > 0:
            raise ConfigError(f"[geometry] {k} must be > 0 (got {g[k]!r})")
    s = dict(vals.get("solver", {}))
    workers = s.pop("workers", 1)
    if workers < 1:
        raise ConfigError("[solver] workers must be >= 1")
    s.setdefault("symmetry", True)
    settings = SolverSettings(**s)
    fitsec = vals.get("fit")
    outputs = ("capacitance", "fits") if fitsec else ("capacitance",)
    plan = SweepPlan(probe, plate, g["gap_start_m"], g["gap_end_m"], g.get("points", 25),
                     g.get("offset_m", 0.0), settings, outputs, g.get("label", probe.shape.value))
    plan.validate()
    if fitsec:
        _fit_model(fitsec)  # validate early
    o = vals.get("output", {})
    formats = tuple(f.strip() for f in o.get("formats", "csv,text,json").split(",") if f.strip())
    for f in formats:
        if f not in ("csv", "text", "json"):
            raise ConfigError(f"[output] formats: unknown format {f!r}")
    return Config(plan, workers, fitsec, Path(o.get("directory", ".")), formats, vals)


def _fit_model(f):
    model = f.get("model", "powercap")
    if model not in _MODELS:
        raise ConfigError(f"[fit] model must be one of {sorted(_MODELS)}")

    def free_or(v, default):
        if v is None:
            return default
        if str(v).strip().lower() == "free":
            return None
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"[fit] expected a number or 'free', got {v!r}") from None

    kind = _MODELS[model]
    d0 = free_or(f.get("d0_m"), None)
    if kind is ModelKind.LOG_CAP:
        m = FitModel.log_cap(d0=d0, offset=free_or(f.get("offset"), None))
    else:
        eps = free_or(f.get("eps"), None)
        off = free_or(f.get("offset"), 0.0)
        m = (FitModel.power_cap(eps, d0=d0, offset=off) if kind is ModelKind.POWER_LAW_CAP
             else FitModel.power_force(eps, d0=d0, offset=off, V=f.get("voltage_v", 1.0)))
    window = None
    if "window_min_m" in f or "window_max_m" in f:
        window = (f.get("window_min_m", 0.0), f.get("window_max_m", math.inf))
        if not window[0] < window[1]:
            raise ConfigError("[fit] window_min_m must be < window_max_m")
    weights = {"uniform": Weights.UNIFORM, "relative": Weights.RELATIVE,
               "relativeerror": Weights.RELATIVE}.get(f.get("weights", "uniform").lower())
    if weights is None:
        raise ConfigError("[fit] weights must be uniform or relative")
    tr = f.get("transform", "log").lower()
    if tr not in ("log", "semilog"):
        raise ConfigError("[fit] transform must be log or semilog")
    return m, window, weights, Transform.LOG if tr == "log" else Transform.SEMILOG


# ---------------------------------------------------------------------------
# CSV


def read_curve_csv(path):
    """Read a ``d_m,C_F,geometry,resolution`` CSV into a :class:`CapacitanceCurve`."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    with fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:4] != CSV_HEADER:
        raise ConfigError(f"{path}: line 1: expected header starting with {','.join(CSV_HEADER)}")
    d, C = [], []
    label = None
    for i, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) < 4:
            raise ConfigError(f"{path}: line {i}: expected at least 4 fields, got {len(row)}")
        try:
            dv, cv = float(row[0]), float(row[1])
        except ValueError:
            raise ConfigError(f"{path}: line {i}: non-numeric d_m or C_F") from None
        if not (math.isfinite(dv) and math.isfinite(cv)) or dv <= 0 or cv <= 0:
            raise ConfigError(f"{path}: line {i}: d_m and C_F must be positive and finite")
        if d and dv <= d[-1]:
            raise ConfigError(f"{path}: line {i}: d_m must be strictly increasing")
        d.append(dv)
        C.append(cv)
        label = label or row[2]
    if len(d) < 3:
        raise ConfigError(f"{path}: need at least 3 data rows")
    return CapacitanceCurve(d, C, geometry={"label": label or "csv"})


# ---------------------------------------------------------------------------
# reports


def fit_report(result, formats=("text",)):
    rec = result.to_record()
    lines = [f"fit of {rec['model']} ({rec['weights']} weights) over "
             f"[{rec['d_min_m']:.6g}, {rec['d_max_m']:.6g}] m, {rec['n_points']} points"]
    for k in result.model.free:
        name = result.model.offset_name if k == "offset" else k
        lines.append(f"  {name:>6} = {result.params[k]: .8g} +- {result.stderr[k]:.3g}")
    for k in ("offset", "d0", "eps"):
        if k not in result.model.free and not (k == "eps" and result.model.kind is ModelKind.LOG_CAP):
            name = result.model.offset_name if k == "offset" else k
            lines.append(f"  {name:>6} = {result.params[k]: .8g} (fixed)")
    lines.append(f"  d0/d_min = {rec['d0_over_dmin']:.4g}")
    lines.append(f"  rss = {rec['rss']:.6g}, iterations = {rec['iterations']}, "
                 f"converged = {rec['converged']}")
    return "\n".join(lines) + "\n", rec


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    return str(o)


def _write_fit(result, out_dir, stem="fit", formats=("text", "json")):
    text, rec = fit_report(result)
    out_dir.mkdir(parents=True, exist_ok=True)
    if "text" in formats:
        (out_dir / f"{stem}.txt").write_text(text)
    if "json" in formats:
        (out_dir / f"{stem}.json").write_text(json.dumps(rec, indent=2, sort_keys=True,
                                                         default=_json_default) + "\n")
    if "csv" in formats:
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(rec)
            w.writerow(rec.values())
    return text


# ---------------------------------------------------------------------------
# commands


def cmd_sweep(args):
    cfg = load_config(args.config)
    plan = cfg.plan
    if args.dry_run:
        print(json.dumps({"plan_hash": plan.plan_hash(), **plan.to_dict(),
                          "grid_m": [float(x) for x in plan.grid()], "workers": cfg.workers,
                          "output_dir": str(cfg.output_dir)}, indent=2, default=_json_default))
        return EXIT_OK
    curve, record = run_sweep(plan, workers=cfg.workers, cache=args.cache_dir)
    out = Path(args.out) if args.out else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_curve_csv(out / "capacitance.csv", curve)
    (out / "manifest.txt").write_text(record.manifest())
    print(f"wrote {out / 'capacitance.csv'} ({len(curve)} points)")
    if not record.ok:
        for f in record.failures:
            print(f"error: solve failed at d={f['d']!r} m: {f['error']}", file=sys.stderr)
        return EXIT_SOLVER
    if cfg.fit:
        model, window, weights, transform = _fit_model(cfg.fit)
        data = curve
        if model.kind is ModelKind.POWER_LAW_FORCE:
            data = force_curve(curve, model.V, transform)
        print(_write_fit(fit(data, model, window, weights), out, formats=cfg.formats), end="")
    return EXIT_OK


def _parse_window(s):
    try:
        lo, hi = (float(x) for x in s.split(":"))
    except ValueError:
        raise ConfigError(f"--window expects dmin:dmax in meters, got {s!r}") from None
    if not 0 <= lo < hi:
        raise ConfigError("--window needs 0 <= dmin < dmax")
    return lo, hi


def cmd_fit(args):
    curve = read_curve_csv(args.csv)
    window = _parse_window(args.window) if args.window else None
    kind = _MODELS[args.model]
    eps = args.fix_eps
    d0 = args.fix_d0
    if kind is ModelKind.LOG_CAP:
        if eps is not None:
            raise ConfigError("--fix-eps does not apply to the logarithmic model")
        model = FitModel.log_cap(d0=d0, offset=args.fix_offset)
    elif kind is ModelKind.POWER_LAW_CAP:
        model = FitModel.power_cap(eps, d0=d0,
                                   offset=0.0 if args.fix_offset is None and not args.free_offset
                                   else args.fix_offset)
    else:
        model = FitModel.power_force(eps, d0=d0, V=args.voltage,
                                     offset=0.0 if args.fix_offset is None and not args.free_offset
                                     else args.fix_offset)
    data = curve
    if kind is ModelKind.POWER_LAW_FORCE:
        data = force_curve(curve, args.voltage, Transform(args.transform))
    weights = Weights.RELATIVE if args.weights == "relative" else Weights.UNIFORM
    try:
        result = fit(data, model, window, weights)
    except FitConvergenceError as exc:
        if exc.partial is not None and args.out:
            _write_fit(exc.partial, Path(args.out), "fit_partial")
        raise
    out = Path(args.out) if args.out else Path(args.csv).parent
    print(_write_fit(result, out), end="")
    return EXIT_OK


def cmd_reproduce(args):
    out = Path(args.out) if args.out else Path(f"bundle_{args.target}_{args.tier}")
    b = reproduce_paper(args.target, args.tier, out, workers=args.workers, cache=args.cache_dir)
    for t in b.tables.values():
        if hasattr(t, "to_text"):
            print(t.to_text())
    failed = [n for n, r in b.records.items() if not r.ok]
    print(f"bundle written to {out} ({len(b.files)} files)")
    if failed:
        print(f"error: solver failures in {', '.join(failed)}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="edgecap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"edgecap {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--cache-dir", default=None,
                   help="per-distance solve cache (default: $EDGECAP_CACHE_DIR, off if unset)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sweep", help="capacitance sweep from a config file")
    s.add_argument("config")
    s.add_argument("--dry-run", action="store_true", help="print the resolved plan and exit")
    s.add_argument("--out", default=None, help="output directory (overrides [output] directory)")
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("fit", help="fit a capacitance CSV")
    f.add_argument("csv")
    f.add_argument("--model", choices=sorted(_MODELS), default="powercap")
    f.add_argument("--fix-eps", type=float, default=None, help="fix the exponent (default free)")
    f.add_argument("--fix-d0", type=float, default=None, help="fix d0 in meters (default free)")
    f.add_argument("--fix-offset", type=float, default=None,
                   help="fix C0/F0 (power laws default to 0, the log model to free)")
    f.add_argument("--free-offset", action="store_true", help="fit C0/F0 for power laws")
    f.add_argument("--window", default=None, help="dmin:dmax in meters")
    f.add_argument("--weights", choices=("uniform", "relative"), default="uniform")
    f.add_argument("--transform", choices=("Log", "SemiLog"), default="Log",
                   help="differentiation domain for powerforce")
    f.add_argument("--voltage", type=float, default=1.0)
    f.add_argument("--out", default=None, help="report directory (default: next to the CSV)")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("reproduce", help="run a reference figure/table bundle")
    r.add_argument("--target", required=True, choices=("fig2", "fig3", "fig4", "table1", "table2"))
    r.add_argument("--tier", choices=sorted(TIERS), default="smoke")
    r.add_argument("--out", default=None)
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except FitConvergenceError as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except EdgecapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
