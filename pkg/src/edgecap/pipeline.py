"""Distance sweeps, on-disk caching and the reference-configuration bundles.

A :class:`SweepPlan` fixes everything that determines a capacitance curve:
probe and plate specifications, lateral offset, the log-uniform distance
grid and the solver settings. Its hash keys the per-distance cache, so a
repeated sweep (or a refit over another window) costs nothing.

All meshes of one sweep take their node counts at the smallest gap of the
grid (``reference_gap``) so the mesh deforms continuously with ``d`` and the
resulting ``C(d)`` is smooth enough to be differentiated and fitted.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import platform
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analytic import (cap_cylinder_exact, cap_parallel_ideal, cap_sphere_exact,
                       cap_sphere_ipfa, cap_sphere_pfa)
from .bem import SolverSettings, solve_scene
from .exceptions import EdgecapError, InvalidSpecError, SolverError
from .fitting import exponent_drift_scan, table_one, table_two
from .geometry import ShapeSpec, assemble_scene, effective_length
from .numdiff import CapacitanceCurve, Transform, force_curve

logger = logging.getLogger(__name__)

CACHE_ENV = "EDGECAP_CACHE_DIR"
OUTPUTS = ("capacitance", "force", "curvature", "fits")


@dataclass(frozen=True)
class SweepPlan:
    """Scene template, log-uniform distance grid and solver settings of one sweep."""

    probe: ShapeSpec
    plate: ShapeSpec
    d_start: float
    d_end: float
    points: int
    offset: float = 0.0
    settings: SolverSettings = field(default_factory=SolverSettings)
    outputs: tuple = ("capacitance",)
    label: str = "sweep"

    def validate(self):
        if not (math.isfinite(self.d_start) and math.isfinite(self.d_end)):
            raise InvalidSpecError("distance grid bounds must be finite")
        if not 0 < self.d_start < self.d_end:
            raise InvalidSpecError("distance grid needs 0 < d_start < d_end")
        if int(self.points) != self.points or self.points < 3:
            raise InvalidSpecError("a sweep needs at least 3 points")
        for o in self.outputs:
            if o not in OUTPUTS:
                raise InvalidSpecError(f"unknown output {o!r}; choose from {OUTPUTS}")
        self.probe.validate()
        self.plate.validate()
        self.settings.validate()
        # mesh the smallest gap once so bad shapes fail before any solve
        assemble_scene(self.probe, self.plate, self.d_start, self.offset)
        return self

    def grid(self):
        return np.geomspace(self.d_start, self.d_end, int(self.points))

    def scene_dict(self):
        """Everything that determines the solution at one distance."""
        return {"probe": self.probe.to_dict(), "plate": self.plate.to_dict(),
                "offset": self.offset, "reference_gap": self.d_start,
                "settings": self.settings.to_dict(), "version": __version__}

    def to_dict(self):
        d = self.scene_dict()
        d.update(d_start=self.d_start, d_end=self.d_end, points=int(self.points),
                 outputs=list(self.outputs), label=self.label)
        return d

    def plan_hash(self):
        return _hash(self.to_dict())

    def scene_hash(self):
        return _hash(self.scene_dict())


def _hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=repr)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunRecord:
    """Provenance and per-distance diagnostics of one sweep."""

    plan_hash: str
    label: str
    results: list
    failures: list
    wall_clock: float
    version: str = __version__
    cached: int = 0
    monotone: bool = True

    @property
    def ok(self):
        return not self.failures

    def manifest(self):
        """Key-value lines (``key = value``) describing the run."""
        lines = [f"label = {self.label}", f"plan_hash = {self.plan_hash}",
                 f"version = {self.version}", f"python = {platform.python_version()}",
                 f"numpy = {np.__version__}", f"points_solved = {len(self.results)}",
                 f"points_cached = {self.cached}", f"failures = {len(self.failures)}",
                 f"monotone_decreasing = {self.monotone}",
                 f"wall_clock_s = {self.wall_clock:.3f}"]
        if self.results:
            lines.append(f"panels_max = {max(r['n_panels'] for r in self.results)}")
        for f in self.failures:
            lines.append(f"failure = d_m={f['d']!r} error={f['error']}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# cache


def cache_dir(override=None):
    """Cache directory: ``override``, else ``$EDGECAP_CACHE_DIR``, else ``None`` (off)."""
    path = override or os.environ.get(CACHE_ENV)
    return Path(path) if path else None


def _cache_path(root, scene_hash, d):
    key = hashlib.sha256(f"{scene_hash}:{d!r}".encode()).hexdigest()
    return root / key[:2] / f"{key}.json"


def _cache_get(root, scene_hash, d):
    if root is None:
        return None
    p = _cache_path(root, scene_hash, d)
    try:
        with open(p) as fh:
            rec = json.load(fh)
    except (OSError, ValueError):
        return None
    if rec.get("d") != d or rec.get("scene_hash") != scene_hash:
        return None
    return rec


def _cache_put(root, scene_hash, rec):
    if root is None:
        return
    p = _cache_path(root, scene_hash, rec["d"])
    p.parent.mkdir(parents=True, exist_ok=True)
    # write-then-rename: readers see either no entry or a complete one
    fd, tmp = tempfile.mkstemp(dir=p.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump({**rec, "scene_hash": scene_hash}, fh)
    os.replace(tmp, p)


# ---------------------------------------------------------------------------
# sweeps


def _solve_one(args):
    probe, plate, offset, ref, settings, d = args
    t0 = time.perf_counter()
    try:
        scene = assemble_scene(probe, plate, d, offset, reference_gap=ref)
        try:
            res = solve_scene(scene, settings)
        except SolverError as exc:
            # one recovery attempt with the iterative solver
            logger.warning("direct solve failed at d=%g (%s); retrying with GMRES", d, exc)
            res = solve_scene(scene, replace(settings, solve_method="gmres"))
        return {"d": d, "C": res.capacitance, "n_panels": int(res.n_panels),
                "seconds": time.perf_counter() - t0}
    except EdgecapError as exc:
        return {"d": d, "error": f"{type(exc).__name__}: {exc}"}


def run_sweep(plan, *, workers=1, cache=None, solver=None):
    """Solve every distance of ``plan``; returns ``(CapacitanceCurve, RunRecord)``.

    ``workers > 1`` spreads distances over a process pool; results do not
    depend on the worker count. Distances whose solve fails (after one retry
    with the iterative solver) are reported in ``RunRecord.failures`` and
    left out of the curve. ``solver`` replaces the per-distance solve
    (testing hook with the signature of the internal worker).
    """
    plan.validate()
    root = cache_dir(cache)
    sh = plan.scene_hash()
    grid = [float(x) for x in plan.grid()]
    t0 = time.perf_counter()
    results = {}
    todo = []
    for d in grid:
        hit = _cache_get(root, sh, d)
        if hit is not None:
            results[d] = hit
        else:
            todo.append(d)
    n_cached = len(results)
    job = solver or _solve_one
    args = [(plan.probe, plan.plate, plan.offset, plan.d_start, plan.settings, d) for d in todo]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(job, args))
    else:
        out = [job(a) for a in args]
    failures = []
    for rec in out:
        if "error" in rec:
            failures.append(rec)
        else:
            results[rec["d"]] = rec
            _cache_put(root, sh, rec)
    ds = sorted(results)
    C = [results[d]["C"] for d in ds]
    monotone = bool(np.all(np.diff(C) < 0))
    if not monotone:
        logger.warning("%s: C(d) is not strictly decreasing", plan.label)
    record = RunRecord(plan.plan_hash(), plan.label,
                       [{k: results[d][k] for k in ("d", "C", "n_panels", "seconds")} for d in ds],
                       failures, time.perf_counter() - t0, cached=n_cached, monotone=monotone)
    if len(ds) < 1:
        raise SolverError(f"{plan.label}: every distance failed: {failures[0]['error']}")
    geom = {"label": plan.label, "probe": plan.probe.to_dict(), "plate": plan.plate.to_dict(),
            "offset": plan.offset}
    curve = CapacitanceCurve(ds, C, geometry=geom,
                             solver={**plan.settings.to_dict(), "plan_hash": record.plan_hash})
    return curve, record


# ---------------------------------------------------------------------------
# reference configurations

PLATE_SIDE = 8.86e-3
SPHERE_R = 0.15e-3
SPHERE_PLATE = 0.5e-3
# lens: spherical cap 5 um high (rim radius ~38 um) closed by a flat back face
LENS_HEIGHT = 5e-6
CYL_R = 12e-3
CYL_PLATE = (10e-3, 28e-3)
CYL_NARROW = 4e-3
CYL_WIDE = 12e-3
# truncated cylinder: sector of +-0.5 rad around the contact line
CYL_SECTOR = 0.5


@dataclass(frozen=True)
class Tier:
    name: str
    points: int
    mesh_factor: float
    budget_s: float


TIERS = {
    "smoke": Tier("smoke", 9, 1.0, 120.0),
    "desk": Tier("desk", 25, 1.5, 1800.0),
    "full": Tier("full", 50, 2.0, 4 * 3600.0),
}


def _tier(name):
    try:
        return TIERS[name]
    except KeyError:
        raise InvalidSpecError(f"unknown tier {name!r}; choose from {sorted(TIERS)}") from None


def _mesh(spec, tier):
    return spec.refined(tier.mesh_factor)


def configuration(name, tier="desk", points=None):
    """:class:`SweepPlan` of one named reference configuration at a tier."""
    t = _tier(tier)
    n = points or t.points
    sym = SolverSettings(symmetry=True)
    base = dict(resolution=6, refinement=2.0, growth=0.4)
    if name == "parallel_plates":
        p = ShapeSpec.square_plate(PLATE_SIDE, **base)
        return SweepPlan(_mesh(p, t), _mesh(p, t), 5e-6, 2e-3, n, settings=sym, label=name)
    if name in ("whole_sphere", "edge_sphere", "truncated_sphere"):
        if name == "truncated_sphere":
            probe = ShapeSpec.truncated_sphere(SPHERE_R, LENS_HEIGHT, resolution=8,
                                               refinement=2.0, growth=0.4)
        else:
            probe = ShapeSpec.sphere(SPHERE_R, resolution=8, refinement=2.0, growth=0.4)
        plate = ShapeSpec.square_plate(SPHERE_PLATE, resolution=8, refinement=2.0, growth=0.4)
        offset = SPHERE_PLATE / 2 if name == "edge_sphere" else 0.0
        return SweepPlan(_mesh(probe, t), _mesh(plate, t), 0.2e-6, 25e-6, n, offset=offset,
                         settings=sym, label=name)
    cyl = {"narrow_truncated_cylinder": (CYL_NARROW, CYL_SECTOR),
           "narrow_whole_cylinder": (CYL_NARROW, math.pi),
           "wide_truncated_cylinder": (CYL_WIDE, CYL_SECTOR),
           "wide_whole_cylinder": (CYL_WIDE, math.pi)}
    if name in cyl:
        L, th = cyl[name]
        probe = ShapeSpec.cylinder(CYL_R, L, th, **base)
        plate = ShapeSpec.rect_plate(*CYL_PLATE, **base)
        return SweepPlan(_mesh(probe, t), _mesh(plate, t), 0.4e-6, 160e-6, n, settings=sym,
                         label=name)
    raise InvalidSpecError(f"unknown configuration {name!r}")


CONFIGURATIONS = ("parallel_plates", "whole_sphere", "edge_sphere", "truncated_sphere",
                  "narrow_truncated_cylinder", "narrow_whole_cylinder",
                  "wide_truncated_cylinder", "wide_whole_cylinder")

# reference fit values, attached to the tables for side-by-side comparison
REFERENCE_TABLE_ONE = {
    "parallel_plates": {"fixed_eps": {"d0_nm": "-90+-20", "d0_over_dmin": 0.018},
                        "free_eps": {"d0_nm": "140+-20", "d0_over_dmin": 0.028,
                                     "eps": "0.977+-0.002"}},
    "whole_sphere": {"log": {"d0_nm": "13+-3", "d0_over_dmin": 0.065}},
    "truncated_sphere": {"log": {"d0_nm": "144+-13", "d0_over_dmin": 0.72}},
    "truncated_cylinder": {"fixed_eps": {"d0_nm": "-18+-3", "d0_over_dmin": 0.045},
                           "free_eps": {"d0_nm": "12+-1", "d0_over_dmin": 0.030,
                                        "eps": "0.4849+-0.0005"}},
}
TABLE_ONE_WINDOWS = {
    "parallel_plates": (5e-6, 50e-6),
    "whole_sphere": (0.2e-6, 25e-6),
    "truncated_sphere": (0.2e-6, 25e-6),
    "truncated_cylinder": (0.4e-6, 10e-6),
}
TABLE_TWO_WINDOWS = {
    "parallel_plates": [(7e-6, 50e-6), (50e-6, 450e-6)],
    "whole_sphere": [(0.2e-6, 3e-6), (3e-6, 25e-6)],
    "truncated_sphere": [(0.2e-6, 3e-6), (3e-6, 25e-6)],
    "truncated_cylinder": [(0.5e-6, 10e-6), (10e-6, 160e-6)],
}
REFERENCE_TABLE_TWO = {
    "parallel_plates": [{"K_f": "(3.59+-0.03)e-16", "eps_f": "1.9971+-0.0007",
                         "d0_nm": "10.5+-2.9", "d0_over_dmin": 0.0015},
                        {"K_f": "(4.4+-1.0)e-16", "eps_f": "1.973+-0.025", "d0_nm": "800+-760",
                         "d0_over_dmin": 0.016}],
    "whole_sphere": [{"K_f": "(6.1+-6.8)e-15", "eps_f": "0.97+-0.08", "d0_nm": "2+-19",
                      "d0_over_dmin": 0.010},
                     {"K_f": "(1.4+-2.0)e-15", "eps_f": "1.10+-0.12", "d0_nm": "-430+-410",
                      "d0_over_dmin": 0.143}],
    "truncated_sphere": [{"K_f": "(4.3+-2.8)e-17", "eps_f": "1.30+-0.04", "d0_nm": "-35+-10",
                          "d0_over_dmin": 0.175},
                         {"K_f": "(1.4+-0.6)e-21", "eps_f": "1.92+-0.04", "d0_nm": "-480+-80",
                          "d0_over_dmin": 0.160}],
    "truncated_cylinder": [{"K_f": "(36.4+-2.2)e-16", "eps_f": "1.513+-0.005",
                            "d0_nm": "-5.8+-2.0", "d0_over_dmin": 0.012},
                           {"K_f": "(29.2+-6.2)e-16", "eps_f": "1.538+-0.020",
                            "d0_nm": "-370+-180", "d0_over_dmin": 0.037}],
}
TRANSFORMS = {"parallel_plates": Transform.LOG, "whole_sphere": Transform.SEMILOG,
              "edge_sphere": Transform.SEMILOG, "truncated_sphere": Transform.SEMILOG,
              "truncated_cylinder": Transform.LOG}
TABLE_KEYS = {"parallel_plates": "parallel_plates", "whole_sphere": "whole_sphere",
              "truncated_sphere": "truncated_sphere",
              "truncated_cylinder": "narrow_truncated_cylinder"}


@dataclass
class Bundle:
    """In-memory results of one reproduction target plus the files written."""

    target: str
    tier: str
    curves: dict = field(default_factory=dict)
    records: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    files: list = field(default_factory=list)


def sweep_configurations(names, tier, *, workers=1, cache=None, points=None):
    curves, records = {}, {}
    for name in names:
        plan = configuration(name, tier, points)
        curves[name], records[name] = run_sweep(plan, workers=workers, cache=cache)
        logger.info("%s: %d points in %.1f s (%d cached)", name, len(curves[name]),
                    records[name].wall_clock, records[name].cached)
    return curves, records


def table_curves(tier, **kw):
    """Curves keyed by the table row names."""
    curves, records = sweep_configurations(sorted(set(TABLE_KEYS.values())), tier, **kw)
    return ({k: curves[v] for k, v in TABLE_KEYS.items()},
            {k: records[v] for k, v in TABLE_KEYS.items()})


def force_curves(curves, V=1.0):
    return {k: force_curve(c, V, TRANSFORMS[k]) for k, c in curves.items()}


def drift_windows(curve, min_points=4):
    """``d_max`` values for the exponent-drift scan: every grid point from the ``min_points``-th on."""
    return [float(x) for x in curve.d[min_points - 1:]]


def reproduce_paper(target, tier="desk", out_dir=None, *, workers=1, cache=None):
    """Run one reference target (``fig2``, ``fig3``, ``fig4``, ``table1``, ``table2``).

    Returns a :class:`Bundle`; with ``out_dir`` the curves, reference traces,
    tables and a key-value manifest are written there as well.
    """
    target = str(target).lower().replace(" ", "")
    aliases = {"tablei": "table1", "tableii": "table2"}
    target = aliases.get(target, target)
    if target not in ("fig2", "fig3", "fig4", "table1", "table2"):
        raise InvalidSpecError(f"unknown target {target!r}")
    t = _tier(tier)
    t0 = time.perf_counter()
    b = Bundle(target, t.name)
    kw = dict(workers=workers, cache=cache)
    if target == "fig2":
        b.curves, b.records = sweep_configurations(["parallel_plates"], tier, **kw)
        c = b.curves["parallel_plates"]
        A = PLATE_SIDE**2
        b.traces["ideal"] = cap_parallel_ideal(A, c.d)
        scan = exponent_drift_scan(c, drift_windows(c))
        b.tables["drift"] = scan
    elif target == "fig3":
        b.curves, b.records = sweep_configurations(
            ["whole_sphere", "edge_sphere", "truncated_sphere"], tier, **kw)
        d = b.curves["whole_sphere"].d
        b.traces = {"exact": np.array([cap_sphere_exact(SPHERE_R, x) for x in d]),
                    "ipfa_theta0": cap_sphere_ipfa(SPHERE_R, d, 0.0),
                    "ipfa_theta1": cap_sphere_ipfa(SPHERE_R, d, 1.0),
                    "pfa": cap_sphere_pfa(SPHERE_R, d)}
    elif target == "fig4":
        names = ["narrow_truncated_cylinder", "narrow_whole_cylinder",
                 "wide_truncated_cylinder", "wide_whole_cylinder"]
        b.curves, b.records = sweep_configurations(names, tier, **kw)
        d = b.curves[names[0]].d
        b.traces["exact_per_length"] = cap_cylinder_exact(CYL_R, 1.0, d)
    elif target == "table1":
        b.curves, b.records = table_curves(tier, **kw)
        b.tables["table1"] = table_one(b.curves, TABLE_ONE_WINDOWS, reference=REFERENCE_TABLE_ONE)
    else:
        b.curves, b.records = table_curves(tier, **kw)
        fc = force_curves(b.curves)
        b.traces.update({f"force_{k}": v for k, v in fc.items()})
        b.tables["table2"] = table_two(fc, TABLE_TWO_WINDOWS, reference=REFERENCE_TABLE_TWO)
    wall = time.perf_counter() - t0
    if wall > t.budget_s:
        warnings.warn(f"{target} at tier {t.name} took {wall:.0f} s, over the "
                      f"{t.budget_s:.0f} s budget", RuntimeWarning, stacklevel=2)
    if out_dir is not None:
        write_bundle(b, Path(out_dir))
    return b


# ---------------------------------------------------------------------------
# output


def write_curve_csv(path, curve, resolution=None, extra=None):
    """``d_m,C_F,geometry,resolution`` rows (plus optional extra columns)."""
    label = curve.geometry.get("label", "custom")
    res = resolution if resolution is not None else _resolution_tag(curve)
    extra = extra or {}
    header = ["d_m", "C_F", "geometry", "resolution"] + list(extra)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i, (d, C) in enumerate(zip(curve.d, curve.C)):
            row = [repr(float(d)), repr(float(C)), label, str(res)]
            row += [repr(float(v[i])) for v in extra.values()]
            fh.write(",".join(row) + "\n")


def _resolution_tag(curve):
    p = curve.geometry.get("probe", {})
    return f"{p.get('resolution', '')}/{p.get('refinement', '')}"


def write_bundle(b, out):
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, c in b.curves.items():
        p = out / f"{name}_capacitance.csv"
        extra = {}
        if b.target == "fig4":
            L = effective_length(ShapeSpec(**c.geometry["probe"]),
                                 ShapeSpec(**c.geometry["plate"]))
            extra["C_per_Leff_F_per_m"] = c.C / L
        write_curve_csv(p, c, extra=extra)
        files.append(p)
    if b.traces:
        p = out / "reference_traces.csv"
        cols = {k: v for k, v in b.traces.items() if not hasattr(v, "observable")}
        if cols:
            d = next(iter(b.curves.values())).d
            with open(p, "w") as fh:
                fh.write(",".join(["d_m"] + list(cols)) + "\n")
                for i in range(len(d)):
                    fh.write(",".join([repr(float(d[i]))] + [repr(float(v[i])) for v in cols.values()]) + "\n")
            files.append(p)
        for k, v in b.traces.items():
            if hasattr(v, "observable"):
                p = out / f"{k}.csv"
                with open(p, "w") as fh:
                    fh.write("d_m,F_N,transform\n")
                    for d, y in zip(v.d, v.y):
                        fh.write(f"{float(d)!r},{float(y)!r},{v.transform}\n")
                files.append(p)
    for name, tab in b.tables.items():
        if name == "drift":
            p = out / "exponent_drift.csv"
            with open(p, "w") as fh:
                fh.write("d_max_m,eps_d0_fixed,eps_d0_fixed_err,eps_d0_free,eps_d0_free_err,d0_free_m\n")
                for pt in tab:
                    fh.write(",".join(repr(float(x)) for x in (
                        pt.d_max, pt.d0_fixed.params["eps"], pt.d0_fixed.stderr["eps"],
                        pt.d0_free.params["eps"], pt.d0_free.stderr["eps"],
                        pt.d0_free.params["d0"])) + "\n")
            files.append(p)
        else:
            p = out / f"{name}.csv"
            p.write_text(tab.to_csv())
            (out / f"{name}.txt").write_text(tab.to_text())
            files += [p, out / f"{name}.txt"]
    man = out / "manifest.txt"
    with open(man, "w") as fh:
        fh.write(f"target = {b.target}\ntier = {b.tier}\n")
        for name, rec in b.records.items():
            fh.write(f"[{name}]\n")
            fh.write(rec.manifest())
    files.append(man)
    b.files = files
    return files
