import math
from dataclasses import replace

import numpy as np
import pytest

from edgecap import pipeline
from edgecap.analytic import EPS0
from edgecap.bem import SolverSettings
from edgecap.exceptions import InvalidSpecError, SolverError
from edgecap.geometry import ShapeSpec
from edgecap.pipeline import SweepPlan, run_sweep


def small_plan(side=1e-3, points=5, **kw):
    p = ShapeSpec.square_plate(side, resolution=4, refinement=2.0, growth=0.4)
    return SweepPlan(p, p, side / 100, side / 10, points,
                     settings=SolverSettings(symmetry=True), label="small", **kw)


def fake_solver(args):
    # stands in for the BEM: ideal plates, failing on the middle distance
    probe, plate, offset, ref, settings, d = args
    if 2.5e-5 < d < 3.5e-5:
        return {"d": d, "error": "SolverError: injected"}
    return {"d": d, "C": EPS0 * probe.side**2 / d, "n_panels": 1, "seconds": 0.0}


def failing_solver(args):
    return {"d": args[-1], "error": "SolverError: injected"}


class TestPlan:
    def test_grid_is_log_uniform(self):
        g = small_plan(points=7).grid()
        assert g[0] == pytest.approx(1e-5) and g[-1] == pytest.approx(1e-4)
        assert np.allclose(np.diff(np.log(g)), np.log(10) / 6)

    @pytest.mark.parametrize("kw", [dict(d_start=0.0), dict(d_start=2e-4),
                                    dict(points=2), dict(d_end=math.inf),
                                    dict(outputs=("bogus",))])
    def test_validation(self, kw):
        with pytest.raises(InvalidSpecError):
            replace(small_plan(), **kw).validate()

    def test_hash_is_deterministic_and_sensitive(self):
        a, b = small_plan(), small_plan()
        assert a.plan_hash() == b.plan_hash()
        assert a.plan_hash() != small_plan(points=6).plan_hash()
        # the scene hash ignores the grid length but not the geometry
        assert a.scene_hash() == small_plan(points=6).scene_hash()
        assert a.scene_hash() != small_plan(side=2e-3).scene_hash()


class TestSweep:
    def test_deterministic_across_workers(self):
        c1, r1 = run_sweep(small_plan(), workers=1)
        c2, r2 = run_sweep(small_plan(), workers=2)
        assert np.array_equal(c1.C, c2.C) and np.array_equal(c1.d, c2.d)
        assert r1.ok and r1.monotone and r1.plan_hash == r2.plan_hash
        assert c1.solver["plan_hash"] == r1.plan_hash

    def test_cache_hits(self, tmp_path):
        c1, r1 = run_sweep(small_plan(), cache=tmp_path)
        c2, r2 = run_sweep(small_plan(), cache=tmp_path)
        assert r1.cached == 0 and r2.cached == len(c2)
        assert np.array_equal(c1.C, c2.C)
        # a longer grid reuses nothing but its shared endpoints
        _, r3 = run_sweep(small_plan(points=9), cache=tmp_path)
        assert r3.cached == 5

    def test_cache_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(pipeline.CACHE_ENV, str(tmp_path))
        assert pipeline.cache_dir() == tmp_path
        assert pipeline.cache_dir(tmp_path / "x") == tmp_path / "x"
        monkeypatch.delenv(pipeline.CACHE_ENV)
        assert pipeline.cache_dir() is None

    def test_partial_failure(self):
        curve, rec = run_sweep(small_plan(), solver=fake_solver)
        assert len(curve) == 4 and not rec.ok
        assert len(rec.failures) == 1
        m = rec.manifest()
        assert "failures = 1" in m and "injected" in m and "plan_hash = " in m

    def test_partial_failure_parallel(self):
        c1, _ = run_sweep(small_plan(), solver=fake_solver)
        c2, _ = run_sweep(small_plan(), solver=fake_solver, workers=2)
        assert np.array_equal(c1.C, c2.C)

    def test_all_fail(self):
        with pytest.raises(SolverError, match="every distance failed"):
            run_sweep(small_plan(), solver=failing_solver)

    def test_plate_scaling_invariance(self):
        # C d / (eps0 A) depends only on d/L for a plate pair
        c1, _ = run_sweep(small_plan(1e-3))
        c2, _ = run_sweep(small_plan(3e-3))
        r1 = c1.C * c1.d / (EPS0 * 1e-6)
        r2 = c2.C * c2.d / (EPS0 * 9e-6)
        assert np.allclose(r1, r2, rtol=1e-9)
        assert np.all(r1 > 1)  # fringing adds capacitance


class TestConfigurations:
    @pytest.mark.parametrize("name", pipeline.CONFIGURATIONS)
    def test_named_plans_validate(self, name):
        plan = pipeline.configuration(name, "smoke")
        plan.validate()
        assert plan.points == pipeline.TIERS["smoke"].points and plan.label == name

    def test_tiers_refine(self):
        a = pipeline.configuration("whole_sphere", "smoke")
        b = pipeline.configuration("whole_sphere", "full")
        assert b.probe.resolution > a.probe.resolution

    def test_unknown(self):
        with pytest.raises(InvalidSpecError):
            pipeline.configuration("pyramid")
        with pytest.raises(InvalidSpecError):
            pipeline.configuration("whole_sphere", "huge")
        with pytest.raises(InvalidSpecError):
            pipeline.reproduce_paper("fig9", "smoke")

    def test_edge_sphere_offset(self):
        plan = pipeline.configuration("edge_sphere")
        assert plan.offset == pytest.approx(pipeline.SPHERE_PLATE / 2)

    def test_drift_windows(self):
        from edgecap.numdiff import CapacitanceCurve

        c = CapacitanceCurve(np.geomspace(1, 10, 6), np.linspace(6, 1, 6))
        assert pipeline.drift_windows(c) == pytest.approx(list(c.d[3:]))


class TestOutput:
    def test_write_curve_csv(self, tmp_path):
        from edgecap.cli import read_curve_csv

        curve, _ = run_sweep(small_plan())
        p = tmp_path / "c.csv"
        pipeline.write_curve_csv(p, curve, extra={"twice": 2 * curve.C})
        lines = p.read_text().splitlines()
        assert lines[0] == "d_m,C_F,geometry,resolution,twice"
        assert lines[1].split(",")[2] == "small"
        back = read_curve_csv(p)
        assert np.array_equal(back.d, curve.d) and np.array_equal(back.C, curve.C)

    def test_reproduce_fig2_smoke(self, tmp_path, sweep_cache):
        b = pipeline.reproduce_paper("fig2", "smoke", tmp_path, cache=sweep_cache)
        names = {f.name for f in b.files}
        assert {"parallel_plates_capacitance.csv", "reference_traces.csv",
                "exponent_drift.csv", "manifest.txt"} <= names
        c = b.curves["parallel_plates"]
        assert np.all(c.C > b.traces["ideal"])
        scan = b.tables["drift"]
        assert all(0.9 < p.d0_fixed.params["eps"] <= 1.0 for p in scan)
        manifest = (tmp_path / "manifest.txt").read_text()
        assert manifest.startswith("target = fig2\ntier = smoke\n")
        assert "[parallel_plates]" in manifest and "plan_hash = " in manifest
