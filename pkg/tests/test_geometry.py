import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from edgecap.exceptions import InvalidSpecError
from edgecap.geometry import (ShapeSpec, ShapeTag, assemble_scene, build_cylinder,
                              build_rect_plate, build_sphere, build_square_plate,
                              build_truncated_sphere, effective_length, graded_nodes,
                              scene_counts, segmented_nodes)


def lateral_area(mesh):
    return mesh.areas[:mesh.metadata["lateral_panels"]].sum()


def check_panels(mesh):
    assert np.all(mesh.areas > 0)
    assert np.allclose(np.linalg.norm(mesh.normals, axis=1), 1.0, atol=1e-12)
    # centroid lies on the panel plane and inside its bounding box
    off = np.einsum("nj,nj->n", mesh.centroids - mesh.vertices[:, 0], mesh.normals)
    assert np.all(np.abs(off) <= 1e-12 * mesh.diameters + 1e-300)
    assert np.all(mesh.centroids >= mesh.vertices.min(axis=1) - 1e-12 * mesh.diameters[:, None])
    assert np.all(mesh.centroids <= mesh.vertices.max(axis=1) + 1e-12 * mesh.diameters[:, None])
    # no duplicated panels
    dist, _ = cKDTree(mesh.centroids).query(mesh.centroids, k=2)
    assert np.all(dist[:, 1] > 0)


class TestNodes:
    def test_uniform(self):
        n = graded_nodes(0.0, 1.0, 0.25)
        assert np.allclose(n, [0, 0.25, 0.5, 0.75, 1.0])

    def test_graded_toward_focus(self):
        n = graded_nodes(0.0, 1.0, 0.2, foci=[(0.0, 1e-3)], growth=0.3)
        h = np.diff(n)
        assert h[0] < 5e-3 and h[-1] <= 0.2 + 1e-12
        assert np.all(np.diff(h) > -1e-12)

    def test_fixed_count(self):
        assert len(graded_nodes(0.0, 1.0, 0.1, count=7)) == 8

    def test_segments_hit_breaks(self):
        nodes, counts = segmented_nodes([0.0, 0.3, 1.0], 0.1)
        assert 0.3 in nodes and sum(counts) == len(nodes) - 1

    def test_bad_span(self):
        with pytest.raises(InvalidSpecError):
            graded_nodes(1.0, 1.0, 0.1)


class TestPlates:
    def test_reference_plate_area(self):
        m = build_square_plate(8.86e-3, 10)
        assert m.total_area == pytest.approx(78.4996e-6, rel=1e-12)
        assert m.shape_tag is ShapeTag.SQUARE_PLATE

    def test_unit_plate(self):
        m = build_square_plate(1.0, 2)
        assert len(m) == 4
        assert np.allclose(m.areas, 0.25)
        check_panels(m)

    def test_small_plate(self):
        m = build_square_plate(0.5e-3, 8, x_foci=[(0.0, 1e-6)], y_foci=[(0.0, 1e-6)])
        assert m.total_area == pytest.approx(0.25e-6, rel=1e-12)
        check_panels(m)

    def test_rect(self):
        m = build_rect_plate(10e-3, 28e-3, 6)
        assert m.total_area == pytest.approx(280e-6, rel=1e-12)
        assert np.allclose(m.normals, [0, 0, 1])

    @pytest.mark.parametrize("side,res", [(0.0, 4), (-1.0, 4), (1.0, 1), (1.0, 2.5)])
    def test_invalid(self, side, res):
        with pytest.raises(InvalidSpecError):
            build_square_plate(side, res)


class TestSphere:
    def test_area_converges(self):
        R = 0.15e-3
        exact = 4 * math.pi * R**2
        errs = [abs(build_sphere(R, n).total_area / exact - 1) for n in (4, 8, 16, 32)]
        assert errs[-1] < 5e-3
        assert all(b < a for a, b in zip(errs, errs[1:]))
        order = math.log2(errs[1] / errs[2])
        assert order >= 1

    def test_unit_deficit_shrinks(self):
        areas = [build_sphere(1.0, n, snap=False).total_area for n in (4, 8, 16)]
        assert all(a < 4 * math.pi for a in areas)
        assert areas[0] < areas[1] < areas[2]

    def test_centroid_symmetry(self):
        m = build_sphere(1.0, 12)
        c = (m.centroids * m.areas[:, None]).sum(axis=0) / m.total_area
        assert np.allclose(c, [0, 0, 1.0], atol=1e-12)
        check_panels(m)

    def test_outward_normals(self):
        m = build_sphere(1.0, 10)
        radial = m.centroids - [0, 0, 1.0]
        assert np.all(np.einsum("nj,nj->n", radial, m.normals) > 0)

    def test_invalid(self):
        with pytest.raises(InvalidSpecError):
            build_sphere(0.0, 8)


class TestTruncatedSphere:
    def test_full_cap_is_sphere(self):
        R = 1.0
        a = build_truncated_sphere(R, 2 * R, 12).total_area
        assert a == pytest.approx(build_sphere(R, 12).total_area, rel=1e-12)

    def test_cap_area(self):
        R, h = 0.15e-3, 0.05e-3
        m = build_truncated_sphere(R, h, 32)
        curved = m.areas[m.normals[:, 2] < 1 - 1e-9].sum()
        assert curved == pytest.approx(2 * math.pi * R * h, rel=5e-3)
        assert curved == pytest.approx(0.0471e-6, rel=5e-3)
        # flat back face closes the body
        disc = m.areas[np.isclose(m.normals[:, 2], 1.0)].sum()
        a = math.sqrt(h * (2 * R - h))
        assert disc == pytest.approx(math.pi * a * a, rel=5e-3)
        check_panels(m)

    @pytest.mark.parametrize("h", [0.0, -1.0, 2.5, 1e-6])
    def test_invalid(self, h):
        with pytest.raises(InvalidSpecError):
            build_truncated_sphere(1.0, h, 8)


class TestCylinder:
    def test_whole_lateral_area(self):
        R, L = 12e-3, 4e-3
        m = build_cylinder(R, L, 24)
        assert lateral_area(m) == pytest.approx(2 * math.pi * R * L, rel=5e-3)
        assert m.shape_tag is ShapeTag.CYLINDER
        check_panels(m)

    def test_wide_variant(self):
        m = build_cylinder(12e-3, 12e-3, 12)
        assert lateral_area(m) == pytest.approx(2 * math.pi * 12e-3 * 12e-3, rel=2e-2)

    def test_half_angle_is_half(self):
        R, L = 1.0, 2.0
        whole = lateral_area(build_cylinder(R, L, 16, math.pi, snap=False))
        half = lateral_area(build_cylinder(R, L, 16, math.pi / 2, snap=False))
        exact_ratio = 0.5
        assert half / whole == pytest.approx(exact_ratio, rel=2e-2)
        # both converge to the analytic lateral areas
        assert half == pytest.approx(math.pi * R * L, rel=2e-2)

    def test_truncated_tag_and_closure(self):
        m = build_cylinder(1.0, 1.0, 8, 0.5)
        assert m.shape_tag is ShapeTag.TRUNCATED_CYLINDER
        # the normals of a closed surface integrate to zero
        assert np.allclose((m.normals * m.areas[:, None]).sum(axis=0), 0.0, atol=1e-12)

    @pytest.mark.parametrize("th", [0.0, -0.1, 4.0])
    def test_invalid_angle(self, th):
        with pytest.raises(InvalidSpecError):
            build_cylinder(1.0, 1.0, 8, th)


def test_closed_sphere_normals_integrate_to_zero():
    m = build_sphere(1.0, 10)
    assert np.allclose((m.normals * m.areas[:, None]).sum(axis=0), 0.0, atol=1e-12)


class TestScene:
    sphere = ShapeSpec.sphere(0.15e-3, resolution=8, refinement=2.0)
    plate = ShapeSpec.square_plate(0.5e-3, resolution=8, refinement=2.0)

    def test_centered_gap(self):
        d = 1e-6
        sc = assemble_scene(self.sphere, self.plate, d)
        sep = sc.min_separation()
        diam = max(sc.probe.diameters.min(), sc.plate.diameters.min())
        assert abs(sep - d) <= diam
        assert sc.probe.vertices[..., 2].min() >= 0

    def test_edge_offset(self):
        sc = assemble_scene(self.sphere, self.plate, 1e-6, offset=0.25e-3)
        c = (sc.probe.centroids * sc.probe.areas[:, None]).sum(axis=0) / sc.probe.total_area
        assert c[0] == pytest.approx(0.25e-3, rel=1e-9)
        assert c[1] == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("gap", [0.0, -1e-6, math.nan])
    def test_invalid_gap(self, gap):
        with pytest.raises(InvalidSpecError):
            assemble_scene(self.sphere, self.plate, gap)

    def test_plate_must_be_plate(self):
        with pytest.raises(InvalidSpecError):
            assemble_scene(self.plate, self.sphere, 1e-6)

    @pytest.mark.parametrize("probe,plate", [
        (ShapeSpec.square_plate(1e-2, resolution=6), ShapeSpec.square_plate(1e-2, resolution=6)),
        (ShapeSpec.cylinder(12e-3, 4e-3, 0.5, resolution=6, refinement=2),
         ShapeSpec.rect_plate(10e-3, 28e-3, resolution=6, refinement=2)),
        (ShapeSpec.truncated_sphere(0.15e-3, 5e-6, resolution=8, refinement=2),
         ShapeSpec.square_plate(0.5e-3, resolution=8, refinement=2)),
    ])
    def test_mirror_symmetry(self, probe, plate):
        sc = assemble_scene(probe, plate, 2e-6)
        for mesh in (sc.probe, sc.plate):
            tree = cKDTree(mesh.centroids)
            for axis in (0, 1):
                img = mesh.centroids.copy()
                img[:, axis] *= -1
                dist, _ = tree.query(img)
                assert dist.max() <= 1e-9 * mesh.characteristic_size
        assert abs(sc.min_separation() - 2e-6) <= sc.probe.diameters.max()

    def test_reference_gap_fixes_topology(self):
        counts = scene_counts(self.sphere, self.plate, 0.2e-6)
        a = assemble_scene(self.sphere, self.plate, 0.2e-6, reference_gap=0.2e-6)
        b = assemble_scene(self.sphere, self.plate, 20e-6, reference_gap=0.2e-6)
        assert len(a.probe) == len(b.probe) and len(a.plate) == len(b.plate)
        assert b.probe.metadata["counts"] == counts[0]

    def test_scaling(self):
        lam = 3.7
        sc = assemble_scene(self.sphere, self.plate, 1e-6)
        big = sc.probe.scaled(lam)
        assert np.allclose(big.areas / sc.probe.areas, lam**2, rtol=1e-12, atol=0)
        s2 = ShapeSpec.sphere(0.15e-3 * lam, resolution=8, refinement=2.0)
        p2 = ShapeSpec.square_plate(0.5e-3 * lam, resolution=8, refinement=2.0)
        sc2 = assemble_scene(s2, p2, 1e-6 * lam)
        assert np.allclose(sc2.probe.areas / sc.probe.areas, lam**2, rtol=1e-10, atol=0)
        assert np.allclose(sc2.plate.areas / sc.plate.areas, lam**2, rtol=1e-10, atol=0)

    def test_effective_length(self):
        plate = ShapeSpec.rect_plate(10e-3, 28e-3)
        assert effective_length(ShapeSpec.cylinder(12e-3, 4e-3), plate) == 4e-3
        assert effective_length(ShapeSpec.cylinder(12e-3, 12e-3), plate) == 10e-3


class TestShapeSpec:
    def test_refined(self):
        s = ShapeSpec.sphere(1.0, resolution=8, refinement=2.0, growth=0.4).refined(2)
        assert (s.resolution, s.refinement, s.growth) == (16, 4.0, 0.2)

    def test_roundtrip_dict(self):
        s = ShapeSpec.cylinder(1.0, 2.0, 0.5, resolution=6)
        assert ShapeSpec(**{**s.to_dict(), "shape": ShapeTag(s.to_dict()["shape"])}) == s

    @pytest.mark.parametrize("spec", [
        ShapeSpec.sphere(-1.0), ShapeSpec.truncated_sphere(1.0, 3.0),
        ShapeSpec.cylinder(1.0, 1.0, 0.0), ShapeSpec.square_plate(1.0, resolution=1),
        ShapeSpec.rect_plate(1.0, None),
    ])
    def test_validate(self, spec):
        with pytest.raises(InvalidSpecError):
            spec.validate()
