import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgecap.analytic import (EPS0, cap_cylinder_exact, cap_cylinder_exact_derivatives,
                              cap_parallel_ideal, cap_sphere_exact, cap_sphere_exact_derivative)
from edgecap.exceptions import InvalidSpecError
from edgecap.numdiff import (CapacitanceCurve, Transform, capacitance_derivatives,
                             convergence_order, curvature_curve, force_curve,
                             lagrange3_derivative, lagrange3_second_derivative)

A = (8.86e-3) ** 2


class TestLagrange3:
    def test_quadratic_even(self):
        assert lagrange3_derivative((0, 1, 2), (0, 1, 4), 1) == pytest.approx(2.0, abs=1e-14)

    def test_quadratic_uneven(self):
        assert lagrange3_derivative((1, 2, 4), (1, 4, 16), 2) == pytest.approx(4.0, abs=1e-13)

    def test_log(self):
        xs = (1.0, 1.1, 1.21)
        val = lagrange3_derivative(xs, np.log(xs), 1.1)
        assert val == pytest.approx(1 / 1.1, rel=3.5e-3)  # ~0.3% (h**2)

    def test_second_derivative(self):
        assert lagrange3_second_derivative((1, 2, 4), (1, 4, 16)) == pytest.approx(2.0)

    def test_coincident(self):
        with pytest.raises(InvalidSpecError):
            lagrange3_derivative((1, 1, 2), (1, 2, 3), 1)

    def test_wrong_count(self):
        with pytest.raises(InvalidSpecError):
            lagrange3_derivative((1, 2), (1, 2), 1)

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3, unique=True),
           st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-10, 10))
    def test_exact_for_quadratics(self, xs, a, b, c, at):
        xs = sorted(xs)
        if min(np.diff(xs)) < 1e-2:
            return
        ys = [a * x * x + b * x + c for x in xs]
        assert lagrange3_derivative(xs, ys, at) == pytest.approx(2 * a * at + b, abs=1e-7)


class TestCurve:
    def test_invariants(self):
        with pytest.raises(InvalidSpecError):
            CapacitanceCurve([1, 1, 2], [3, 2, 1])
        with pytest.raises(InvalidSpecError):
            CapacitanceCurve([1, 2, 3], [3, -2, 1])
        with pytest.raises(InvalidSpecError):
            CapacitanceCurve([1, 2], [3, 2, 1])
        c = CapacitanceCurve([1, 2, 3], [3, 2, 1])
        with pytest.raises(ValueError):
            c.d[0] = 5.0

    def test_window(self):
        c = CapacitanceCurve(np.geomspace(1, 100, 11), np.linspace(10, 1, 11))
        w = c.window(2, 50)
        assert w.d.min() >= 2 and w.d.max() <= 50 and len(w) == 7

    def test_too_few_points(self):
        with pytest.raises(InvalidSpecError):
            force_curve(CapacitanceCurve([1, 2], [2, 1]))


class TestForce:
    def test_parallel_plates_exact(self):
        d = np.geomspace(5e-6, 2e-3, 25)
        fc = force_curve(CapacitanceCurve(d, cap_parallel_ideal(A, d)), V=1.0)
        assert np.allclose(fc.y, 0.5 * EPS0 * A / d**2, rtol=1e-6, atol=0)
        assert fc.transform == "Log" and fc.observable == "force"

    def test_cylinder(self):
        R = 12e-3
        d = np.geomspace(0.4e-6, 10e-6, 25)
        fc = force_curve(CapacitanceCurve(d, cap_cylinder_exact(R, 4e-3, d)), V=2.0)
        ref = -0.5 * cap_cylinder_exact_derivatives(R, 4e-3, d)[0] * 4.0
        assert np.allclose(fc.y, ref, rtol=1e-3, atol=0)

    def test_sphere_semilog(self):
        R = 0.15e-3
        d = np.geomspace(0.2e-6, 25e-6, 40)
        curve = CapacitanceCurve(d, [cap_sphere_exact(R, x, 1e-15) for x in d])
        fc = force_curve(curve, transform=Transform.SEMILOG)
        ref = np.array([-0.5 * cap_sphere_exact_derivative(R, x) for x in d])
        # stencil error bound ~ h**2 with h the log-spacing
        h = math.log(d[1] / d[0])
        assert np.max(np.abs(fc.y / ref - 1)) < h**2

    def test_attractive_sign(self):
        d = np.geomspace(1e-6, 1e-4, 12)
        for C in (cap_cylinder_exact(1e-2, 1e-3, d), cap_parallel_ideal(1e-4, d)):
            for tr in Transform:
                c1, _ = capacitance_derivatives(CapacitanceCurve(d, C), tr)
                assert np.all(c1 < 0)
                assert np.all(force_curve(CapacitanceCurve(d, C), 1.0, tr).y > 0)

    def test_nonfinite_voltage(self):
        c = CapacitanceCurve([1, 2, 3], [3, 2, 1])
        with pytest.raises(InvalidSpecError):
            force_curve(c, V=math.nan)

    @settings(max_examples=50)
    @given(st.floats(0.1, 3.0), st.floats(-2.0, 2.0), st.floats(1e-20, 1e-10))
    def test_exact_for_power_laws(self, eps, logk, k):
        # quadratic in (ln d, ln C) -> stencil is exact up to round-off
        d = np.geomspace(1e-7, 1e-4, 9)
        C = k * d ** (-eps) * np.exp(0.05 * logk * np.log(d / 1e-6) ** 2)
        c1, _ = capacitance_derivatives(CapacitanceCurve(d, C), Transform.LOG)
        u = np.log(d / 1e-6)
        exact = C / d * (-eps + 0.1 * logk * u)
        assert np.allclose(c1, exact, rtol=1e-8, atol=0)


class TestCurvature:
    def test_parallel_plates(self):
        d = np.geomspace(5e-6, 2e-3, 25)
        cc = curvature_curve(CapacitanceCurve(d, cap_parallel_ideal(A, d)), V=1.0, m_eff=1.0)
        ref = 2 * EPS0 * A / d**3 / (8 * math.pi**2)
        assert np.allclose(cc.y, ref, rtol=1e-3, atol=0)
        assert np.all(cc.y > 0)

    def test_linear_has_zero_second_derivative(self):
        d = np.array([1.0, 1.5, 2.5, 3.0, 4.5])
        C = 10.0 - 2.0 * d
        # a line is quadratic in d but not in ln d; use SemiLog on a line in ln d instead
        Cl = 10.0 - 2.0 * np.log(d)
        _, c2 = capacitance_derivatives(CapacitanceCurve(d, Cl), Transform.SEMILOG)
        assert np.allclose(c2, 2.0 / d**2, rtol=1e-12)
        from edgecap.numdiff import _stencil_derivatives

        _, w2 = _stencil_derivatives(d, C)
        assert np.allclose(w2, 0.0, atol=1e-12)

    def test_cylinder(self):
        R = 12e-3
        d = np.geomspace(0.4e-6, 160e-6, 60)
        cc = curvature_curve(CapacitanceCurve(d, cap_cylinder_exact(R, 1.0, d)), 1.0, 2.0)
        ref = cap_cylinder_exact_derivatives(R, 1.0, d)[1] / (8 * math.pi**2 * 2.0)
        # interior points are second order; the one-sided ends of a 3-point stencil are first order
        assert np.allclose(cc.y[1:-1], ref[1:-1], rtol=2e-3, atol=0)
        assert np.allclose(cc.y, ref, rtol=5e-2, atol=0)

    def test_bad_mass(self):
        with pytest.raises(InvalidSpecError):
            curvature_curve(CapacitanceCurve([1, 2, 3], [3, 2, 1]), m_eff=0.0)


def test_convergence_order_helper():
    h = np.array([0.1, 0.05, 0.025])
    assert convergence_order(3 * h**2, h) == pytest.approx(2.0)


@pytest.mark.parametrize("transform", list(Transform))
def test_halving_spacing_quarters_error(transform):
    R = 12e-3
    errs = []
    for n in (33, 65, 129):
        d = np.geomspace(0.4e-6, 160e-6, n)
        c1, _ = capacitance_derivatives(CapacitanceCurve(d, cap_cylinder_exact(R, 1.0, d)), transform)
        errs.append(np.max(np.abs(c1 / cap_cylinder_exact_derivatives(R, 1.0, d)[0] - 1)))
    assert 3.3 < errs[0] / errs[1] < 4.6 and 3.5 < errs[1] / errs[2] < 4.4
