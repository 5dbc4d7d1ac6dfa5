"""Boundary-element capacitance curves and edge-effect calibration fits.

Modules: :mod:`geometry` (panel meshes and probe/plate scenes),
:mod:`analytic` (closed-form references), :mod:`bem` (solver),
:mod:`numdiff` (force and frequency-shift observables), :mod:`fitting`
(offset power-law/log fits), :mod:`pipeline` (sweeps and bundles) and
:mod:`cli`.
"""

__version__ = "0.1.0"

from .analytic import (EPS0, cap_cylinder_exact, cap_cylinder_pfa, cap_parallel_ideal,
                       cap_sphere_exact, cap_sphere_ipfa, cap_sphere_pfa)
from .bem import SolverSettings, assemble, capacitance, solve_charges
from .exceptions import (ConfigError, DomainError, EdgecapError, FitConvergenceError,
                         InvalidSpecError, SolverError)
from .fitting import FitModel, FitResult, exponent_drift_scan, fit, table_one, table_two
from .geometry import GeometryScene, PanelMesh, ShapeSpec, ShapeTag, assemble_scene
from .numdiff import (CapacitanceCurve, DerivedCurve, curvature_curve, force_curve,
                      lagrange3_derivative)

__all__ = [
    "EPS0", "cap_cylinder_exact", "cap_cylinder_pfa", "cap_parallel_ideal", "cap_sphere_exact",
    "cap_sphere_ipfa", "cap_sphere_pfa", "SolverSettings", "assemble", "capacitance",
    "solve_charges", "ConfigError", "DomainError", "EdgecapError", "FitConvergenceError",
    "InvalidSpecError", "SolverError", "FitModel", "FitResult", "exponent_drift_scan", "fit",
    "table_one", "table_two", "GeometryScene", "PanelMesh", "ShapeSpec", "ShapeTag",
    "assemble_scene", "CapacitanceCurve", "DerivedCurve", "curvature_curve", "force_curve",
    "lagrange3_derivative",
]
