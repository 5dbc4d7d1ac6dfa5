"""Charge-based boundary-element capacitance solver.

Each panel carries a uniform surface charge. The influence (potential
coefficient) matrix ``P[i, j]`` is the potential at the centroid of panel
``i`` due to a unit charge spread uniformly over panel ``j``, built from the
free-space Green's function ``1/(4*pi*eps0*r)``:

* self and near pairs use the closed-form integral of ``1/r`` over a planar
  polygon (exact for any flat panel, including the singular self term);
* intermediate pairs use a six-point rule on the source panel;
* far pairs use the centroid-to-centroid point-charge value.

Solving ``P q = v`` for prescribed conductor potentials gives the panel
charges. The two-conductor capacitance is that of an isolated, overall
neutral pair: the probe and plate are driven at ``+V/2`` and ``-V/2`` on top
of a floating common-mode potential chosen so that ``Q_probe + Q_plate = 0``.
For mirror-symmetric pairs the common mode is zero.
"""

from __future__ import annotations

import logging
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg, gmres

from .analytic import EPS0
from .exceptions import InvalidSpecError, SolverError
from .geometry import PLATE_TAGS, GeometryScene, PanelMesh, ShapeTag

logger = logging.getLogger(__name__)

_PAIR_CHUNK = 150_000
SOLVE_METHODS = ("direct", "gmres", "cg")


@dataclass(frozen=True)
class SolverSettings:
    """Numerical controls for assembly and solve.

    ``near_field`` and ``mid_field`` are distances in units of the source
    panel diameter below which the analytic integral, respectively the
    ``quadrature_order``-point rule, replaces the point-charge value.

    ``solve_method``: ``"direct"`` (LU, switches to ``"gmres"`` above
    ``dense_limit`` unknowns), ``"gmres"`` (Jacobi-preconditioned GMRES on
    the collocation system itself) or ``"cg"`` (Jacobi-preconditioned CG on
    the symmetric part of the matrix; collocation matrices on graded meshes
    are not symmetric, so this solves a slightly different system).
    """

    quadrature_order: int = 6
    near_field: float = 2.0
    mid_field: float = 6.0
    solve_method: str = "direct"
    iterative_tol: float = 1e-10
    max_iterations: int = 5000
    dense_limit: int = 9000
    max_panels: int = 16000
    symmetry: bool = False

    def validate(self):
        if self.quadrature_order not in (1, 6):
            raise InvalidSpecError("quadrature_order must be 1 or 6")
        if self.solve_method not in SOLVE_METHODS:
            raise InvalidSpecError(f"solve_method must be one of {SOLVE_METHODS}")
        for k in ("near_field", "mid_field", "iterative_tol"):
            if not getattr(self, k) > 0:
                raise InvalidSpecError(f"{k} must be > 0")
        if self.max_iterations < 1 or self.dense_limit < 1 or self.max_panels < 1:
            raise InvalidSpecError("iteration and size limits must be >= 1")
        return self

    def to_dict(self):
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# polygon integrals


def polygon_integrals(points, vertices, normals):
    """Exact ``∫ dA/|p - r'|`` and signed solid angle of flat polygons.

    ``points (P, 3)``, ``vertices (P, 4, 3)`` and ``normals (P, 3)`` are
    paired row by row. The solid angle is positive on the side the normal
    points to, so the normal field of a panel with charge density ``sigma``
    is ``sigma * omega / (4*pi*eps0)``.
    """
    p = np.asarray(points, float)
    v = np.asarray(vertices, float)
    n = np.asarray(normals, float)
    h = np.einsum("pj,pj->p", p - v[:, 0], n)
    rho = p - h[:, None] * n
    ah = np.abs(h)
    h2 = h * h
    integral = np.zeros(len(p))
    sangle = np.zeros(len(p))
    for k in range(4):
        a = v[:, k]
        b = v[:, (k + 1) % 4]
        e = b - a
        le = np.linalg.norm(e, axis=1)
        ok = le > 0
        t = e / np.where(ok, le, 1.0)[:, None]
        m = np.cross(t, n)
        ar = a - rho
        p0 = np.einsum("pj,pj->p", ar, m)
        lm = np.einsum("pj,pj->p", ar, t)
        lp = lm + le
        r0sq = p0 * p0 + h2
        r0 = np.sqrt(r0sq)
        safe = np.where(r0 > 0, r0, 1.0)
        log_term = np.where(r0 > 0, p0 * (np.arcsinh(lp / safe) - np.arcsinh(lm / safe)), 0.0)
        rp = np.sqrt(r0sq + lp * lp)
        rm = np.sqrt(r0sq + lm * lm)
        s = np.arctan2(p0 * lp, r0sq + ah * rp) - np.arctan2(p0 * lm, r0sq + ah * rm)
        integral += np.where(ok, log_term, 0.0)
        sangle += np.where(ok, s, 0.0)
    integral -= ah * sangle
    return integral, np.sign(h) * sangle


def _combined_mesh(scene):
    v, labels = scene.combined()
    return PanelMesh(v, ShapeTag.RECT_PLATE, 1.0), labels


# ---------------------------------------------------------------------------
# influence matrix


@dataclass
class InfluenceMatrix:
    """Dense potential-coefficient matrix (volt per coulomb).

    Row/column ``i`` belongs to panel ``panel_index_map[i]`` of the combined
    (probe, then plate) panel list; ``labels[i]`` is 0 for the probe and 1 for
    the plate. When mirror symmetry is exploited each row stands for a whole
    orbit of mirror-image panels: ``multiplicity[i]`` counts them and
    ``orbit[k]`` maps every panel ``k`` to its row.
    """

    entries: np.ndarray
    labels: np.ndarray
    panel_index_map: np.ndarray
    areas: np.ndarray
    multiplicity: np.ndarray | None = None
    orbit: np.ndarray | None = None
    _lu: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.multiplicity is None:
            self.multiplicity = np.ones(len(self.labels))
        if self.orbit is None:
            self.orbit = np.arange(len(self.labels))

    @property
    def n(self):
        return self.entries.shape[0]

    def asymmetry(self):
        """Relative Frobenius asymmetry ``|P - P^T| / |P|``."""
        P = self.entries
        return float(np.linalg.norm(P - P.T) / np.linalg.norm(P))

    def dump(self, path):
        """Write the debug dump: uint64 little-endian N, then N*N float64 row-major."""
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", self.n))
            fh.write(np.ascontiguousarray(self.entries, dtype="<f8").tobytes())

    @staticmethod
    def load(path):
        """Read a matrix written by :meth:`dump` (entries only)."""
        with open(path, "rb") as fh:
            (n,) = struct.unpack("<Q", fh.read(8))
            data = np.frombuffer(fh.read(8 * n * n), dtype="<f8")
        return data.reshape(n, n)


def _assemble_rows(mesh, rows, settings, fold=None):
    """Rows ``rows`` of the (unscaled) ``∫ 1/r`` influence matrix.

    ``fold`` (sparse, ``m x N``) sums columns over symmetry orbits chunk by
    chunk, so only ``len(rows) x m`` is ever stored.
    """
    N = len(mesh)
    c = mesh.centroids
    D = mesh.diameters
    A = mesh.areas
    verts = mesh.vertices
    normals = mesh.normals
    if settings.quadrature_order == 6:
        qp, qw = mesh.quadrature()
    out = np.empty((len(rows), N if fold is None else fold.shape[0]))
    step = max(1, int(2_000_000 // N))
    for r0 in range(0, len(rows), step):
        ridx = rows[r0:r0 + step]
        diff = c[ridx, None, :] - c[None, :, :]
        r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        del diff
        near = r < settings.near_field * D[None, :]
        with np.errstate(divide="ignore"):
            block = 1.0 / r
        if settings.quadrature_order == 6:
            mid = (r < settings.mid_field * D[None, :]) & ~near
            bi, bj = np.nonzero(mid)
            for s0 in range(0, len(bi), _PAIR_CHUNK // 6):
                si = bi[s0:s0 + _PAIR_CHUNK // 6]
                sj = bj[s0:s0 + _PAIR_CHUNK // 6]
                d = c[ridx[si], None, :] - qp[sj]
                block[si, sj] = (qw[sj] / np.sqrt(np.einsum("pqk,pqk->pq", d, d))).sum(axis=1) / A[sj]
        bi, bj = np.nonzero(near)
        for s0 in range(0, len(bi), _PAIR_CHUNK):
            si = bi[s0:s0 + _PAIR_CHUNK]
            sj = bj[s0:s0 + _PAIR_CHUNK]
            integral, _ = polygon_integrals(c[ridx[si]], verts[sj], normals[sj])
            block[si, sj] = integral / A[sj]
        out[r0:r0 + len(ridx)] = block if fold is None else (fold @ block.T).T
    return out


def mirror_orbits(mesh, tol=1e-7):
    """Orbit index of every panel under the mirror planes ``x = 0`` and ``y = 0``.

    A mirror is used only if it maps the panel set onto itself (centroids
    within ``tol`` panel diameters, equal areas). Returns ``(orbit, mirrors)``
    where ``orbit[k]`` is the smallest panel index in the orbit of ``k``.
    """
    from scipy.spatial import cKDTree

    c = mesh.centroids
    tree = cKDTree(c)
    maps = []
    mirrors = []
    for axis in (0, 1):
        img = c.copy()
        img[:, axis] *= -1
        dist, idx = tree.query(img)
        if np.all(dist <= tol * mesh.diameters) and np.allclose(mesh.areas[idx], mesh.areas,
                                                                rtol=1e-9):
            maps.append(idx)
            mirrors.append("xyz"[axis])
    orbit = np.arange(len(c))
    for m in maps:
        orbit = np.minimum(orbit, orbit[m])
    for m in maps:
        orbit = np.minimum(orbit, orbit[m])
    return orbit, mirrors


def _check_size(n, settings):
    if n > settings.max_panels:
        raise SolverError(
            f"{n} unknowns exceed max_panels={settings.max_panels}; the dense matrix would need "
            f"{8 * n * n / 1e9:.1f} GB. Lower the mesh resolution or raise the cap.")


def assemble(scene, settings=None):
    """Assemble the influence matrix of a scene (or of a single :class:`PanelMesh`).

    With ``settings.symmetry`` the matrix is folded over the mirror planes
    of the scene; it then acts on one charge per orbit of image panels and is
    only valid for mirror-symmetric drives.
    """
    settings = (settings or SolverSettings()).validate()
    if isinstance(scene, GeometryScene):
        mesh, labels = _combined_mesh(scene)
    elif isinstance(scene, PanelMesh):
        mesh, labels = scene, np.zeros(len(scene), int)
    else:
        raise TypeError("assemble expects a GeometryScene or PanelMesh")
    N = len(mesh)
    if N == 0:
        raise InvalidSpecError("empty mesh")
    scale = 1.0 / (4.0 * math.pi * EPS0)
    if settings.symmetry:
        orbit, mirrors = mirror_orbits(mesh)
        reps, inverse, counts = np.unique(orbit, return_inverse=True, return_counts=True)
        logger.debug("mirror planes %s: %d panels -> %d orbits", mirrors, N, len(reps))
        _check_size(len(reps), settings)
        fold = sparse.csr_matrix((np.ones(N), (inverse, np.arange(N))), shape=(len(reps), N))
        folded = _assemble_rows(mesh, reps, settings, fold)
        P = InfluenceMatrix(folded * scale, labels[reps], reps, mesh.areas[reps].copy(),
                            counts.astype(float), inverse)
    else:
        _check_size(N, settings)
        P = InfluenceMatrix(_assemble_rows(mesh, np.arange(N), settings) * scale, labels,
                            np.arange(N), mesh.areas.copy())
    if not np.all(np.isfinite(P.entries)):
        raise SolverError("non-finite influence coefficients (overlapping panels?)")
    return P


# ---------------------------------------------------------------------------
# solves


@dataclass(frozen=True)
class ChargeSolution:
    """Panel charges (C) for a prescribed drive."""

    panel_charges: np.ndarray
    conductor_totals: dict
    drive: dict
    residual_norm: float
    common_mode: float = 0.0


def _factor(P):
    if P._lu is None:
        # singularity is reported through the condition estimate below
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(P.entries, check_finite=False)
        anorm = np.abs(P.entries).sum(axis=0).max()
        rcond, info = sla.lapack.dgecon(lu, anorm, norm="1")
        if info != 0 or not np.isfinite(rcond) or rcond < 1e-14:
            raise SolverError(f"influence matrix is singular or ill-conditioned "
                              f"(reciprocal condition {rcond:.3g})", condition=1 / max(rcond, 1e-300))
        P._lu = (lu, piv, 1.0 / rcond)
    return P._lu


def _solve_many(P, rhs, settings):
    settings = settings or SolverSettings()
    method = settings.solve_method
    if method == "direct" and P.n > settings.dense_limit:
        method = "gmres"
    if method == "direct":
        lu, piv, _ = _factor(P)
        return sla.lu_solve((lu, piv), rhs, check_finite=False)
    A = P.entries if method == "gmres" else 0.5 * (P.entries + P.entries.T)
    dinv = 1.0 / np.diag(A)
    op = LinearOperator(A.shape, matvec=lambda x: A @ x, dtype=float)
    pre = LinearOperator(A.shape, matvec=lambda x: dinv * x, dtype=float)
    out = np.empty_like(rhs)
    for k in range(rhs.shape[1]):
        b = rhs[:, k]
        if method == "gmres":
            x, info = gmres(op, b, rtol=settings.iterative_tol, atol=0.0, restart=200,
                            maxiter=settings.max_iterations, M=pre)
        else:
            x, info = cg(op, b, rtol=settings.iterative_tol, atol=0.0,
                         maxiter=settings.max_iterations, M=pre)
        res = float(np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300))
        if info != 0:
            raise SolverError(f"{method} did not converge (relative residual {res:.3g})",
                              residual=res)
        out[:, k] = x
    return out


def _unit_charges(P, settings):
    """Charges for unit potential on the probe (column 0) and on the plate (column 1)."""
    rhs = np.stack([(P.labels == 0).astype(float), (P.labels == 1).astype(float)], axis=1)
    return _solve_many(P, rhs, settings)


def solve_charges(P, drive, settings=None, *, floating=True):
    """Panel charges for conductor potentials ``drive = {"V_probe": .., "V_plate": ..}``.

    With ``floating=True`` (the isolated pair) a common-mode potential is
    added to both conductors so the total charge vanishes; otherwise the
    potentials are taken relative to infinity.
    """
    vp = float(drive["V_probe"])
    vq = float(drive["V_plate"])
    if not (np.isfinite(vp) and np.isfinite(vq)):
        raise InvalidSpecError("drive potentials must be finite")
    q = _unit_charges(P, settings)
    tot = P.multiplicity @ q
    phi = 0.0
    if floating and tot.sum() != 0:
        phi = -(vp * tot[0] + vq * tot[1]) / tot.sum()
    red = q[:, 0] * (vp + phi) + q[:, 1] * (vq + phi)
    v = np.where(P.labels == 0, vp + phi, vq + phi)
    resid = float(np.linalg.norm(P.entries @ red - v) / max(np.linalg.norm(v), 1e-300))
    w = P.multiplicity * red
    totals = {"Q_probe": float(w[P.labels == 0].sum()), "Q_plate": float(w[P.labels == 1].sum())}
    return ChargeSolution(red[P.orbit], totals, {"V_probe": vp, "V_plate": vq}, resid, phi)


def maxwell_matrix(P, settings=None):
    """2x2 Maxwell capacitance matrix of (probe, plate), symmetrized."""
    q = _unit_charges(P, settings) * P.multiplicity[:, None]
    c = np.array([[q[P.labels == 0, 0].sum(), q[P.labels == 0, 1].sum()],
                  [q[P.labels == 1, 0].sum(), q[P.labels == 1, 1].sum()]])
    return 0.5 * (c + c.T)


def pair_capacitance(c):
    """Capacitance of an isolated neutral pair from its Maxwell matrix."""
    return float((c[0, 0] * c[1, 1] - c[0, 1] ** 2) / (c[0, 0] + c[1, 1] + 2 * c[0, 1]))


@dataclass(frozen=True)
class CapacitanceResult:
    capacitance: float
    maxwell: np.ndarray
    n_panels: int
    gap: float


def solve_scene(scene, settings=None):
    """Assemble and solve one scene; returns the capacitance plus diagnostics."""
    P = assemble(scene, settings)
    c = maxwell_matrix(P, settings)
    C = pair_capacitance(c)
    if not C > 0:
        raise SolverError(f"non-positive capacitance {C!r}")
    return CapacitanceResult(C, c, P.n, scene.gap)


def capacitance(scene, settings=None):
    """Probe-plate capacitance ``Q_probe / (V_probe - V_plate)`` of the neutral pair (F)."""
    return solve_scene(scene, settings).capacitance


def capacitance_inner_region(scene, settings=None, V=1.0):
    """Capacitance carried only by the field lines inside the inter-plate volume.

    Computes the electric flux through the mid-plane of the gap restricted to
    the overlap of the two plates, ``Q_in = eps0 * ∫ E_z dA``, and returns
    ``Q_in / V``. Fringing flux that leaves the facing region is excluded, so
    the value is below the full capacitance.
    """
    for m in (scene.probe, scene.plate):
        if m.shape_tag not in PLATE_TAGS:
            raise InvalidSpecError("capacitance_inner_region requires a parallel-plate scene")
    settings = settings or SolverSettings()
    P = assemble(scene, settings)
    sol = solve_charges(P, {"V_probe": V / 2, "V_plate": -V / 2}, settings)
    mesh, _ = _combined_mesh(scene)
    sigma = sol.panel_charges / mesh.areas
    # facing region: probe panels whose projection falls on the plate
    lx = scene.plate.metadata["lx"]
    ly = scene.plate.metadata["ly"]
    pc = scene.probe.centroids
    inside = (np.abs(pc[:, 0]) < lx / 2) & (np.abs(pc[:, 1]) < ly / 2)
    pts = pc[inside].copy()
    pts[:, 2] = scene.gap / 2
    w = scene.probe.areas[inside]
    ez = np.zeros(len(pts))
    N = len(mesh)
    rows = max(1, int(_PAIR_CHUNK // N))
    up = np.array([0.0, 0.0, 1.0])
    for i0 in range(0, len(pts), rows):
        blk = pts[i0:i0 + rows]
        pi = np.repeat(blk, N, axis=0)
        vj = np.tile(mesh.vertices, (len(blk), 1, 1))
        nj = np.tile(mesh.normals, (len(blk), 1))
        _, omega = polygon_integrals(pi, vj, nj)
        # normal field of each panel, projected on +z
        ez_blk = (omega * (nj @ up)).reshape(len(blk), N) @ sigma
        ez[i0:i0 + rows] = ez_blk / (4 * math.pi * EPS0)
    q_in = EPS0 * float(np.sum(-ez * w))
    return q_in / V
