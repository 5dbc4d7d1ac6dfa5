"""Panel meshes for plates, spheres, lenses and cylinders, and probe/plate scenes.

All lengths are in meters. Meshes are built in a local frame where the
point (or line) of the probe closest to the plate sits at the origin and the
plate lies in the ``z = 0`` plane; :func:`assemble_scene` lifts the probe by
the gap and applies the lateral offset along ``x``.

Spacing along every meshed coordinate is controlled by :func:`graded_nodes`:
panels are small near *foci* (the gap region, conductor edges) and grow
linearly away from them up to a coarse size set by ``resolution``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import InvalidSpecError

DEFAULT_GROWTH = 0.3
# plate nodes copy the probe's projected nodes within this polar angle of the contact line
ALIGN_ANGLE = math.pi / 3


class ShapeTag(str, enum.Enum):
    SQUARE_PLATE = "SquarePlate"
    RECT_PLATE = "RectPlate"
    SPHERE = "Sphere"
    TRUNCATED_SPHERE = "TruncatedSphere"
    CYLINDER = "Cylinder"
    TRUNCATED_CYLINDER = "TruncatedCylinder"


PLATE_TAGS = (ShapeTag.SQUARE_PLATE, ShapeTag.RECT_PLATE)


@dataclass(frozen=True)
class Panel:
    """A single flat panel (view into a :class:`PanelMesh`)."""

    vertices: np.ndarray
    centroid: np.ndarray
    area: float
    outward_normal: np.ndarray


class PanelMesh:
    """Flat triangular/quadrilateral panels covering one conductor surface.

    Vertices are stored as an ``(N, 4, 3)`` array; triangles repeat their
    first vertex in the fourth slot so every panel is a closed 4-gon with at
    most one zero-length edge.
    """

    def __init__(self, vertices, shape_tag, characteristic_size, metadata=None):
        v = np.ascontiguousarray(vertices, dtype=float)
        if v.ndim != 3 or v.shape[1:] != (4, 3):
            raise ValueError("vertices must have shape (N, 4, 3)")
        self.vertices = v
        self.shape_tag = ShapeTag(shape_tag)
        self.characteristic_size = float(characteristic_size)
        self.metadata = dict(metadata or {})
        self._compute_geometry()
        for name in ("vertices", "centroids", "areas", "normals", "diameters"):
            getattr(self, name).setflags(write=False)

    def _compute_geometry(self):
        v = self.vertices
        nxt = np.roll(v, -1, axis=1)
        avec = 0.5 * np.cross(v, nxt).sum(axis=1)
        area = np.linalg.norm(avec, axis=1)
        if np.any(area <= 0):
            raise InvalidSpecError("degenerate panel with zero area")
        normal = avec / area[:, None]
        # fan triangles from vertex 0 give the area-weighted centroid
        v0 = v[:, :1, :]
        tri_a = 0.5 * np.einsum("nkj,nj->nk", np.cross(v[:, 1:3] - v0, v[:, 2:4] - v0), normal)
        tri_c = (v0 + v[:, 1:3] + v[:, 2:4]) / 3.0
        centroid = (tri_a[:, :, None] * tri_c).sum(axis=1) / tri_a.sum(axis=1)[:, None]
        diff = v[:, :, None, :] - v[:, None, :, :]
        self.areas = area
        self.normals = normal
        self.centroids = centroid
        self.diameters = np.sqrt((diff**2).sum(axis=-1)).max(axis=(1, 2))

    def __len__(self):
        return len(self.vertices)

    def __getitem__(self, i):
        return Panel(self.vertices[i], self.centroids[i], float(self.areas[i]), self.normals[i])

    @property
    def panels(self):
        return [self[i] for i in range(len(self))]

    @property
    def total_area(self):
        return float(self.areas.sum())

    def translated(self, shift):
        return PanelMesh(self.vertices + np.asarray(shift, float), self.shape_tag,
                         self.characteristic_size, self.metadata)

    def scaled(self, factor):
        return PanelMesh(self.vertices * factor, self.shape_tag,
                         self.characteristic_size * factor, self.metadata)

    def quadrature(self):
        """Six-point rule per panel (3 points on each fan triangle).

        Returns ``points (N, 6, 3)`` and ``weights (N, 6)``; weights sum to the
        panel area (degenerate fan triangles get zero weight).
        """
        v = self.vertices
        bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
        pts, wts = [], []
        for k in (1, 2):
            tri = np.stack([v[:, 0], v[:, k], v[:, k + 1]], axis=1)
            a = 0.5 * np.einsum("nj,nj->n", np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]),
                                self.normals)
            pts.append(np.einsum("qk,nkj->nqj", bary, tri))
            wts.append(np.repeat(a[:, None] / 3.0, 3, axis=1))
        return np.concatenate(pts, axis=1), np.concatenate(wts, axis=1)


# ---------------------------------------------------------------------------
# 1-D graded spacing


def graded_nodes(start, stop, h_max, foci=(), growth=DEFAULT_GROWTH, count=None):
    """Node coordinates on ``[start, stop]`` with locally graded spacing.

    The target spacing is ``h(x) = min(h_max, min_f(h_f + growth*|x - x_f|))``
    for foci ``(x_f, h_f)``. Nodes are the preimages of a uniform grid under
    ``F(x) = integral of dx/h``, so the node positions depend continuously on
    the foci sizes. ``count`` fixes the number of intervals (otherwise
    ``ceil(F(stop))``), which keeps mesh topology constant across a sweep.
    """
    span = stop - start
    if span <= 0:
        raise InvalidSpecError("graded_nodes needs stop > start")
    samples = [np.linspace(start, stop, 2001)]
    for xf, hf in foci:
        g = np.geomspace(max(hf, 1e-6 * span) * 1e-2, 2 * span, 600)
        samples.append(xf + g)
        samples.append(xf - g)
    x = np.unique(np.clip(np.concatenate(samples), start, stop))
    h = np.full_like(x, float(h_max))
    for xf, hf in foci:
        h = np.minimum(h, hf + growth * np.abs(x - xf))
    inv = 1.0 / h
    F = np.concatenate([[0.0], np.cumsum(0.5 * (inv[1:] + inv[:-1]) * np.diff(x))])
    n = int(count) if count is not None else max(1, int(math.ceil(F[-1] - 1e-9)))
    nodes = np.interp(np.linspace(0.0, F[-1], n + 1), F, x)
    nodes[0], nodes[-1] = start, stop
    return nodes


def segmented_nodes(breaks, h_max, foci=(), growth=DEFAULT_GROWTH, counts=None):
    """:func:`graded_nodes` on consecutive segments between ``breaks``.

    Every break point is an exact node. Returns the nodes and the tuple of
    per-segment interval counts.
    """
    out = [np.array([breaks[0]])]
    used = []
    for k in range(len(breaks) - 1):
        seg = graded_nodes(breaks[k], breaks[k + 1], h_max, foci, growth,
                           None if counts is None else counts[k])
        out.append(seg[1:])
        used.append(len(seg) - 1)
    return np.concatenate(out), tuple(used)


# ---------------------------------------------------------------------------
# helpers


def _quads(grid):
    """Quad panels from a structured ``(n+1, m+1, 3)`` vertex grid."""
    return np.stack([grid[:-1, :-1], grid[:-1, 1:], grid[1:, 1:], grid[1:, :-1]], axis=2).reshape(-1, 4, 3)


def _fan(center, boundary, t_nodes):
    """Panels filling the polygon ``center -> boundary`` with rings at ``t_nodes``.

    ``boundary`` is an open polyline ``(m+1, 3)``; every ring/segment cell is a
    planar trapezoid, the cells touching the center are triangles.
    """
    rays = boundary - center
    rings = center + t_nodes[:, None, None] * rays[None, :, :]  # (nt, m+1, 3)
    cells = _quads(rings)
    m = len(boundary) - 1
    inner = cells[:m]  # t_nodes[0] == 0: first two vertices coincide
    tri = np.stack([inner[:, 0], inner[:, 2], inner[:, 3], inner[:, 0]], axis=1)
    return np.concatenate([tri, cells[m:]], axis=0)


def _orient(vertices, outward):
    """Reorder vertices so the Newell normal agrees with ``outward``."""
    v = vertices.copy()
    nxt = np.roll(v, -1, axis=1)
    avec = np.cross(v, nxt).sum(axis=1)
    flip = np.einsum("nj,nj->n", avec, outward) < 0
    tri = np.all(np.isclose(v[:, 3], v[:, 0], rtol=0, atol=0), axis=1)
    quad_flip = flip & ~tri
    v[quad_flip] = v[quad_flip][:, ::-1]
    tri_flip = flip & tri
    v[tri_flip] = v[tri_flip][:, [0, 2, 1, 3]]
    return v


def _snap(vertices, gap_fn):
    """Shift each flat panel along its normal by the mean panel-to-surface gap.

    ``gap_fn(points)`` returns the signed outward distance from points on the
    panel to the true curved surface. Placing the panel at the area-mean
    surface position removes the systematic chord sag (which would otherwise
    act like a spurious distance offset).
    """
    mesh = PanelMesh(vertices, ShapeTag.SPHERE, 1.0)
    pts, w = mesh.quadrature()
    delta = (gap_fn(pts.reshape(-1, 3)).reshape(w.shape) * w).sum(axis=1) / mesh.areas
    return vertices + delta[:, None, None] * mesh.normals[:, None, :]


def _check_positive(**kw):
    for k, v in kw.items():
        if v is None or not np.isfinite(v) or v <= 0:
            raise InvalidSpecError(f"{k} must be a positive finite number, got {v!r}")


def _check_resolution(resolution):
    if int(resolution) != resolution or resolution < 2:
        raise InvalidSpecError(f"resolution must be an integer >= 2, got {resolution!r}")


# ---------------------------------------------------------------------------
# plates


def _plate_nodes(lx, ly, resolution, x_foci, y_foci, growth, counts):
    h_max = min(lx, ly) / resolution
    cx, cy = counts if counts is not None else (None, None)
    xs = graded_nodes(-lx / 2, lx / 2, h_max, x_foci, growth, cx)
    ys = graded_nodes(-ly / 2, ly / 2, h_max, y_foci, growth, cy)
    return xs, ys


def build_rect_plate(lx, ly, resolution, *, x_foci=(), y_foci=(), growth=DEFAULT_GROWTH,
                     counts=None, shape_tag=ShapeTag.RECT_PLATE, nodes=None):
    """Zero-thickness rectangle centered at the origin in the ``z = 0`` plane.

    ``nodes=(xs, ys)`` bypasses the graded spacing with explicit node arrays.
    """
    _check_positive(lx=lx, ly=ly)
    _check_resolution(resolution)
    if nodes is not None:
        xs, ys = nodes
    else:
        xs, ys = _plate_nodes(lx, ly, resolution, x_foci, y_foci, growth, counts)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    grid = np.stack([X, Y, np.zeros_like(X)], axis=-1)
    v = _orient(_quads(grid), np.array([[0.0, 0.0, 1.0]]))
    return PanelMesh(v, shape_tag, min(lx, ly),
                     {"lx": lx, "ly": ly, "counts": (len(xs) - 1, len(ys) - 1)})


def build_square_plate(side, resolution, **kw):
    """Square plate of the given side; without foci it is a uniform ``resolution**2`` grid."""
    _check_positive(side=side)
    return build_rect_plate(side, side, resolution, shape_tag=ShapeTag.SQUARE_PLATE, **kw)


# ---------------------------------------------------------------------------
# spheres


def _sphere_nodes(radius, resolution, theta_max, pole_h, rim_h, growth, counts):
    h_max = math.pi * radius / resolution
    foci = [(0.0, pole_h if pole_h else h_max)]
    if rim_h:
        foci.append((radius * theta_max, rim_h))
    c = counts[0] if counts is not None else None
    s = graded_nodes(0.0, radius * theta_max, h_max, foci, growth, c)
    return s / radius


def _n_phi(resolution):
    return 4 * max(2, int(math.ceil(resolution / 2)))


def build_sphere(radius, resolution, *, pole_h=None, growth=DEFAULT_GROWTH, counts=None, snap=True):
    """Closed latitude/longitude sphere; its bottom pole touches the origin.

    Latitude rings are graded toward the bottom pole (``pole_h`` = arc-length
    spacing there). Every latitude band is a planar trapezoid.
    """
    _check_positive(radius=radius)
    _check_resolution(resolution)
    thetas = _sphere_nodes(radius, resolution, math.pi, pole_h, None, growth, counts)
    return _sphere_mesh(radius, resolution, thetas, None, ShapeTag.SPHERE, snap, counts)


def _sphere_mesh(radius, resolution, thetas, disc_r, tag, snap, counts):
    center = np.array([0.0, 0.0, radius])
    nphi = _n_phi(resolution)
    phis = np.linspace(0.0, 2 * math.pi, nphi + 1)
    T, P = np.meshgrid(thetas, phis, indexing="ij")
    grid = np.stack([radius * np.sin(T) * np.cos(P), radius * np.sin(T) * np.sin(P),
                     radius - radius * np.cos(T)], axis=-1)
    grid[:, -1] = grid[:, 0]
    grid[0] = center - [0, 0, radius]
    if abs(thetas[-1] - math.pi) < 1e-12:
        grid[-1] = center + [0, 0, radius]
    cells = _quads(grid).reshape(len(thetas) - 1, nphi, 4, 3)
    pieces = []
    # pole bands are triangles
    first = cells[0]
    pieces.append(np.stack([first[:, 0], first[:, 2], first[:, 3], first[:, 0]], axis=1))
    body = cells[1:]
    if abs(thetas[-1] - math.pi) < 1e-12 and len(body):
        last = body[-1]
        pieces.append(body[:-1].reshape(-1, 4, 3))
        pieces.append(np.stack([last[:, 0], last[:, 1], last[:, 2], last[:, 0]], axis=1))
    else:
        pieces.append(body.reshape(-1, 4, 3))
    v = np.concatenate(pieces, axis=0)
    cent = v.mean(axis=1)
    v = _orient(v, cent - center)
    if snap:
        v = _snap(v, lambda p: radius - np.linalg.norm(p - center, axis=1))
    meta = {"radius": radius, "counts": (len(thetas) - 1,)}
    if disc_r is not None:
        rim = grid[-1]
        zc = rim[0, 2]
        t = disc_r / disc_r[-1]
        disc = _fan(np.array([0.0, 0.0, zc]), rim, t)
        disc = _orient(disc, np.array([[0.0, 0.0, 1.0]]))
        v = np.concatenate([v, disc], axis=0)
        meta["counts"] = (len(thetas) - 1, len(disc_r) - 1)
    return PanelMesh(v, tag, 2 * radius, meta)


def truncated_sphere_min_cap(radius, resolution, pole_h=None):
    """Smallest accepted cap height: one row of the pole spacing."""
    h = pole_h if pole_h else math.pi * radius / resolution
    ang = min(math.pi, h / radius)
    return radius * (1 - math.cos(ang))


def build_truncated_sphere(radius, cap_height, resolution, *, pole_h=None, rim_h=None,
                           growth=DEFAULT_GROWTH, counts=None, snap=True):
    """Spherical cap of height ``cap_height`` facing the plate, closed by a flat back disc.

    ``cap_height == 2*radius`` returns the whole sphere.
    """
    _check_positive(radius=radius, cap_height=cap_height)
    _check_resolution(resolution)
    if cap_height > 2 * radius * (1 + 1e-12):
        raise InvalidSpecError("cap_height must not exceed the sphere diameter")
    if cap_height < truncated_sphere_min_cap(radius, resolution, pole_h):
        raise InvalidSpecError("cap_height is below one panel height; refine the mesh")
    if cap_height >= 2 * radius * (1 - 1e-12):
        return build_sphere(radius, resolution, pole_h=pole_h, growth=growth,
                            counts=None if counts is None else counts[:1], snap=snap)
    theta_c = math.acos(1 - cap_height / radius)
    rim_h = rim_h if rim_h else math.pi * radius / resolution
    thetas = _sphere_nodes(radius, resolution, theta_c, pole_h, rim_h, growth, counts)
    a = radius * math.sin(theta_c)
    h_max = math.pi * radius / resolution
    disc_r = graded_nodes(0.0, a, h_max, [(a, rim_h)], growth,
                          None if counts is None else counts[1])
    mesh = _sphere_mesh(radius, resolution, thetas, disc_r, ShapeTag.TRUNCATED_SPHERE, snap, counts)
    mesh.metadata["cap_height"] = cap_height
    return mesh


# ---------------------------------------------------------------------------
# cylinders


def _cylinder_nodes(radius, length, resolution, theta_t, contact_h, edge_h, end_h, x_breaks,
                    growth, counts):
    char = min(length, 2 * radius * theta_t)
    h_max = char / resolution
    c = counts if counts is not None else (None,) * 5
    s_foci = [(0.0, contact_h if contact_h else h_max)]
    s_breaks = [-radius * theta_t]
    if theta_t > ALIGN_ANGLE:
        s_breaks.append(-radius * ALIGN_ANGLE)
    s_breaks.append(0.0)
    if theta_t > ALIGN_ANGLE:
        s_breaks.append(radius * ALIGN_ANGLE)
    s_breaks.append(radius * theta_t)
    if theta_t < math.pi:
        eh = edge_h if edge_h else h_max
        s_foci += [(-radius * theta_t, eh), (radius * theta_t, eh)]
    s, sc = segmented_nodes(s_breaks, h_max, s_foci, growth, c[0])
    eh = end_h if end_h else h_max
    xb_all = sorted({-length / 2, length / 2, *x_breaks})
    x_foci = [(x, eh) for x in xb_all]
    xs, xc = segmented_nodes(xb_all, h_max, x_foci, growth, c[1])
    t = graded_nodes(0.0, 1.0, 1.0 / max(2, resolution // 2), [(1.0, 1.0 / (2 * resolution))],
                     growth, c[2])
    if theta_t < math.pi:
        half = radius * math.sin(theta_t)
        bh = edge_h if edge_h else h_max
        yb = graded_nodes(-half, half, h_max, [(-half, bh), (half, bh)], growth, c[3])
        xb = graded_nodes(-length / 2, length / 2, h_max, [(-length / 2, bh), (length / 2, bh)],
                          growth, c[4])
    else:
        yb = xb = np.array([0.0])
    return s / radius, xs, t, yb, xb, (sc, xc, len(t) - 1, len(yb) - 1, len(xb) - 1)


def build_cylinder(radius, length, resolution, truncation_half_angle=math.pi, *, contact_h=None,
                   edge_h=None, end_h=None, x_breaks=(), growth=DEFAULT_GROWTH, counts=None,
                   snap=True):
    """Cylinder with axis along ``x``, bottom line on the ``x`` axis.

    The curved surface spans the angular sector ``[-theta_t, +theta_t]``
    around the line of closest approach. ``theta_t == pi`` gives the whole
    cylinder closed by end discs; smaller angles give a truncated cylinder
    closed by a flat chord face and circular-segment end caps.
    """
    _check_positive(radius=radius, length=length)
    _check_resolution(resolution)
    theta_t = float(truncation_half_angle)
    if not (0 < theta_t <= math.pi):
        raise InvalidSpecError("truncation_half_angle must lie in (0, pi]")
    psis, xs, t, yb, xb, used = _cylinder_nodes(radius, length, resolution, theta_t, contact_h,
                                                edge_h, end_h, x_breaks, growth, counts)
    axis_c = np.array([0.0, 0.0, radius])

    def arc(psi, x):
        return np.stack([np.full_like(psi, x), radius * np.sin(psi), radius - radius * np.cos(psi)],
                        axis=-1)

    X, PS = np.meshgrid(xs, psis, indexing="ij")
    grid = np.stack([X, radius * np.sin(PS), radius - radius * np.cos(PS)], axis=-1)
    lateral = _quads(grid)
    cent = lateral.mean(axis=1)
    radial = cent - axis_c
    radial[:, 0] = 0.0
    lateral = _orient(lateral, radial)
    if snap:
        def gap(p):
            q = p - axis_c
            return radius - np.hypot(q[:, 1], q[:, 2])
        lateral = _snap(lateral, gap)

    pieces = [lateral]
    if theta_t >= math.pi:
        fan_center = axis_c
    else:
        fan_center = np.array([0.0, 0.0, radius - radius * math.cos(theta_t)])
    for sign in (-1.0, 1.0):
        x = sign * length / 2
        cap = _fan(fan_center + [x, 0, 0], arc(psis, x), t)
        pieces.append(_orient(cap, np.array([[sign, 0.0, 0.0]])))
    if theta_t < math.pi:
        zc = radius - radius * math.cos(theta_t)
        Xb, Yb = np.meshgrid(xb, yb, indexing="ij")
        back = _quads(np.stack([Xb, Yb, np.full_like(Xb, zc)], axis=-1))
        pieces.append(_orient(back, np.array([[0.0, 0.0, 1.0]])))
    tag = ShapeTag.CYLINDER if theta_t >= math.pi else ShapeTag.TRUNCATED_CYLINDER
    meta = {"radius": radius, "length": length, "truncation_half_angle": theta_t,
            "counts": used, "lateral_panels": len(lateral), "x_nodes": xs,
            "y_nodes": radius * np.sin(psis[np.abs(psis) <= ALIGN_ANGLE + 1e-12])}
    return PanelMesh(np.concatenate(pieces, axis=0), tag, min(length, 2 * radius * theta_t), meta)


# ---------------------------------------------------------------------------
# shape specs and scenes


@dataclass(frozen=True)
class ShapeSpec:
    """Declarative description of one conductor plus its mesh controls.

    ``resolution`` is the number of panels across the characteristic length
    in the coarse region; ``refinement`` is the number of panels across the
    gap-scale length next to the gap (the gap itself for flat faces,
    ``sqrt(2*R*gap)`` for curved probes).
    """

    shape: ShapeTag
    side: float | None = None
    lx: float | None = None
    ly: float | None = None
    radius: float | None = None
    cap_height: float | None = None
    length: float | None = None
    truncation_half_angle: float = math.pi
    resolution: int = 12
    refinement: float = 4.0
    growth: float = DEFAULT_GROWTH

    def __post_init__(self):
        object.__setattr__(self, "shape", ShapeTag(self.shape))

    @classmethod
    def square_plate(cls, side, **kw):
        return cls(ShapeTag.SQUARE_PLATE, side=side, **kw)

    @classmethod
    def rect_plate(cls, lx, ly, **kw):
        return cls(ShapeTag.RECT_PLATE, lx=lx, ly=ly, **kw)

    @classmethod
    def sphere(cls, radius, **kw):
        return cls(ShapeTag.SPHERE, radius=radius, **kw)

    @classmethod
    def truncated_sphere(cls, radius, cap_height, **kw):
        return cls(ShapeTag.TRUNCATED_SPHERE, radius=radius, cap_height=cap_height, **kw)

    @classmethod
    def cylinder(cls, radius, length, truncation_half_angle=math.pi, **kw):
        tag = ShapeTag.CYLINDER if truncation_half_angle >= math.pi else ShapeTag.TRUNCATED_CYLINDER
        return cls(tag, radius=radius, length=length,
                   truncation_half_angle=truncation_half_angle, **kw)

    @property
    def plate_dims(self):
        if self.shape is ShapeTag.SQUARE_PLATE:
            return self.side, self.side
        return self.lx, self.ly

    def validate(self):
        _check_resolution(self.resolution)
        _check_positive(refinement=self.refinement, growth=self.growth)
        s = self.shape
        if s is ShapeTag.SQUARE_PLATE:
            _check_positive(side=self.side)
        elif s is ShapeTag.RECT_PLATE:
            _check_positive(lx=self.lx, ly=self.ly)
        elif s is ShapeTag.SPHERE:
            _check_positive(radius=self.radius)
        elif s is ShapeTag.TRUNCATED_SPHERE:
            _check_positive(radius=self.radius, cap_height=self.cap_height)
            if self.cap_height > 2 * self.radius:
                raise InvalidSpecError("cap_height must be <= 2*radius")
        else:
            _check_positive(radius=self.radius, length=self.length)
            if not 0 < self.truncation_half_angle <= math.pi:
                raise InvalidSpecError("truncation_half_angle must lie in (0, pi]")
        return self

    def refined(self, factor):
        """Same shape with every mesh length divided by ``factor``."""
        return replace(self, resolution=int(round(self.resolution * factor)),
                       refinement=self.refinement * factor, growth=self.growth / factor)

    def to_dict(self):
        d = {"shape": self.shape.value}
        for k in ("side", "lx", "ly", "radius", "cap_height", "length"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.shape in (ShapeTag.CYLINDER, ShapeTag.TRUNCATED_CYLINDER):
            d["truncation_half_angle"] = self.truncation_half_angle
        d.update(resolution=self.resolution, refinement=self.refinement, growth=self.growth)
        return d


@dataclass(frozen=True)
class GeometryScene:
    """Probe and plate meshes positioned at a given gap."""

    probe: PanelMesh
    plate: PanelMesh
    gap: float
    offset: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def n_panels(self):
        return len(self.probe) + len(self.plate)

    def combined(self):
        """Concatenated vertices and a conductor label per panel (0 probe, 1 plate)."""
        v = np.concatenate([self.probe.vertices, self.plate.vertices], axis=0)
        labels = np.concatenate([np.zeros(len(self.probe), int), np.ones(len(self.plate), int)])
        return v, labels

    def min_separation(self):
        """Minimum distance between sample points (vertices, centroids) of the two meshes."""
        a = np.concatenate([self.probe.vertices.reshape(-1, 3), self.probe.centroids])
        b = np.concatenate([self.plate.vertices.reshape(-1, 3), self.plate.centroids])
        dist, _ = cKDTree(b).query(a)
        return float(dist.min())


def _probe_meshes(probe, plate, gap, offset, counts):
    """Build probe and plate meshes (local frame) for one gap value."""
    lx, ly = plate.plate_dims
    r = probe.refinement
    plate_hmax = min(lx, ly) / plate.resolution
    s = probe.shape
    pc = counts[0] if counts else None
    qc = counts[1] if counts else None
    if s in PLATE_TAGS:
        plx, ply = probe.plate_dims
        he = gap / r
        probe_mesh = build_rect_plate(plx, ply, probe.resolution, growth=probe.growth, counts=pc,
                                      x_foci=[(-plx / 2, he), (plx / 2, he)],
                                      y_foci=[(-ply / 2, he), (ply / 2, he)], shape_tag=s)
        # plate edges and the projected probe edges
        xf = [(-lx / 2, he), (lx / 2, he), (offset - plx / 2, he), (offset + plx / 2, he)]
        yf = [(-ly / 2, he), (ly / 2, he), (-ply / 2, he), (ply / 2, he)]
        plate_mesh = build_rect_plate(lx, ly, plate.resolution, x_foci=xf, y_foci=yf,
                                      growth=plate.growth, counts=qc, shape_tag=plate.shape)
        return probe_mesh, plate_mesh
    R = probe.radius
    ell = math.sqrt(2 * R * gap)
    hf = ell / r
    if s in (ShapeTag.SPHERE, ShapeTag.TRUNCATED_SPHERE):
        if s is ShapeTag.SPHERE or probe.cap_height >= 2 * R:
            probe_mesh = build_sphere(R, probe.resolution, pole_h=hf, growth=probe.growth,
                                      counts=pc)
        else:
            h = probe.cap_height
            rim_h = min(math.pi * R / probe.resolution, h + gap) / r
            probe_mesh = build_truncated_sphere(R, h, probe.resolution, pole_h=hf, rim_h=rim_h,
                                                growth=probe.growth, counts=pc)
        he = plate_hmax / r
        xf = [(-lx / 2, he), (lx / 2, he), (offset, hf)]
        yf = [(-ly / 2, he), (ly / 2, he), (0.0, hf)]
        plate_mesh = build_rect_plate(lx, ly, plate.resolution, x_foci=xf, y_foci=yf,
                                      growth=plate.growth, counts=qc, shape_tag=plate.shape)
        return probe_mesh, plate_mesh
    # cylinders: axis along x (the plate's lx side)
    L = probe.length
    th = probe.truncation_half_angle
    end_h = 2 * gap * 4 / r
    edge_height = R * (1 - math.cos(min(th, math.pi)))
    edge_h = min(2 * R * th / probe.resolution, edge_height + gap) / r
    overhang = [x - offset for x in (-lx / 2, lx / 2) if -L / 2 < x - offset < L / 2]
    probe_mesh = build_cylinder(R, L, probe.resolution, th, contact_h=hf, edge_h=edge_h,
                                end_h=end_h, x_breaks=overhang, growth=probe.growth, counts=pc)
    he = plate_hmax / r
    xs, xc = _aligned_nodes(probe_mesh.metadata["x_nodes"] + offset, lx, plate_hmax, he,
                            plate.growth, None if qc is None else qc[:2])
    ys, yc = _aligned_nodes(probe_mesh.metadata["y_nodes"], ly, plate_hmax, he, plate.growth,
                            None if qc is None else qc[2:])
    plate_mesh = build_rect_plate(lx, ly, plate.resolution, nodes=(xs, ys), shape_tag=plate.shape)
    plate_mesh.metadata["counts"] = xc + yc
    return probe_mesh, plate_mesh


def _aligned_nodes(inner, span, h_max, edge_h, growth, counts):
    """Plate nodes that reuse the probe's projected nodes where they overlap the plate.

    Outside the overlap the spacing grows from the last shared interval toward
    the plate edge. Returns nodes and the counts of the two outer segments.
    """
    lo, hi = -span / 2, span / 2
    tol = 1e-9 * span
    inner = inner[(inner >= lo - tol) & (inner <= hi + tol)]
    inner = np.clip(inner, lo, hi)
    pieces = []
    used = []
    c = counts if counts is not None else (None, None)
    if inner[0] > lo + tol:
        h_in = inner[1] - inner[0]
        seg = graded_nodes(lo, inner[0], h_max, [(lo, edge_h), (inner[0], h_in)], growth, c[0])
        pieces.append(seg[:-1])
        used.append(len(seg) - 1)
    else:
        used.append(0)
    pieces.append(inner)
    if inner[-1] < hi - tol:
        h_in = inner[-1] - inner[-2]
        seg = graded_nodes(inner[-1], hi, h_max, [(inner[-1], h_in), (hi, edge_h)], growth, c[1])
        pieces.append(seg[1:])
        used.append(len(seg) - 1)
    else:
        used.append(0)
    return np.concatenate(pieces), tuple(used)


def scene_counts(probe, plate, gap, offset=0.0):
    """Node counts of the meshes :func:`assemble_scene` would build at ``gap``."""
    pm, qm = _probe_meshes(probe.validate(), plate.validate(), gap, offset, None)
    return pm.metadata["counts"], qm.metadata["counts"]


def assemble_scene(probe, plate, gap, offset=0.0, *, reference_gap=None):
    """Mesh both conductors and place the probe ``gap`` above the plate.

    The probe's closest point is put at height ``gap`` above the plate plane
    and shifted by ``offset`` along ``x``. Mesh grading follows ``gap``; the
    node counts are taken at ``reference_gap`` (defaults to ``gap``), so a
    sweep with a common reference gap varies node positions continuously.
    """
    if not np.isfinite(gap) or gap <= 0:
        raise InvalidSpecError(f"gap must be positive, got {gap!r}")
    if not np.isfinite(offset):
        raise InvalidSpecError("offset must be finite")
    probe = probe.validate()
    plate = plate.validate()
    if plate.shape not in PLATE_TAGS:
        raise InvalidSpecError("the plate conductor must be a SquarePlate or RectPlate")
    counts = None
    if reference_gap is not None:
        counts = scene_counts(probe, plate, reference_gap, offset)
    probe_mesh, plate_mesh = _probe_meshes(probe, plate, gap, offset, counts)
    probe_mesh = probe_mesh.translated([offset, 0.0, gap])
    if probe.shape in PLATE_TAGS:
        probe_mesh = PanelMesh(_orient(probe_mesh.vertices, np.array([[0.0, 0.0, -1.0]])),
                               probe_mesh.shape_tag, probe_mesh.characteristic_size,
                               probe_mesh.metadata)
    meta = {"probe": probe.to_dict(), "plate": plate.to_dict(), "gap": gap, "offset": offset,
            "reference_gap": reference_gap}
    return GeometryScene(probe_mesh, plate_mesh, float(gap), float(offset), meta)


def effective_length(probe, plate):
    """Overlap length of a cylinder with the plate along the cylinder axis."""
    lx, _ = plate.plate_dims
    return min(probe.length, lx)
