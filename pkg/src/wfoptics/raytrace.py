"""Sequential ray tracing from a point source to the transition plane.

Rays are stored as numpy arrays (one row per ray) rather than objects; all
surface interactions are vectorized. Dead rays keep their last state and are
masked out of every downstream computation. Optical path length accumulates
n_i * t_i per medium, including the leg from the source to the first surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .elements import LensSystem, Surface, _sag_slope, _sag_unchecked
from .materials import refractive_index

NEWTON_MAX_STEPS = 20
NEWTON_TOL_MM = 1e-9


class EmptyBundleError(RuntimeError):
    """Raised when every launched ray dies (fully vignetted field point)."""


@dataclass(frozen=True)
class Source:
    """Point source, either at a finite position or at infinity.

    Finite: ``position`` is (x0, y0, z0) in mm with z0 in front of the lens.
    Infinite: ``direction`` is the unit propagation direction of the
    incoming plane wave and position is None.
    """

    position: tuple[float, float, float] | None = None
    direction: tuple[float, float, float] | None = None

    def __post_init__(self):
        if (self.position is None) == (self.direction is None):
            raise ValueError("source needs exactly one of position or direction")
        if self.direction is not None:
            d = np.asarray(self.direction, dtype=np.float64)
            n = np.linalg.norm(d)
            if n == 0 or d[2] <= 0:
                raise ValueError("source direction must point toward +z")
            object.__setattr__(self, "direction", tuple(d / n))

    @property
    def at_infinity(self) -> bool:
        return self.position is None

    @classmethod
    def at_angle(cls, angle_x_deg: float, depth_mm: float | None, angle_y_deg: float = 0.0) -> "Source":
        """Source at a field angle; depth_mm None or inf means infinity."""
        ax, ay = math.radians(angle_x_deg), math.radians(angle_y_deg)
        if depth_mm is None or math.isinf(depth_mm):
            d = np.array([-math.sin(ax), -math.sin(ay), 1.0])
            d[2] = math.sqrt(max(1.0 - d[0] ** 2 - d[1] ** 2, 0.0))
            return cls(direction=tuple(d / np.linalg.norm(d)))
        return cls(position=(depth_mm * math.tan(ax), depth_mm * math.tan(ay), -depth_mm))


@dataclass(frozen=True)
class Ray:
    origin: tuple[float, float, float]
    direction: tuple[float, float, float]
    opl: float = 0.0
    alive: bool = True


@dataclass
class RayBundle:
    """Rays sharing a common plane after tracing (z constant for alive rays)."""

    origins: np.ndarray  # (n, 3) mm
    directions: np.ndarray  # (n, 3) unit
    opl: np.ndarray  # (n,) mm
    alive: np.ndarray  # (n,) bool
    wavelength: float  # um
    source: Source

    @property
    def n_alive(self) -> int:
        return int(np.count_nonzero(self.alive))


@dataclass(frozen=True)
class TraceResult:
    bundle: RayBundle
    chief: Ray  # at the transition plane


def refract(d_in: np.ndarray, normal: np.ndarray, n1, n2) -> tuple[np.ndarray, np.ndarray]:
    """Vector Snell refraction.

    Accepts (n, 3) arrays (or single 3-vectors). Returns (directions, ok)
    where ok is False for rays undergoing total internal reflection.
    """
    d = np.atleast_2d(np.asarray(d_in, dtype=np.float64))
    nrm = np.atleast_2d(np.asarray(normal, dtype=np.float64))
    n1 = np.broadcast_to(np.asarray(n1, dtype=np.float64), d.shape[0])
    n2 = np.broadcast_to(np.asarray(n2, dtype=np.float64), d.shape[0])
    # orient normals against the incoming ray
    cosi = -np.sum(d * nrm, axis=1)
    flip = cosi < 0
    nrm = np.where(flip[:, None], -nrm, nrm)
    cosi = np.abs(cosi)
    eta = n1 / n2
    sin2t = eta**2 * (1.0 - cosi**2)
    ok = sin2t <= 1.0
    cost = np.sqrt(np.maximum(1.0 - sin2t, 0.0))
    out = eta[:, None] * d + (eta * cosi - cost)[:, None] * nrm
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 0)
    if np.asarray(d_in).ndim == 1:
        return out[0], bool(ok[0])
    return out, ok


def _surface_normal(surface: Surface, pts: np.ndarray) -> np.ndarray:
    """Outward (+z) unit normal of the surface at hit points (n, 3)."""
    x, y = pts[:, 0], pts[:, 1]
    r = np.hypot(x, y)
    slope = _sag_slope(surface, r)
    with np.errstate(invalid="ignore", divide="ignore"):
        gx = np.where(r > 0, -slope * x / r, 0.0)
        gy = np.where(r > 0, -slope * y / r, 0.0)
    n = np.stack([gx, gy, np.ones_like(gx)], axis=1)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def intersect(origins: np.ndarray, directions: np.ndarray, surface: Surface) -> tuple[np.ndarray, np.ndarray]:
    """Ray marching distance t (mm) to `surface` for each ray.

    Plane/stop and sphere use closed forms; aspheres run Newton iteration
    seeded at the vertex-plane intersection. Returns (t, ok); ok is False
    where no valid forward intersection exists or Newton failed.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    zv = surface.axial_position
    dz = d[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = (zv - o[:, 2]) / dz
    ok = (dz > 0) & np.isfinite(t_plane) & (t_plane > 0)

    if surface.kind in ("plane", "stop"):
        return t_plane, ok

    if surface.kind == "sphere":
        t, ok_s = _intersect_sphere(o, d, surface)
        return t, ok & ok_s

    # asphere: F(t) = z(t) - zv - sag(r(t)); plain Newton, divergence -> dead
    t = t_plane.copy()
    ok_n = ok.copy()
    for _ in range(NEWTON_MAX_STEPS):
        p = o + t[:, None] * d
        r = np.hypot(p[:, 0], p[:, 1])
        s = _sag_unchecked(surface, r)
        slope = _sag_slope(surface, r)
        bad = ~np.isfinite(s) | ~np.isfinite(slope)
        f = p[:, 2] - zv - np.where(bad, 0.0, s)
        with np.errstate(invalid="ignore", divide="ignore"):
            drdt = np.where(r > 0, (p[:, 0] * d[:, 0] + p[:, 1] * d[:, 1]) / r, 0.0)
        fp = d[:, 2] - np.where(bad, 0.0, slope) * drdt
        step = np.where(np.abs(fp) > 1e-14, f / fp, 0.0)
        ok_n &= ~bad & (np.abs(fp) > 1e-14)
        t = t - np.where(ok_n, step, 0.0)
        if np.all(~ok_n | (np.abs(step) < NEWTON_TOL_MM)):
            break
    else:
        p = o + t[:, None] * d
        r = np.hypot(p[:, 0], p[:, 1])
        resid = np.abs(p[:, 2] - zv - _sag_unchecked(surface, r))
        ok_n &= resid < NEWTON_TOL_MM
    ok_n &= t > 0
    return t, ok & ok_n


def _intersect_sphere(o: np.ndarray, d: np.ndarray, surface: Surface) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic ray-sphere intersection, picking the sag-consistent branch."""
    radius = 1.0 / surface.curvature
    center = np.array([0.0, 0.0, surface.axial_position + radius])
    oc = o - center
    b = np.sum(oc * d, axis=1)
    c = np.sum(oc * oc, axis=1) - radius**2
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    # the valid sag branch is the intersection nearer the vertex plane:
    # for R > 0 that is the smaller root, for R < 0 the larger
    t = -b - sq if surface.curvature > 0 else -b + sq
    ok &= t > 0
    p = o + t[:, None] * d
    r = np.hypot(p[:, 0], p[:, 1])
    s = _sag_unchecked(surface, np.minimum(r, abs(radius)))
    ok &= np.abs(p[:, 2] - surface.axial_position - s) < 1e-6
    return t, ok


def _launch(system: LensSystem, source: Source, aim_xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Origins, directions, and initial OPL for rays aimed at stop-plane points."""
    z_stop = system.stop.axial_position
    n = aim_xy.shape[0]
    if source.at_infinity:
        d = np.tile(np.asarray(source.direction), (n, 1))
        targets = np.column_stack([aim_xy, np.full(n, z_stop)])
        z0 = system.surfaces[0].axial_position - max(10.0, system.stop.semi_diameter * 4)
        t_back = (targets[:, 2] - z0) / d[:, 2]
        o = targets - t_back[:, None] * d
        # reference the plane wavefront through the coordinate origin
        opl0 = o @ np.asarray(source.direction)
    else:
        p0 = np.asarray(source.position, dtype=np.float64)
        if p0[2] >= system.surfaces[0].axial_position:
            raise ValueError("source must lie in front of the first surface")
        o = np.tile(p0, (n, 1))
        targets = np.column_stack([aim_xy, np.full(n, z_stop)])
        d = targets - o
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        opl0 = np.zeros(n)
    return o, d, opl0


def _trace_bundle(system: LensSystem, o, d, opl, wavelength: float):
    """March rays through every surface to the transition plane, in place."""
    alive = np.ones(o.shape[0], dtype=bool)
    n_current = np.ones(o.shape[0])  # medium before the first surface is air
    for i, surface in enumerate(system.surfaces):
        t, ok = intersect(o[alive], d[alive], surface)
        hit = o[alive] + t[:, None] * d[alive]
        r = np.hypot(hit[:, 0], hit[:, 1])
        ok &= r <= surface.semi_diameter * (1 + 1e-12)
        idx = np.flatnonzero(alive)
        opl[idx] += np.where(ok, n_current[idx] * t, 0.0)
        o[idx] = np.where(ok[:, None], hit, o[idx])
        n_next = refractive_index(system.media[i], wavelength)
        if surface.kind != "stop":
            normals = _surface_normal(surface, hit)
            d_new, ok_r = refract(d[alive], normals, n_current[idx], n_next)
            ok &= ok_r
            d[idx] = np.where(ok[:, None], d_new, d[idx])
        n_current[idx] = np.where(ok, n_next, n_current[idx])
        alive[idx] &= ok
        if not alive.any():
            return alive
    # final leg to the transition plane
    idx = np.flatnonzero(alive)
    dz = d[idx, 2]
    t = (system.transition_plane_z - o[idx, 2]) / dz
    ok = (dz > 0) & (t >= -1e-12)
    opl[idx] += np.where(ok, n_current[idx] * t, 0.0)
    o[idx] = np.where(ok[:, None], o[idx] + t[:, None] * d[idx], o[idx])
    alive[idx] &= ok
    return alive


def trace_system(
    system: LensSystem,
    source: Source,
    pupil_samples: int = 64,
    wavelength: float = 0.55,
) -> TraceResult:
    """Trace a pupil-filling bundle from `source` to the transition plane.

    Rays are aimed at a uniform square grid over the stop's bounding square,
    pre-clipped by the stop radius. The chief ray (through the stop center)
    is solved separately and reported alongside the bundle.
    """
    if system.mode != "traced":
        raise ValueError("trace_system requires a traced-mode lens system")
    if pupil_samples < 8:
        raise ValueError("pupil_samples must be >= 8 per axis")
    semi = system.stop.semi_diameter
    axis = np.linspace(-semi, semi, pupil_samples)
    gx, gy = np.meshgrid(axis, axis)
    aim = np.column_stack([gx.ravel(), gy.ravel()])
    aim = aim[np.hypot(aim[:, 0], aim[:, 1]) <= semi * (1 + 1e-12)]

    o, d, opl = _launch(system, source, aim)
    alive = _trace_bundle(system, o, d, opl, wavelength)
    if not alive.any():
        raise EmptyBundleError("all rays vignetted for this field point")

    chief = chief_ray(system, source, wavelength)
    bundle = RayBundle(origins=o, directions=d, opl=opl, alive=alive, wavelength=wavelength, source=source)
    return TraceResult(bundle=bundle, chief=chief)


def chief_ray(system: LensSystem, source: Source, wavelength: float = 0.55) -> Ray:
    """Ray through the geometric stop center, reported at the transition plane.

    Solved by iteratively correcting the stop-plane aim point (pre-stop
    refraction bends the direct aim); converges in a few steps for gentle
    systems.
    """
    aim = np.zeros((1, 2))
    for _ in range(12):
        o, d, _ = _launch(system, source, aim)
        miss = _stop_miss(system, o.copy(), d.copy(), wavelength)
        if miss is None:
            raise EmptyBundleError("chief ray vignetted before reaching the stop")
        if np.hypot(*miss) < 1e-9:
            break
        aim = aim - miss[None, :]
    o, d, opl = _launch(system, source, aim)
    alive = _trace_bundle(system, o, d, opl, wavelength)
    if not alive[0]:
        raise EmptyBundleError("chief ray did not reach the transition plane")
    return Ray(origin=tuple(o[0]), direction=tuple(d[0]), opl=float(opl[0]), alive=True)


def _stop_miss(system: LensSystem, o, d, wavelength):
    """Transverse miss (x, y) of a single ray at the stop plane, or None if dead."""
    n_current = 1.0
    for i, surface in enumerate(system.surfaces):
        t, ok = intersect(o, d, surface)
        if not ok[0]:
            return None
        hit = o + t[:, None] * d
        if i == system.stop_index:
            return hit[0, :2].copy()
        if surface.kind != "stop":
            normals = _surface_normal(surface, hit)
            n_next = refractive_index(system.media[i], wavelength)
            d_new, ok_r = refract(d, normals, n_current, n_next)
            if not ok_r[0]:
                return None
            d[:] = d_new
            n_current = n_next
        o[:] = hit
    return None


def transition_points(bundle: RayBundle) -> np.ndarray:
    """(n_alive, 2) transverse landing coordinates of alive rays, mm."""
    return bundle.origins[bundle.alive][:, :2]


# ---------------------------------------------------------------------------
# Paraxial helpers (principal plane / focus location for traced systems)
# ---------------------------------------------------------------------------


def _paraxial_exit(system: LensSystem, h: float, wavelength: float = 0.55):
    """Trace a paraxial ray parallel to the axis at height h; return (z, y, u)."""
    y, u = h, 0.0
    z_prev = system.surfaces[0].axial_position
    n_cur = 1.0
    for i, surface in enumerate(system.surfaces):
        dz = surface.axial_position - z_prev
        y = y + u * dz
        z_prev = surface.axial_position
        if surface.kind != "stop":
            # an a1*r^2 aspheric term adds 2*a1 to the vertex curvature
            c_eff = surface.curvature
            if surface.aspheric_coeffs:
                c_eff += 2.0 * surface.aspheric_coeffs[0]
            n_next = refractive_index(system.media[i], wavelength)
            u = (n_cur * u - y * c_eff * (n_next - n_cur)) / n_next
            n_cur = n_next
    return z_prev, y, u


def rear_principal_plane_z(system: LensSystem, wavelength: float = 0.55) -> float:
    """Paraxial rear principal plane: where the extended marginal ray regains h."""
    h = system.stop.semi_diameter * 1e-4
    z, y, u = _paraxial_exit(system, h, wavelength)
    if u >= 0:
        raise ValueError("system has no converging power; principal plane undefined")
    z_focus = z - y / u
    efl = -h / u
    return z_focus - efl


def paraxial_focus_z(system: LensSystem, source: Source, wavelength: float = 0.55) -> float:
    """Axial image position for a source, via two near-axis real rays."""
    if system.mode == "thin_lens":
        f = system.focal_length
        z_lens = system.stop.axial_position
        if source.at_infinity:
            return z_lens + f
        so = z_lens - source.position[2]
        if so <= f:
            raise ValueError("source inside the front focal distance; no real image")
        return z_lens + 1.0 / (1.0 / f - 1.0 / so)
    eps = system.stop.semi_diameter * 1e-4
    aim = np.array([[eps, 0.0], [-eps, 0.0]])
    o, d, opl = _launch(system, source, aim)
    alive = _trace_bundle(system, o, d, opl, wavelength)
    if not alive.all():
        raise EmptyBundleError("paraxial probe rays vignetted")
    # intersect the two rays in the x-z plane
    x1, z1, l1 = o[0, 0], o[0, 2], d[0, 0] / d[0, 2]
    x2, z2, l2 = o[1, 0], o[1, 2], d[1, 0] / d[1, 2]
    if abs(l1 - l2) < 1e-15:
        raise ValueError("paraxial rays are parallel; no finite image")
    dz = (x2 - x1 + l1 * (z1 - z2)) / (l1 - l2)
    return z1 + dz
