"""Lens prescriptions, apertures, and DOE height-map profiles.

Surfaces and lens systems are plain immutable value objects consumed by the
ray tracer; DOE profiles hold their height map as a torch tensor so the
optimizer can differentiate through phase generation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .materials import Material, refractive_index

SURFACE_KINDS = ("plane", "sphere", "asphere", "stop")


@dataclass(frozen=True)
class Surface:
    """One refractive surface or the aperture stop.

    curvature is 1/mm (0 for plane/stop); aspheric_coeffs (a1, a2, ...) add
    sum_k a_k r^(2k) to the sag, k starting at 1 (units mm^(1-2k)).
    """

    kind: str
    axial_position: float
    semi_diameter: float
    curvature: float = 0.0
    conic: float = 0.0
    aspheric_coeffs: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in SURFACE_KINDS:
            raise ValueError(f"unknown surface kind {self.kind!r}")
        if not self.semi_diameter > 0:
            raise ValueError("semi_diameter must be > 0")
        if self.kind in ("plane", "stop") and self.curvature != 0.0:
            raise ValueError(f"{self.kind} surface must have zero curvature")
        object.__setattr__(self, "aspheric_coeffs", tuple(float(a) for a in self.aspheric_coeffs))


def sag(surface: Surface, r):
    """Surface sag in mm at radial coordinate r (mm, scalar or ndarray).

    sag = c r^2 / (1 + sqrt(1 - (1+k) c^2 r^2)) + sum_k a_k r^(2k).
    Raises for r beyond the semi-diameter or where the square root turns
    imaginary (surface undefined at that radius).
    """
    r = np.asarray(r, dtype=np.float64)
    if np.any(r > surface.semi_diameter * (1 + 1e-12)):
        raise ValueError("r beyond surface semi-diameter")
    out = _sag_unchecked(surface, r)
    if np.any(~np.isfinite(out)):
        raise ValueError("surface sag undefined (imaginary square root) at requested r")
    return out if out.ndim else float(out)


def _sag_unchecked(surface: Surface, r):
    """Sag without domain checks; NaN where the conic root is imaginary."""
    r = np.asarray(r, dtype=np.float64)
    if surface.kind in ("plane", "stop"):
        return np.zeros_like(r)
    c = surface.curvature
    r2 = r * r
    arg = 1.0 - (1.0 + surface.conic) * c * c * r2
    with np.errstate(invalid="ignore"):
        z = np.where(arg >= 0.0, c * r2 / (1.0 + np.sqrt(np.maximum(arg, 0.0))), np.nan)
    for k, a in enumerate(surface.aspheric_coeffs, start=1):
        z = z + a * r2**k
    return z


def _sag_slope(surface: Surface, r):
    """d(sag)/dr; NaN outside the conic domain."""
    r = np.asarray(r, dtype=np.float64)
    if surface.kind in ("plane", "stop"):
        return np.zeros_like(r)
    c = surface.curvature
    arg = 1.0 - (1.0 + surface.conic) * c * c * r * r
    with np.errstate(invalid="ignore"):
        s = np.where(arg > 0.0, c * r / np.sqrt(np.maximum(arg, 1e-300)), np.nan)
    for k, a in enumerate(surface.aspheric_coeffs, start=1):
        s = s + 2 * k * a * r ** (2 * k - 1)
    return s


@dataclass(frozen=True)
class LensSystem:
    """Ordered surfaces with interleaved media and one aperture stop.

    media[i] fills the gap after surfaces[i] (the medium before the first
    surface is air). transition_plane_z is the backplane where ray optics
    hands the field to wave optics. In "thin_lens" mode the stop surface
    doubles as the principal plane and focal_length drives the quadratic
    phase; ray tracing is bypassed.
    """

    surfaces: tuple[Surface, ...]
    media: tuple[Material, ...]
    stop_index: int
    transition_plane_z: float
    mode: str = "traced"
    focal_length: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        object.__setattr__(self, "media", tuple(self.media))
        if self.mode not in ("traced", "thin_lens"):
            raise ValueError(f"unknown lens mode {self.mode!r}")
        if not self.surfaces:
            raise ValueError("lens system needs at least one surface")
        if len(self.media) != len(self.surfaces):
            raise ValueError("need exactly one medium entry per surface (gap after it)")
        zs = [s.axial_position for s in self.surfaces]
        if any(b <= a for a, b in zip(zs, zs[1:])):
            raise ValueError("surface axial positions must be strictly increasing")
        stops = [i for i, s in enumerate(self.surfaces) if s.kind == "stop"]
        if len(stops) != 1:
            raise ValueError(f"exactly one stop surface required, found {len(stops)}")
        if stops[0] != self.stop_index:
            raise ValueError("stop_index does not point at the stop surface")
        if self.transition_plane_z < zs[-1]:
            raise ValueError("transition plane must lie at or behind the last surface")
        if self.mode == "thin_lens":
            if self.focal_length is None or not self.focal_length > 0:
                raise ValueError("thin_lens mode requires focal_length > 0")

    @property
    def stop(self) -> Surface:
        return self.surfaces[self.stop_index]

    @property
    def principal_plane_z(self) -> float:
        """Axial position used as s = 0 for DOE placement.

        For thin_lens mode this is the lens plane itself; traced systems
        get the paraxial rear principal plane (see raytrace module).
        """
        if self.mode == "thin_lens":
            return self.stop.axial_position
        from .raytrace import rear_principal_plane_z

        return rear_principal_plane_z(self)


@dataclass(frozen=True)
class DoePlacement:
    """Fractional DOE position along the principal-plane-to-sensor axis.

    s = 0 is the principal plane, s = 1 the sensor plane.
    """

    s: float

    def __post_init__(self):
        if not 0.0 <= self.s <= 1.0:
            raise ValueError(f"placement s must be within [0, 1], got {self.s}")

    def resolve(self, principal_plane_z: float, sensor_z: float) -> float:
        """Absolute DOE plane position in mm."""
        return principal_plane_z + self.s * (sensor_z - principal_plane_z)


@dataclass(frozen=True)
class DOEProfile:
    """Diffractive element height map in um.

    parameterization "full_grid": heights is a (ny, nx) grid at `pitch` um.
    parameterization "radial": heights is a 1D profile sampled at radii
    k * pitch, k = 0 .. n-1, expanded on demand.
    levels = 0 means continuous heights; levels >= 2 enables quantization.
    """

    parameterization: str
    heights: torch.Tensor
    pitch: float
    substrate: Material
    axial_position: float = 0.0
    levels: int = 0

    def __post_init__(self):
        h = torch.as_tensor(self.heights, dtype=torch.float64)
        if self.parameterization == "full_grid":
            if h.ndim != 2:
                raise ValueError("full_grid heights must be 2D")
        elif self.parameterization == "radial":
            if h.ndim != 1:
                raise ValueError("radial heights must be a 1D profile")
        else:
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        object.__setattr__(self, "heights", h)
        if not self.pitch > 0:
            raise ValueError("DOE pitch must be > 0")
        if self.levels < 0:
            raise ValueError("levels must be >= 0")

    @property
    def max_height(self) -> float:
        """One full 2*pi phase wrap at the nominal wavelength, in um."""
        lam0 = self.substrate.reference_wavelength
        n0 = refractive_index(self.substrate, lam0)
        return lam0 / (n0 - 1.0)

    @property
    def radius_um(self) -> float:
        """Designed radial extent of the profile in um."""
        if self.parameterization == "radial":
            return (self.heights.shape[0] - 1) * self.pitch
        ny, nx = self.heights.shape
        return 0.5 * min((ny - 1), (nx - 1)) * self.pitch

    def with_heights(self, heights) -> "DOEProfile":
        return replace(self, heights=heights)


class _SnapToLevels(torch.autograd.Function):
    """Snap heights to uniform levels; identity gradient (pass-through)."""

    @staticmethod
    def forward(ctx, h, step, h_max):
        return torch.clamp(torch.round(h / step) * step, 0.0, h_max)

    @staticmethod
    def backward(ctx, grad):
        return grad, None, None


def quantize_heights(doe: DOEProfile) -> DOEProfile:
    """Snap every height to the nearest of `levels` values spanning [0, h_max].

    levels = 0 returns the profile unchanged (continuous); levels < 2 is an
    error. Gradients, when present, pass through the snap unchanged.
    """
    if doe.levels == 0:
        return doe
    if doe.levels < 2:
        raise ValueError(f"quantization needs levels >= 2, got {doe.levels}")
    h_max = doe.max_height
    step = h_max / (doe.levels - 1)
    return doe.with_heights(_SnapToLevels.apply(doe.heights, step, h_max))


def doe_phase(doe: DOEProfile, wavelength: float, heights: torch.Tensor | None = None) -> torch.Tensor:
    """Phase delay grid (rad): (2*pi/lambda) * (n(lambda) - 1) * h.

    Heights and wavelength are both in um so no unit conversion appears.
    Pass `heights` to evaluate an expanded radial profile or a quantized map.
    """
    h = doe.heights if heights is None else heights
    n = refractive_index(doe.substrate, wavelength)
    return (2.0 * math.pi / wavelength) * (n - 1.0) * h


def radial_expand(doe: DOEProfile, shape: tuple[int, int], pitch_um: float | None = None) -> torch.Tensor:
    """Expand a radial profile to a full 2D height grid (um), differentiably.

    Heights are linearly interpolated in radius; grid points beyond the
    designed radius are bare substrate (zero relief). The grid's on-axis
    reach must stay inside the profile domain.
    """
    if doe.parameterization != "radial":
        raise ValueError("radial_expand requires a radial profile")
    pitch = doe.pitch if pitch_um is None else pitch_um
    ny, nx = shape
    x = (torch.arange(nx, dtype=torch.float64) - nx // 2) * pitch
    y = (torch.arange(ny, dtype=torch.float64) - ny // 2) * pitch
    r_max = doe.radius_um
    axis_reach = max(float(torch.max(torch.abs(x))), float(torch.max(torch.abs(y))))
    if axis_reach > r_max + 0.5 * doe.pitch:
        raise ValueError(
            f"grid axis reach {axis_reach:.3f} um exceeds radial profile domain {r_max:.3f} um"
        )
    r = torch.sqrt(x[None, :] ** 2 + y[:, None] ** 2)
    n = doe.heights.shape[0]
    t = torch.clamp(r / doe.pitch, max=float(n - 1))
    i0 = torch.clamp(t.floor().long(), max=n - 1)
    i1 = torch.clamp(i0 + 1, max=n - 1)
    w = (t - i0.to(torch.float64)).clamp(0.0, 1.0)
    h = doe.heights[i0.reshape(-1)].reshape(shape) * (1.0 - w) + doe.heights[
        i1.reshape(-1)
    ].reshape(shape) * w
    return torch.where(r <= r_max + 1e-9, h, torch.zeros((), dtype=torch.float64))


def doe_height_grid(doe: DOEProfile, shape: tuple[int, int] | None = None) -> torch.Tensor:
    """Full 2D height grid for any parameterization.

    Radial profiles expand to `shape` (default: the square grid inscribing
    the profile's designed diameter).
    """
    if doe.parameterization == "full_grid":
        return doe.heights
    if shape is None:
        n = 2 * (doe.heights.shape[0] - 1) + 1
        shape = (n, n)
    return radial_expand(doe, shape)
