"""Convert a scattered ray bundle at the transition plane into a grid field.

Optical path length is interpolated (piecewise-linear over the Delaunay
triangulation of the landing points) while intensity is accumulated by
bilinear splatting; amplitude and phase combine into the transfer field.
Phase is kept as an unwrapped real grid so downstream code can fold
compensation and illumination terms in before complex exponentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import Delaunay, QhullError

from .field import SampledField, wavenumber
from .raytrace import Ray, RayBundle, Source, transition_points

MAX_DROPPED_ENERGY_FRACTION = 0.01


class DegenerateBundleError(RuntimeError):
    """Landing points are collinear or too few to triangulate."""


class DroppedEnergyError(RuntimeError):
    """More than the allowed fraction of ray energy landed off-grid."""


def _grid_axes(shape: tuple[int, int], pitch: float, origin: tuple[float, float]):
    ny, nx = shape
    x = (np.arange(nx) - nx // 2) * pitch + origin[0]
    y = (np.arange(ny) - ny // 2) * pitch + origin[1]
    return x, y


def interpolate_opl(
    bundle: RayBundle,
    shape: tuple[int, int],
    pitch: float,
    origin: tuple[float, float] = (0.0, 0.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Interpolate per-ray OPL onto a regular grid.

    Returns (opl_grid_mm, valid_mask); cells outside the convex hull of the
    landing points are invalid. OPL (not wrapped phase) is interpolated, so
    no unwrapping is ever needed.
    """
    pts = transition_points(bundle)
    if pts.shape[0] < 3:
        raise DegenerateBundleError("need at least 3 alive rays to interpolate")
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise DegenerateBundleError(f"degenerate landing set: {exc}") from exc
    interp = LinearNDInterpolator(tri, bundle.opl[bundle.alive])
    x, y = _grid_axes(shape, pitch, origin)
    gx, gy = np.meshgrid(x, y)
    opl = interp(gx, gy)
    valid = np.isfinite(opl)
    return np.where(valid, opl, 0.0), valid


def splat_intensity(
    bundle: RayBundle,
    shape: tuple[int, int],
    pitch: float,
    origin: tuple[float, float] = (0.0, 0.0),
) -> tuple[np.ndarray, float]:
    """Deposit unit energy per alive ray, split bilinearly over 4 cells.

    Returns (intensity_grid, dropped_energy). Rays landing outside the grid
    extent contribute to dropped_energy instead of the grid.
    """
    ny, nx = shape
    pts = transition_points(bundle)
    if pts.shape[0] == 0:
        raise DegenerateBundleError("bundle has no alive rays")
    x, y = _grid_axes(shape, pitch, origin)
    fx = (pts[:, 0] - x[0]) / pitch
    fy = (pts[:, 1] - y[0]) / pitch
    i0 = np.floor(fy).astype(np.int64)
    j0 = np.floor(fx).astype(np.int64)
    wy = fy - i0
    wx = fx - j0
    grid = np.zeros((ny, nx))
    dropped = 0.0
    for di, dj, w in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        ii, jj = i0 + di, j0 + dj
        ok = (ii >= 0) & (ii < ny) & (jj >= 0) & (jj < nx)
        np.add.at(grid, (ii[ok], jj[ok]), w[ok])
        dropped += float(np.sum(w[~ok]))
    return grid, dropped


@dataclass(frozen=True)
class TransitionField:
    """Complex transfer field at the transition plane plus chief-ray data.

    `amplitude` and `phase` (rad, unwrapped) are kept alongside the complex
    field so later stages can add illumination/compensation phases in real
    arithmetic before exponentiating.
    """

    field: SampledField
    amplitude: torch.Tensor
    phase: torch.Tensor
    chief_origin: tuple[float, float, float]
    chief_dir: tuple[float, float, float]

    @classmethod
    def from_parts(
        cls,
        amplitude: torch.Tensor,
        phase: torch.Tensor,
        pitch: float,
        wavelength: float,
        origin: tuple[float, float],
        chief_origin: tuple[float, float, float],
        chief_dir: tuple[float, float, float],
    ) -> "TransitionField":
        amplitude = torch.as_tensor(amplitude, dtype=torch.float64)
        phase = torch.as_tensor(phase, dtype=torch.float64)
        values = amplitude.to(torch.complex128) * torch.exp(1j * phase.to(torch.complex128))
        f = SampledField(values=values, pitch=pitch, wavelength=wavelength, origin=origin)
        return cls(field=f, amplitude=amplitude, phase=phase, chief_origin=chief_origin, chief_dir=chief_dir)

    def with_illumination(self, source: Source) -> "TransitionField":
        """Add the point-source illumination phase k*r (or a plane-wave tilt)."""
        f = self.field
        x, y = f.coords()
        k = wavenumber(f.wavelength)
        z_plane = self.chief_origin[2]
        if source.at_infinity:
            dx, dy, _ = source.direction
            extra = k * (dx * x + dy * y)
        else:
            x0, y0, z0 = source.position
            extra = k * torch.sqrt((x0 - x) ** 2 + (y0 - y) ** 2 + (z0 - z_plane) ** 2)
        return TransitionField.from_parts(
            self.amplitude,
            self.phase + extra,
            f.pitch,
            f.wavelength,
            f.origin,
            self.chief_origin,
            self.chief_dir,
        )


def assemble(
    bundle: RayBundle,
    chief: Ray,
    shape: tuple[int, int],
    pitch: float,
    origin: tuple[float, float] = (0.0, 0.0),
) -> TransitionField:
    """Build the transfer field sqrt(I) * exp(j*phi) from a traced bundle.

    Amplitude is normalized to unit total energy (sum |E|^2 * pitch^2 = 1);
    cells with no intensity or outside the interpolation hull are exactly 0.
    Fails when more than 1% of the ray energy lands off-grid: silent energy
    loss would corrupt PSF normalization.
    """
    opl, valid = interpolate_opl(bundle, shape, pitch, origin)
    intensity, dropped = splat_intensity(bundle, shape, pitch, origin)
    total = intensity.sum()
    if dropped > MAX_DROPPED_ENERGY_FRACTION * (total + dropped):
        raise DroppedEnergyError(
            f"{dropped:.1f} of {total + dropped:.1f} ray energy landed off-grid"
        )
    intensity = np.where(valid, intensity, 0.0)
    norm = intensity.sum() * pitch**2
    if norm <= 0:
        raise DegenerateBundleError("no ray energy landed on valid grid cells")
    amplitude = np.sqrt(intensity / norm)
    phase = np.where(valid & (intensity > 0), wavenumber(bundle.wavelength) * opl, 0.0)
    return TransitionField.from_parts(
        torch.from_numpy(amplitude),
        torch.from_numpy(phase),
        pitch,
        bundle.wavelength,
        origin,
        chief.origin,
        chief.direction,
    )
