"""Complex field grids with physical units, the project FFT contract, and pad/crop.

Conventions used everywhere downstream:

* lengths in mm, wavelengths in um, angles in radians; conversions happen
  only at I/O boundaries,
* a grid of shape (ny, nx) samples physical coordinates
  ``x_j = origin_x + (j - nx//2) * pitch`` and
  ``y_i = origin_y + (i - ny//2) * pitch`` (cell nx//2, ny//2 is the grid
  center),
* ``fft2`` applies no scale factor, ``ifft2`` carries the full 1/N factor,
  so ``ifft2(fft2(f)) == f``,
* compute is float64 / complex128, file storage is float32.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

MM_PER_UM = 1e-3


def wavenumber(wavelength_um: float) -> float:
    """Wave number 2*pi/lambda in rad/mm for a wavelength given in um."""
    return 2.0 * np.pi / (wavelength_um * MM_PER_UM)


def _as_complex_grid(values) -> torch.Tensor:
    t = torch.as_tensor(values)
    if t.is_complex():
        t = t.to(torch.complex128)
    else:
        t = t.to(torch.float64).to(torch.complex128)
    if t.ndim != 2:
        raise ValueError(f"field values must be 2D, got shape {tuple(t.shape)}")
    if t.shape[0] < 2 or t.shape[1] < 2:
        raise ValueError(f"grid dimensions must be >= 2, got {tuple(t.shape)}")
    return t


@dataclass(frozen=True)
class SampledField:
    """Regular 2D grid of complex amplitudes with physical sampling metadata.

    Attributes:
        values: complex128 tensor of shape (ny, nx).
        pitch: sample spacing in mm (> 0).
        wavelength: wavelength in um (> 0).
        origin: physical (x, y) offset of the grid center within its plane, mm.
    """

    values: torch.Tensor
    pitch: float
    wavelength: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "values", _as_complex_grid(self.values))
        if not self.pitch > 0:
            raise ValueError(f"pitch must be > 0, got {self.pitch}")
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be > 0, got {self.wavelength}")
        if len(self.origin) != 2:
            raise ValueError("origin must be an (x, y) pair in mm")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)

    def coords(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Physical (x, y) coordinate grids in mm, each of shape (ny, nx)."""
        ny, nx = self.shape
        x = (torch.arange(nx, dtype=torch.float64) - nx // 2) * self.pitch + self.origin[0]
        y = (torch.arange(ny, dtype=torch.float64) - ny // 2) * self.pitch + self.origin[1]
        return x.expand(ny, nx), y[:, None].expand(ny, nx)

    def with_values(self, values) -> "SampledField":
        return replace(self, values=values)

    def numpy(self) -> np.ndarray:
        return self.values.detach().numpy()


@dataclass(frozen=True)
class Spectrum:
    """FFT of a SampledField, DC bin at index [0, 0] (fft ordering)."""

    values: torch.Tensor
    pitch: float
    wavelength: float
    origin: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "values", _as_complex_grid(self.values))

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)


@dataclass(frozen=True)
class FrequencyGrid:
    """Spatial-frequency axes for a grid, cycles/mm, fft ordering."""

    fx: torch.Tensor  # (nx,)
    fy: torch.Tensor  # (ny,)
    nyquist: float

    @classmethod
    def for_shape(cls, shape: tuple[int, int], pitch: float) -> "FrequencyGrid":
        ny, nx = shape
        fx = torch.from_numpy(np.fft.fftfreq(nx, d=pitch))
        fy = torch.from_numpy(np.fft.fftfreq(ny, d=pitch))
        return cls(fx=fx, fy=fy, nyquist=1.0 / (2.0 * pitch))

    def mesh(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(fX, fY) 2D meshes of shape (ny, nx)."""
        return self.fx[None, :].expand(len(self.fy), -1), self.fy[:, None].expand(-1, len(self.fx))


def fft2(field: SampledField) -> Spectrum:
    """Forward 2D FFT of a field. No scale factor (inverse carries 1/N)."""
    return Spectrum(
        values=torch.fft.fft2(field.values),
        pitch=field.pitch,
        wavelength=field.wavelength,
        origin=field.origin,
    )


def ifft2(spectrum: Spectrum) -> SampledField:
    """Inverse of :func:`fft2`; carries the full 1/N normalization."""
    return SampledField(
        values=torch.fft.ifft2(spectrum.values),
        pitch=spectrum.pitch,
        wavelength=spectrum.wavelength,
        origin=spectrum.origin,
    )


def energy(field: SampledField) -> float:
    """Total energy sum(|E|^2) * pitch^2."""
    return float(torch.sum(torch.abs(field.values) ** 2).item() * field.pitch**2)


def spectrum_energy(spectrum: Spectrum) -> float:
    """Energy of a spectrum under the project FFT convention (Parseval-equal)."""
    n = spectrum.values.numel()
    return float(torch.sum(torch.abs(spectrum.values) ** 2).item() * spectrum.pitch**2 / n)


def pad(field: SampledField, factor: float) -> SampledField:
    """Zero-pad a field symmetrically so each dimension grows by `factor`.

    The original grid center cell stays the grid center cell, so origin and
    pitch are preserved and :func:`crop` is an exact inverse.
    """
    if factor < 1:
        raise ValueError(f"pad factor must be >= 1, got {factor}")
    ny, nx = field.shape
    my, mx = int(round(ny * factor)), int(round(nx * factor))
    out = torch.zeros((my, mx), dtype=torch.complex128)
    oy, ox = my // 2 - ny // 2, mx // 2 - nx // 2
    out[oy : oy + ny, ox : ox + nx] = field.values
    return field.with_values(out)


def crop(field: SampledField, shape: tuple[int, int]) -> SampledField:
    """Crop a field back to `shape` around the grid center. Inverse of pad."""
    ny, nx = field.shape
    my, mx = shape
    if my > ny or mx > nx:
        raise ValueError(f"crop shape {shape} exceeds field shape {(ny, nx)}")
    oy, ox = ny // 2 - my // 2, nx // 2 - mx // 2
    return field.with_values(field.values[oy : oy + my, ox : ox + mx])


# ---------------------------------------------------------------------------
# Field dump format: one ASCII header line, then little-endian f32 (re, im)
# pairs in row-major order.
# ---------------------------------------------------------------------------

_FIELD_MAGIC = "WFFIELD"


def write_field(field: SampledField, path) -> None:
    ny, nx = field.shape
    header = (
        f"{_FIELD_MAGIC} {ny} {nx} {field.pitch!r} {field.wavelength!r} "
        f"{field.origin[0]!r} {field.origin[1]!r}\n"
    )
    vals = field.values.detach().numpy()
    data = np.empty((ny, nx, 2), dtype="<f4")
    data[..., 0] = vals.real
    data[..., 1] = vals.imag
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes())


def read_field(path) -> SampledField:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if not header or header[0] != _FIELD_MAGIC:
            raise ValueError(f"{path}: not a {_FIELD_MAGIC} file")
        ny, nx = int(header[1]), int(header[2])
        pitch, wavelength = float(header[3]), float(header[4])
        origin = (float(header[5]), float(header[6]))
        raw = np.frombuffer(f.read(ny * nx * 2 * 4), dtype="<f4").reshape(ny, nx, 2)
    values = raw[..., 0].astype(np.float64) + 1j * raw[..., 1].astype(np.float64)
    return SampledField(values=values, pitch=pitch, wavelength=wavelength, origin=origin)
