"""Off-axis scalar wave propagation and PSF synthesis.

The angular spectrum method is implemented with a carrier-shifted transfer
function: a tilted field is stored as its compensated envelope (spectrum
centered near zero) and the transfer function is evaluated at the physical,
carrier-shifted frequencies while the output window follows the chief ray.
This is exact up to discretization, so highly tilted beams propagate at
native sampling. Samples of returned physical fields are exact even when
the tilt carrier exceeds the grid Nyquist rate; such fields must not be
interpolated between samples.

Both propagation legs zero-pad 2x before the FFT (linear, non-circular
semantics) and zero the transfer function beyond the per-axis local
frequency bound 1/(lambda*sqrt((2*z*df)^2 + 1)) (carrier-shifted form) to
suppress wrap-around aliasing at long distances.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch

from .elements import DOEProfile, DoePlacement, LensSystem, doe_phase
from .field import MM_PER_UM, SampledField, crop, pad, wavenumber
from .fieldsynth import TransitionField, assemble
from .materials import DEFAULT_WAVELENGTH_UM
from .raytrace import Source, paraxial_focus_z, trace_system


class BandLimitWarning(UserWarning):
    """Band limiting removed a significant fraction of the field energy."""


class OutOfDoeError(RuntimeError):
    """The requested window does not fit inside the DOE grid."""


def spectrum_center_from_chief(chief_dir, wavelength: float) -> tuple[float, float]:
    """Effective spectrum center (cycles/mm) from the chief-ray direction.

    f_c = (dx, dy) / lambda, direction cosines over wavelength.
    """
    dx, dy, dz = chief_dir
    if dz <= 0:
        raise ValueError("chief ray must propagate toward the sensor (dz > 0)")
    lam_mm = wavelength * MM_PER_UM
    return (dx / lam_mm, dy / lam_mm)


def spectrum_center_from_centroid(field: SampledField) -> tuple[float, float]:
    """Energy-weighted centroid of the power spectrum (cycles/mm).

    Alternative spectrum-center definition; the chief-ray form is the
    project default.
    """
    u = torch.fft.fft2(field.values)
    p = torch.abs(u) ** 2
    total = torch.sum(p)
    fx = torch.fft.fftfreq(field.shape[1], d=field.pitch, dtype=torch.float64)
    fy = torch.fft.fftfreq(field.shape[0], d=field.pitch, dtype=torch.float64)
    cx = torch.sum(p * fx[None, :]) / total
    cy = torch.sum(p * fy[:, None]) / total
    return (float(cx), float(cy))


def compensation_phase(
    x: torch.Tensor, y: torch.Tensor, spectrum_center: tuple[float, float]
) -> torch.Tensor:
    """phi_comp = -2*pi*(f_xc * x + f_yc * y), coordinates in mm."""
    fxc, fyc = spectrum_center
    return -2.0 * math.pi * (fxc * x + fyc * y)


def compensate(field: SampledField, spectrum_center: tuple[float, float]) -> SampledField:
    """Multiply by exp(j*phi_comp) so the spectrum center moves to ~0.

    The inverse (carrier restore) is `compensate` with the negated center.
    """
    x, y = field.coords()
    phi = compensation_phase(x, y, spectrum_center)
    return field.with_values(field.values * torch.exp(1j * phi.to(torch.complex128)))


def _transfer(
    shape: tuple[int, int],
    pitch: float,
    wavelength: float,
    z: float,
    spectrum_center: tuple[float, float],
    delta_origin: tuple[float, float],
    bandlimit: bool,
) -> torch.Tensor:
    """Carrier-shifted ASM transfer function on an fft-ordered grid."""
    ny, nx = shape
    lam = wavelength * MM_PER_UM
    ux = torch.fft.fftfreq(nx, d=pitch, dtype=torch.float64)
    uy = torch.fft.fftfreq(ny, d=pitch, dtype=torch.float64)
    fxc, fyc = spectrum_center
    gx = ux + fxc  # physical frequencies
    gy = uy + fyc
    arg = 1.0 - (lam * gx[None, :]) ** 2 - (lam * gy[:, None]) ** 2
    propagating = arg > 0.0
    kz_phase = wavenumber(wavelength) * z * torch.sqrt(torch.clamp(arg, min=0.0))
    dox, doy = delta_origin
    phase = kz_phase + 2.0 * math.pi * (ux[None, :] * dox + uy[:, None] * doy)
    h = torch.exp(1j * phase.to(torch.complex128)) * propagating
    if bandlimit:
        # per-axis sampling bound on the local frequency of the shifted
        # transfer phase; reduces to 1/(lam*sqrt((2 z df)^2+1)) on axis
        dfx = 1.0 / (nx * pitch)
        dfy = 1.0 / (ny * pitch)
        sx = -z * lam * gx / torch.sqrt(torch.clamp(1.0 - (lam * gx) ** 2, min=1e-30)) + dox
        sy = -z * lam * gy / torch.sqrt(torch.clamp(1.0 - (lam * gy) ** 2, min=1e-30)) + doy
        keep_x = (torch.abs(sx) <= 0.5 / dfx) & (torch.abs(lam * gx) < 1.0)
        keep_y = (torch.abs(sy) <= 0.5 / dfy) & (torch.abs(lam * gy) < 1.0)
        h = h * (keep_x[None, :] & keep_y[:, None])
    return h


def asm_propagate(
    field: SampledField,
    z: float,
    spectrum_center: tuple[float, float] = (0.0, 0.0),
    out_origin: tuple[float, float] | None = None,
    pad_factor: float = 2.0,
    bandlimit: bool = True,
) -> SampledField:
    """Propagate a field over distance z (mm) with the band-limited ASM.

    `field` holds the compensated envelope when spectrum_center != 0; the
    returned field is the envelope on a window centered at `out_origin`
    (default: the input origin). z = 0 with an unchanged window is the
    identity. Evanescent components are always zeroed; `bandlimit` applies
    the wrap-around sampling bound on top. Emits BandLimitWarning when the
    mask removes more than 10% of the spectral energy.
    """
    if out_origin is None:
        out_origin = field.origin
    if z == 0.0 and tuple(out_origin) == tuple(field.origin):
        return field
    shape = field.shape
    work = pad(field, pad_factor) if pad_factor > 1.0 else field
    spec = torch.fft.fft2(work.values)
    delta = (out_origin[0] - field.origin[0], out_origin[1] - field.origin[1])
    h = _transfer(work.shape, work.pitch, work.wavelength, z, spectrum_center, delta, bandlimit)
    with torch.no_grad():
        e_in = float(torch.sum(torch.abs(spec.detach()) ** 2))
        e_out = float(torch.sum(torch.abs(spec.detach() * h) ** 2))
    if e_in > 0 and e_out < 0.9 * e_in:
        warnings.warn(
            f"band limiting removed {100 * (1 - e_out / e_in):.1f}% of field energy",
            BandLimitWarning,
            stacklevel=2,
        )
    out_spec = spec * h
    out = work.with_values(torch.fft.ifft2(out_spec))
    out = crop(out, shape) if pad_factor > 1.0 else out
    return SampledField(
        values=out.values, pitch=field.pitch, wavelength=field.wavelength, origin=tuple(out_origin)
    )


# ---------------------------------------------------------------------------
# DOE windowing and the two-step propagation plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DoeWindow:
    """Field-sized window on the DOE grid around the chief-ray hit."""

    row0: int
    col0: int
    shape: tuple[int, int]
    origin: tuple[float, float]  # physical window center, mm
    center_cell: tuple[int, int]  # DOE grid indices of the window center


def doe_window(
    doe: DOEProfile,
    chief_origin: tuple[float, float, float],
    chief_dir: tuple[float, float, float],
    z_doe: float,
    shape: tuple[int, int],
    field_pitch: float,
) -> DoeWindow:
    """Locate the field-sized DOE window centered on the chief-ray hit.

    The DOE grid pitch must equal the field pitch. A window that would
    extend past the DOE grid is rejected, never silently clipped.
    """
    pitch_mm = doe.pitch * MM_PER_UM
    if abs(pitch_mm - field_pitch) > 1e-9 * field_pitch:
        raise ValueError(
            f"DOE pitch {pitch_mm} mm must match the field pitch {field_pitch} mm"
        )
    dz = chief_dir[2]
    if dz <= 0:
        raise ValueError("chief ray does not propagate toward the DOE")
    t = (z_doe - chief_origin[2]) / dz
    if t < -1e-9:
        raise ValueError("DOE plane lies behind the chief-ray origin")
    hx = chief_origin[0] + t * chief_dir[0]
    hy = chief_origin[1] + t * chief_dir[1]
    grid_ny, grid_nx = _doe_grid_shape(doe, shape)
    ic = grid_ny // 2 + int(round(hy / pitch_mm))
    jc = grid_nx // 2 + int(round(hx / pitch_mm))
    ny, nx = shape
    row0, col0 = ic - ny // 2, jc - nx // 2
    if row0 < 0 or col0 < 0 or row0 + ny > grid_ny or col0 + nx > grid_nx:
        raise OutOfDoeError(
            f"window {shape} at chief hit ({hx:.3f}, {hy:.3f}) mm exceeds DOE grid "
            f"{(grid_ny, grid_nx)}"
        )
    origin = ((jc - grid_nx // 2) * pitch_mm, (ic - grid_ny // 2) * pitch_mm)
    return DoeWindow(row0=row0, col0=col0, shape=shape, origin=origin, center_cell=(ic, jc))


def _doe_grid_shape(doe: DOEProfile, window_shape: tuple[int, int]) -> tuple[int, int]:
    if doe.parameterization == "full_grid":
        return tuple(doe.heights.shape)
    # radial profiles behave like the square grid inscribing their diameter,
    # but never smaller than the window itself
    n = 2 * (doe.heights.shape[0] - 1) + 1
    return (max(n, window_shape[0]), max(n, window_shape[1]))


def window_heights(doe: DOEProfile, window: DoeWindow) -> torch.Tensor:
    """Height map (um) on a window, differentiable w.r.t. the profile."""
    if doe.parameterization == "full_grid":
        ny, nx = window.shape
        return doe.heights[window.row0 : window.row0 + ny, window.col0 : window.col0 + nx]
    # evaluate the radial interpolation directly at window coordinates
    ny, nx = window.shape
    pitch = doe.pitch
    x = (torch.arange(nx, dtype=torch.float64) - nx // 2) * pitch + window.origin[0] / MM_PER_UM
    y = (torch.arange(ny, dtype=torch.float64) - ny // 2) * pitch + window.origin[1] / MM_PER_UM
    r = torch.sqrt(x[None, :] ** 2 + y[:, None] ** 2)
    n = doe.heights.shape[0]
    r_max = doe.radius_um
    t = torch.clamp(r / pitch, max=float(n - 1))
    i0 = torch.clamp(t.floor().long(), max=n - 1)
    i1 = torch.clamp(i0 + 1, max=n - 1)
    w = (t - i0.to(torch.float64)).clamp(0.0, 1.0)
    h = doe.heights[i0.reshape(-1)].reshape(window.shape) * (1.0 - w)
    h = h + doe.heights[i1.reshape(-1)].reshape(window.shape) * w
    return torch.where(r <= r_max + 1e-9, h, torch.zeros((), dtype=torch.float64))


@dataclass(frozen=True)
class PropagationPlan:
    """Distances, spectrum center, and windows for the two-step propagation."""

    z1: float  # transition plane -> DOE, mm
    z2: float  # DOE -> sensor, mm
    spectrum_center: tuple[float, float]  # cycles/mm at the plan wavelength
    chief_dir: tuple[float, float, float]
    doe_window: DoeWindow
    sensor_origin: tuple[float, float]  # mm
    placement_s: float
    wavelength: float

    def __post_init__(self):
        if self.z1 < 0:
            raise ValueError("DOE must lie at or behind the transition plane (z1 >= 0)")
        if not self.z2 > 0:
            raise ValueError("DOE must lie in front of the sensor (z2 > 0)")

    def spectrum_center_for(self, wavelength: float) -> tuple[float, float]:
        return spectrum_center_from_chief(self.chief_dir, wavelength)


def plan_two_step(
    system: LensSystem,
    doe: DOEProfile,
    placement: DoePlacement,
    sensor_z: float,
    transition: TransitionField,
    shape: tuple[int, int],
    pitch: float,
    center_mode: str = "chief",
) -> PropagationPlan:
    """Resolve distances and chief-ray windows for a two-step propagation."""
    z_pp = system.principal_plane_z
    z_doe = placement.resolve(z_pp, sensor_z)
    z_tr = transition.chief_origin[2]
    z1 = z_doe - z_tr
    z2 = sensor_z - z_doe
    lam = transition.field.wavelength
    if center_mode == "chief":
        fc = spectrum_center_from_chief(transition.chief_dir, lam)
    elif center_mode == "centroid":
        fc = spectrum_center_from_centroid(transition.field)
    else:
        raise ValueError(f"unknown spectrum-center mode {center_mode!r}")
    win = doe_window(doe, transition.chief_origin, transition.chief_dir, z_doe, shape, pitch)
    # sensor window follows the chief ray, snapped to the grid pitch
    dz = transition.chief_dir[2]
    t = (sensor_z - transition.chief_origin[2]) / dz
    sx = transition.chief_origin[0] + t * transition.chief_dir[0]
    sy = transition.chief_origin[1] + t * transition.chief_dir[1]
    sensor_origin = (round(sx / pitch) * pitch, round(sy / pitch) * pitch)
    return PropagationPlan(
        z1=z1,
        z2=z2,
        spectrum_center=fc,
        chief_dir=transition.chief_dir,
        doe_window=win,
        sensor_origin=sensor_origin,
        placement_s=placement.s,
        wavelength=lam,
    )


def propagate_two_step(
    transition: TransitionField,
    doe: DOEProfile,
    placement: DoePlacement,
    plan: PropagationPlan,
) -> SampledField:
    """Two-step propagation: transition plane -> windowed DOE -> sensor.

    The input is compensated (exp(j*phi_comp) folded into its unwrapped
    phase, keeping the envelope alias-free), propagated to the DOE window,
    modulated, and propagated to the sensor window. At the DOE, restoring
    the carrier and jointly re-applying exp(j*[phi_comp + phi_DOE]) cancels
    to a plain exp(j*phi_DOE) multiplication, which is what the code does.
    The returned field is the physical sensor field on its tagged window.
    """
    if abs(placement.s - plan.placement_s) > 1e-12:
        raise ValueError("plan was built for a different DOE placement")
    f = transition.field
    lam = f.wavelength
    fc = plan.spectrum_center_for(lam)
    x, y = f.coords()
    env_phase = transition.phase + compensation_phase(x, y, fc)
    env = transition.amplitude.to(torch.complex128) * torch.exp(1j * env_phase.to(torch.complex128))
    env_field = SampledField(values=env, pitch=f.pitch, wavelength=lam, origin=f.origin)

    at_doe = asm_propagate(env_field, plan.z1, spectrum_center=fc, out_origin=plan.doe_window.origin)
    phi_doe = doe_phase(doe, lam, heights=window_heights(doe, plan.doe_window))
    after_doe = at_doe.with_values(at_doe.values * torch.exp(1j * phi_doe.to(torch.complex128)))

    at_sensor = asm_propagate(after_doe, plan.z2, spectrum_center=fc, out_origin=plan.sensor_origin)
    # restore the physical carrier; sample-exact even past the Nyquist rate
    return compensate(at_sensor, (-fc[0], -fc[1]))


# ---------------------------------------------------------------------------
# Transition-field builders and PSF synthesis
# ---------------------------------------------------------------------------


def thin_lens_field(
    system: LensSystem,
    source: Source,
    shape: tuple[int, int],
    pitch: float,
    wavelength: float,
) -> SampledField:
    """Pupil field of an ideal thin lens: aperture x illumination x lens phase.

    E = A * exp(j*k*r_src) * exp(-j*k*(x^2+y^2)/(2f)), A = 1 inside the stop
    radius. Infinite focal lengths drop the quadratic term; infinite sources
    use the plane-wave tilt phase.
    """
    return _thin_lens_transition(system, source, shape, pitch, wavelength).field


def _thin_lens_transition(
    system: LensSystem,
    source: Source,
    shape: tuple[int, int],
    pitch: float,
    wavelength: float,
) -> TransitionField:
    if system.mode != "thin_lens":
        raise ValueError("thin lens field requires a thin_lens-mode system")
    stop = system.stop
    z_lens = stop.axial_position
    ny, nx = shape
    x = (torch.arange(nx, dtype=torch.float64) - nx // 2) * pitch
    y = (torch.arange(ny, dtype=torch.float64) - ny // 2) * pitch
    xx = x[None, :].expand(ny, nx)
    yy = y[:, None].expand(ny, nx)
    k = wavenumber(wavelength)
    amp = (torch.sqrt(xx**2 + yy**2) <= stop.semi_diameter).to(torch.float64)
    if source.at_infinity:
        dx, dy, _ = source.direction
        illum = k * (dx * xx + dy * yy)
        chief_dir = source.direction
    else:
        x0, y0, z0 = source.position
        illum = k * torch.sqrt((x0 - xx) ** 2 + (y0 - yy) ** 2 + (z0 - z_lens) ** 2)
        d = torch.tensor([-x0, -y0, z_lens - z0], dtype=torch.float64)
        d = d / torch.linalg.norm(d)
        chief_dir = (float(d[0]), float(d[1]), float(d[2]))
    phase = illum.clone()
    if system.focal_length is not None and not math.isinf(system.focal_length):
        phase = phase - k * (xx**2 + yy**2) / (2.0 * system.focal_length)
    return TransitionField.from_parts(
        amp, phase, pitch, wavelength, (0.0, 0.0), (0.0, 0.0, z_lens), chief_dir
    )


def make_transition(
    system: LensSystem,
    source: Source,
    shape: tuple[int, int],
    pitch: float,
    wavelength: float,
    pupil_samples: int = 64,
) -> TransitionField:
    """Transition-plane field for either lens mode.

    Traced systems carry the full source-to-transition OPL in their phase
    (illumination included); the thin-lens model applies the explicit
    spherical/tilt illumination phase.
    """
    if system.mode == "thin_lens":
        return _thin_lens_transition(system, source, shape, pitch, wavelength)
    result = trace_system(system, source, pupil_samples=pupil_samples, wavelength=wavelength)
    chief = result.chief
    origin = (
        round(chief.origin[0] / pitch) * pitch,
        round(chief.origin[1] / pitch) * pitch,
    )
    return assemble(result.bundle, chief, shape, pitch, origin)


@dataclass(frozen=True)
class PsfResult:
    """Normalized point spread function on its sensor window."""

    psf: torch.Tensor  # float64, sums to 1
    pitch: float  # mm
    origin: tuple[float, float]  # sensor-window center, mm
    chief_cell: tuple[int, int]  # grid indices of the chief-ray landing
    wavelength: float  # um


def psf(
    source: Source,
    system: LensSystem,
    doe: DOEProfile,
    placement: DoePlacement,
    sensor_z: float,
    wavelength: float,
    shape: tuple[int, int],
    pitch: float,
    pupil_samples: int = 64,
    plan: PropagationPlan | None = None,
) -> PsfResult:
    """Monochromatic PSF: squared sensor-field amplitude, unit sum."""
    transition = make_transition(system, source, shape, pitch, wavelength, pupil_samples)
    if plan is None:
        plan = plan_two_step(system, doe, placement, sensor_z, transition, shape, pitch)
    sensor = propagate_two_step(transition, doe, placement, plan)
    k = torch.abs(sensor.values) ** 2
    k = k / torch.sum(k)
    return PsfResult(
        psf=k,
        pitch=pitch,
        origin=plan.sensor_origin,
        chief_cell=(shape[0] // 2, shape[1] // 2),
        wavelength=wavelength,
    )


def default_sensor_response(
    wavelengths, centers=(0.64, 0.55, 0.46), sigma: float = 0.03
) -> torch.Tensor:
    """Gaussian RGB response matrix (3 x n_wavelengths); rows are R, G, B."""
    lam = torch.as_tensor(wavelengths, dtype=torch.float64)
    c = torch.as_tensor(centers, dtype=torch.float64)
    return torch.exp(-((lam[None, :] - c[:, None]) ** 2) / (2.0 * sigma**2))


@dataclass(frozen=True)
class SpectralPSF:
    """Per-wavelength PSFs plus their sensor-response-weighted channels."""

    channels: torch.Tensor  # (n_channels, ny, nx), each sums to 1
    monochromatic: tuple[torch.Tensor, ...]  # unit-sum PSF per wavelength
    wavelengths: tuple[float, ...]
    response: torch.Tensor  # (n_channels, n_wavelengths)
    pitch: float
    origin: tuple[float, float]
    chief_cell: tuple[int, int]


def spectral_psf(
    source: Source,
    system: LensSystem,
    doe: DOEProfile,
    placement: DoePlacement,
    sensor_z: float,
    wavelengths,
    response: torch.Tensor | None = None,
    shape: tuple[int, int] = (256, 256),
    pitch: float = 0.0065,
    pupil_samples: int = 64,
) -> SpectralPSF:
    """Sensor-response-weighted PSF channels.

    Windows and the spectrum-center geometry are fixed by the chief ray at
    the nominal wavelength; each wavelength then propagates with its own
    carrier, transfer function, and DOE dispersion.
    """
    wavelengths = tuple(float(w) for w in wavelengths)
    if response is None:
        response = default_sensor_response(wavelengths)
    response = torch.as_tensor(response, dtype=torch.float64)
    if response.ndim != 2 or response.shape[1] != len(wavelengths):
        raise ValueError("response must be (n_channels, n_wavelengths)")
    if torch.any(response < 0):
        raise ValueError("response weights must be >= 0")
    if torch.any(torch.sum(response, dim=1) == 0):
        raise ValueError("sensor response has an all-zero channel row")

    ref = make_transition(system, source, shape, pitch, DEFAULT_WAVELENGTH_UM, pupil_samples)
    plan = plan_two_step(system, doe, placement, sensor_z, ref, shape, pitch)
    monos = []
    for lam in wavelengths:
        monos.append(
            psf(source, system, doe, placement, sensor_z, lam, shape, pitch, pupil_samples, plan=plan).psf
        )
    stack = torch.stack(monos)  # (n_wl, ny, nx)
    channels = torch.einsum("cw,wyx->cyx", response, stack)
    channels = channels / torch.sum(channels, dim=(1, 2), keepdim=True)
    return SpectralPSF(
        channels=channels,
        monochromatic=tuple(monos),
        wavelengths=wavelengths,
        response=response,
        pitch=pitch,
        origin=plan.sensor_origin,
        chief_cell=(shape[0] // 2, shape[1] // 2),
    )


def required_doe_half_extent_mm(
    system: LensSystem,
    placement: DoePlacement,
    sensor_z: float,
    angles_deg,
    shape: tuple[int, int],
    pitch: float,
    margin: float = 1.05,
) -> float:
    """Half-extent a DOE grid needs so every angle's window fits inside it."""
    z_pp = system.principal_plane_z
    z_doe = placement.resolve(z_pp, sensor_z)
    reach = 0.0
    for a in angles_deg:
        walk = abs((z_doe - z_pp) * math.tan(math.radians(a)))
        reach = max(reach, walk)
    half_window = 0.5 * max(shape) * pitch
    return margin * (reach + half_window)


def focus_distance_mm(system: LensSystem, source: Source, wavelength: float = 0.55) -> float:
    """Sensor plane position that focuses `source` (paraxial)."""
    return paraxial_focus_z(system, source, wavelength)
