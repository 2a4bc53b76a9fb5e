"""Hybrid refractive-diffractive imaging simulator with off-aperture DOE design.

Pipeline: ray tracing through a lens prescription to the transition plane,
field synthesis onto a regular grid, two-step off-axis wave propagation
through a windowed DOE to the sensor, PSF formation, occlusion-aware scene
rendering, and first-order height-map optimization.
"""

from .elements import (
    DOEProfile,
    DoePlacement,
    LensSystem,
    Surface,
    doe_phase,
    quantize_heights,
    radial_expand,
    sag,
)
from .field import FrequencyGrid, SampledField, Spectrum, crop, energy, fft2, ifft2, pad
from .fieldsynth import TransitionField, assemble, interpolate_opl, splat_intensity
from .losses import LossReport, concentration, dwa_weights, loss_focus, loss_l1, loss_mse, total_loss
from .materials import AIR, Material, refractive_index
from .optimize import OptimizeConfig, OptimizeResult, height_gradient, optimize_doe
from .raytrace import EmptyBundleError, Ray, RayBundle, Source, intersect, refract, trace_system
from .scene import LayeredScene, PatchGrid, depth_quantize, occlusion_composite, render_shift_variant
from .waveprop import (
    PropagationPlan,
    PsfResult,
    SpectralPSF,
    asm_propagate,
    compensate,
    doe_window,
    propagate_two_step,
    psf,
    spectral_psf,
    spectrum_center_from_chief,
    thin_lens_field,
)

__version__ = "0.1.0"

__all__ = [
    "AIR",
    "DOEProfile",
    "DoePlacement",
    "EmptyBundleError",
    "FrequencyGrid",
    "LayeredScene",
    "LensSystem",
    "LossReport",
    "Material",
    "OptimizeConfig",
    "OptimizeResult",
    "PatchGrid",
    "PropagationPlan",
    "PsfResult",
    "Ray",
    "RayBundle",
    "SampledField",
    "Source",
    "SpectralPSF",
    "Spectrum",
    "Surface",
    "TransitionField",
    "asm_propagate",
    "assemble",
    "compensate",
    "concentration",
    "crop",
    "depth_quantize",
    "doe_phase",
    "doe_window",
    "dwa_weights",
    "energy",
    "fft2",
    "height_gradient",
    "ifft2",
    "interpolate_opl",
    "intersect",
    "loss_focus",
    "loss_l1",
    "loss_mse",
    "occlusion_composite",
    "optimize_doe",
    "pad",
    "propagate_two_step",
    "psf",
    "quantize_heights",
    "radial_expand",
    "refract",
    "refractive_index",
    "render_shift_variant",
    "sag",
    "spectral_psf",
    "spectrum_center_from_chief",
    "splat_intensity",
    "thin_lens_field",
    "total_loss",
    "trace_system",
    "__version__",
]
