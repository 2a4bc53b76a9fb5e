"""Dispersion models for lens glasses and DOE substrates."""

from __future__ import annotations

from dataclasses import dataclass

DESIGN_BAND_UM = (0.4, 0.7)
DEFAULT_WAVELENGTH_UM = 0.55  # project nominal wavelength


@dataclass(frozen=True)
class Material:
    """Refractive medium.

    model "constant": n(lambda) = n0 for every wavelength.
    model "cauchy":   n(lambda) = A + b/lambda^2 + c/lambda^4, anchored so
    that n(reference_wavelength) = n0 (A is derived, not stored).

    b is in um^2, c in um^4, wavelengths in um.
    """

    model: str
    n0: float
    b: float = 0.0
    c: float = 0.0
    reference_wavelength: float = DEFAULT_WAVELENGTH_UM

    def __post_init__(self):
        if self.model not in ("constant", "cauchy"):
            raise ValueError(f"unknown material model {self.model!r}")
        if self.n0 < 1.0:
            raise ValueError(f"refractive index n0 must be >= 1, got {self.n0}")

    @property
    def is_air(self) -> bool:
        return self.model == "constant" and self.n0 == 1.0


AIR = Material(model="constant", n0=1.0)


def refractive_index(material: Material, wavelength: float) -> float:
    """Refractive index at `wavelength` (um).

    Constant-model materials are valid at any wavelength; dispersive models
    are restricted to the supported band.
    """
    if material.model == "constant":
        return material.n0
    lo, hi = DESIGN_BAND_UM
    if not lo <= wavelength <= hi:
        raise ValueError(
            f"wavelength {wavelength} um outside supported band [{lo}, {hi}] um"
        )
    l0 = material.reference_wavelength
    a = material.n0 - material.b / l0**2 - material.c / l0**4
    return a + material.b / wavelength**2 + material.c / wavelength**4
