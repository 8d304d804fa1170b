"""Physical constants shared by the orbital, power and thermal models."""

from __future__ import annotations

from dataclasses import dataclass

SIDEREAL_DAY_S = 86164.0905
YEAR_S = 365.25 * 86400.0
GEO_ALTITUDE_KM = 35786.0
LUNAR_OWLT_S = 1.28
# Grazing margin for optical ISLs: the line of sight must clear R_E + this.
ISL_GRAZING_MARGIN_KM = 80.0


@dataclass(frozen=True)
class PhysicalConstants:
    mu_earth: float = 398600.4418  # km^3/s^2
    R_E: float = 6371.0  # km
    c: float = 299792.458  # km/s
    solar_constant: float = 1361.0  # W/m^2
    sigma: float = 5.670374419e-8  # W/(m^2 K^4)

    def __post_init__(self) -> None:
        for name in ("mu_earth", "R_E", "c", "solar_constant", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


DEFAULT_CONSTANTS = PhysicalConstants()
