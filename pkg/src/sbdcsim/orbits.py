"""Circular two-body orbits, ground visibility, contact windows and eclipse.

Frame: Earth-centred inertial, x axis through the Greenwich meridian at the
scenario epoch, z axis through the north pole. All positions are in km and
all times in seconds since the scenario epoch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .constants import (
    DEFAULT_CONSTANTS,
    GEO_ALTITUDE_KM,
    ISL_GRAZING_MARGIN_KM,
    SIDEREAL_DAY_S,
    YEAR_S,
    PhysicalConstants,
)

EARTH_ROTATION_RAD_S = 2.0 * math.pi / SIDEREAL_DAY_S
OBLIQUITY_RAD = math.radians(23.44)


class Layer(str, enum.Enum):
    LEO = "LEO"
    MEO = "MEO"
    GEO = "GEO"
    LUNAR = "Lunar"
    GROUND = "Ground"


def _norm_angle(deg: float) -> float:
    a = math.fmod(float(deg), 360.0)
    if a < 0:
        a += 360.0
    # fmod of values like -1e-17 can land exactly on 360.0
    return 0.0 if a >= 360.0 else a


@dataclass(frozen=True)
class CircularOrbit:
    altitude_km: float
    inclination_deg: float = 0.0
    raan_deg: float = 0.0
    phase_deg: float = 0.0
    layer: Layer = Layer.LEO

    def __post_init__(self) -> None:
        layer = Layer(self.layer)
        object.__setattr__(self, "layer", layer)
        h = float(self.altitude_km)
        if not h > 0:
            raise ValueError(f"altitude_km must be > 0, got {h}")
        if layer is Layer.LEO and not 300.0 <= h <= 2000.0:
            raise ValueError(f"LEO altitude must lie in [300, 2000] km, got {h}")
        if layer is Layer.MEO and not 2000.0 < h < GEO_ALTITUDE_KM:
            raise ValueError(f"MEO altitude must lie in (2000, 35786) km, got {h}")
        if layer is Layer.GEO and abs(h - GEO_ALTITUDE_KM) > 1e-6:
            raise ValueError(f"GEO altitude must be {GEO_ALTITUDE_KM} km, got {h}")
        if layer in (Layer.LUNAR, Layer.GROUND):
            raise ValueError(f"{layer.value} nodes are not propagated as circular orbits")
        object.__setattr__(self, "altitude_km", h)
        for name in ("inclination_deg", "raan_deg", "phase_deg"):
            object.__setattr__(self, name, _norm_angle(getattr(self, name)))

    def radius_km(self, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
        return constants.R_E + self.altitude_km


@dataclass(frozen=True)
class SatelliteState:
    position: tuple[float, float, float]
    time: float

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.position, dtype=float)


@dataclass(frozen=True)
class GroundStation:
    latitude_deg: float
    longitude_deg: float
    min_elevation_deg: float = 0.0

    def __post_init__(self) -> None:
        if abs(self.latitude_deg) > 90.0:
            raise ValueError("|latitude_deg| must be <= 90")
        if not 0.0 <= self.min_elevation_deg < 90.0:
            raise ValueError("min_elevation_deg must lie in [0, 90)")


class Visibility(NamedTuple):
    visible: bool
    elevation_deg: float
    slant_range_km: float


class IslVisibility(NamedTuple):
    visible: bool
    range_km: float


def orbital_period(orbit: CircularOrbit, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    r = orbit.radius_km(constants)
    return 2.0 * math.pi * math.sqrt(r**3 / constants.mu_earth)


def mean_motion(orbit: CircularOrbit, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    r = orbit.radius_km(constants)
    return math.sqrt(constants.mu_earth / r**3)


def positions(
    orbit: CircularOrbit, times: np.ndarray, constants: PhysicalConstants = DEFAULT_CONSTANTS
) -> np.ndarray:
    """Vectorised propagation; returns an (n, 3) array of ECI positions."""
    t = np.asarray(times, dtype=float)
    r = orbit.radius_km(constants)
    n = mean_motion(orbit, constants)
    # reduce the argument per revolution so t and t + T map to the same angle
    period = 2.0 * math.pi / n
    u = math.radians(orbit.phase_deg) + 2.0 * math.pi * (np.mod(t, period) / period)
    inc = math.radians(orbit.inclination_deg)
    raan = math.radians(orbit.raan_deg)
    cu, su = np.cos(u), np.sin(u)
    ci, si = math.cos(inc), math.sin(inc)
    co, so = math.cos(raan), math.sin(raan)
    x = r * (co * cu - so * su * ci)
    y = r * (so * cu + co * su * ci)
    z = r * (su * si)
    return np.stack([x, y, z], axis=-1)


def propagate(
    orbit: CircularOrbit, t: float, constants: PhysicalConstants = DEFAULT_CONSTANTS
) -> SatelliteState:
    if t < 0:
        raise ValueError("t must be >= 0")
    p = positions(orbit, np.array([t]), constants)[0]
    return SatelliteState(position=(float(p[0]), float(p[1]), float(p[2])), time=float(t))


def station_positions(
    gs: GroundStation,
    times: np.ndarray,
    rotating: bool = True,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    lat = math.radians(gs.latitude_deg)
    lon = math.radians(gs.longitude_deg) + (EARTH_ROTATION_RAD_S * t if rotating else 0.0 * t)
    R = constants.R_E
    return np.stack(
        [R * math.cos(lat) * np.cos(lon), R * math.cos(lat) * np.sin(lon), R * math.sin(lat) + 0.0 * t],
        axis=-1,
    )


def elevation_and_range(sat_pos: np.ndarray, gs_pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elevation (deg) and slant range (km) for matching rows of positions."""
    rho = sat_pos - gs_pos
    rng = np.linalg.norm(rho, axis=-1)
    up = gs_pos / np.linalg.norm(gs_pos, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.clip(np.sum(rho * up, axis=-1) / rng, -1.0, 1.0)
    return np.degrees(np.arcsin(s)), rng


def visibility(
    sat: SatelliteState,
    gs: GroundStation,
    t: float | None = None,
    rotating: bool = True,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> Visibility:
    t = sat.time if t is None else t
    g = station_positions(gs, np.array([t]), rotating, constants)
    el, rng = elevation_and_range(sat.vector[None, :], g)
    e = float(el[0])
    return Visibility(e >= gs.min_elevation_deg, e, float(rng[0]))


def refine_boundary(pred: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, tol: float) -> float:
    """Bisect a transition of ``pred`` between ``lo`` and ``hi`` (pred(lo) != pred(hi))."""
    v_lo = bool(pred(np.array([lo]))[0])
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if bool(pred(np.array([mid]))[0]) == v_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def intervals_from_predicate(
    pred: Callable[[np.ndarray], np.ndarray],
    horizon_s: float,
    step_s: float,
    tol_s: float = 0.1,
    t0: float = 0.0,
) -> list[tuple[float, float]]:
    """Time intervals in [t0, t0 + horizon_s] on which ``pred`` holds.

    The predicate is sampled every ``step_s``; each sampled transition is
    refined by bisection to within ``tol_s``. Windows shorter than one step
    can be missed entirely.
    """
    if step_s <= 0:
        raise ValueError("step_s must be > 0")
    if horizon_s < step_s:
        raise ValueError("horizon_s must be >= step_s")
    n = int(math.floor(horizon_s / step_s + 1e-9))
    times = t0 + np.arange(n + 1) * step_s
    if times[-1] < t0 + horizon_s:
        times = np.append(times, t0 + horizon_s)
    flags = np.asarray(pred(times), dtype=bool)
    out: list[tuple[float, float]] = []
    start = t0 if flags[0] else None
    for i in range(1, len(times)):
        if flags[i] == flags[i - 1]:
            continue
        edge = refine_boundary(pred, float(times[i - 1]), float(times[i]), tol_s)
        if flags[i]:
            start = edge
        else:
            out.append((start, edge))
            start = None
    if start is not None:
        out.append((start, t0 + horizon_s))
    return out


def contact_windows(
    orbit: CircularOrbit,
    gs: GroundStation,
    horizon_s: float,
    step_s: float,
    rotating: bool = True,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> list[tuple[float, float]]:
    def pred(t: np.ndarray) -> np.ndarray:
        el, _ = elevation_and_range(positions(orbit, t, constants), station_positions(gs, t, rotating, constants))
        return el >= gs.min_elevation_deg

    return intervals_from_predicate(pred, horizon_s, step_s)


def propagation_delay(slant_range_km: float, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    if slant_range_km < 0:
        raise ValueError("range must be non-negative")
    return slant_range_km / constants.c


def nadir_delay(altitude_km: float, round_trip: bool = False, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    d = propagation_delay(altitude_km, constants)
    return 2.0 * d if round_trip else d


def eclipse_mask(pos: np.ndarray, sun: np.ndarray, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Cylindrical shadow test for rows of ``pos`` against rows (or one) sun unit vector."""
    sun = np.broadcast_to(sun, pos.shape)
    along = np.sum(pos * sun, axis=-1)
    perp = pos - along[..., None] * sun
    return (along < 0.0) & (np.linalg.norm(perp, axis=-1) < constants.R_E)


def in_eclipse(sat: SatelliteState, sun_direction, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> bool:
    s = np.asarray(sun_direction, dtype=float)
    if abs(np.linalg.norm(s) - 1.0) > 1e-9:
        raise ValueError("sun_direction must be a unit vector")
    return bool(eclipse_mask(sat.vector[None, :], s[None, :], constants)[0])


@dataclass(frozen=True)
class SunModel:
    """Fixed sun direction, or uniform motion along the ecliptic."""

    mode: str = "fixed"
    direction: tuple[float, float, float] = (
        math.cos(OBLIQUITY_RAD),
        0.0,
        math.sin(OBLIQUITY_RAD),
    )
    initial_longitude_deg: float = 90.0

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "ecliptic"):
            raise ValueError("sun mode must be 'fixed' or 'ecliptic'")
        v = np.asarray(self.direction, dtype=float)
        n = float(np.linalg.norm(v))
        if not n > 0:
            raise ValueError("sun direction must be non-zero")
        object.__setattr__(self, "direction", tuple(float(x) for x in v / n))

    def at(self, times: np.ndarray) -> np.ndarray:
        t = np.asarray(times, dtype=float)
        if self.mode == "fixed":
            return np.broadcast_to(np.asarray(self.direction), t.shape + (3,)).copy()
        lam = math.radians(self.initial_longitude_deg) + 2.0 * math.pi * t / YEAR_S
        return np.stack(
            [np.cos(lam), np.sin(lam) * math.cos(OBLIQUITY_RAD), np.sin(lam) * math.sin(OBLIQUITY_RAD)],
            axis=-1,
        )


def eclipse_windows(
    orbit: CircularOrbit,
    sun: SunModel,
    horizon_s: float,
    step_s: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> list[tuple[float, float]]:
    def pred(t: np.ndarray) -> np.ndarray:
        return eclipse_mask(positions(orbit, t, constants), sun.at(t), constants)

    return intervals_from_predicate(pred, horizon_s, step_s)


def segment_clearance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimum distance from the origin to segments a-b (row-wise)."""
    d = b - a
    dd = np.sum(d * d, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(dd > 0, -np.sum(a * d, axis=-1) / np.where(dd > 0, dd, 1.0), 0.0)
    s = np.clip(s, 0.0, 1.0)
    closest = a + s[..., None] * d
    return np.linalg.norm(closest, axis=-1)


def isl_clear(a: np.ndarray, b: np.ndarray, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    return segment_clearance(a, b) >= constants.R_E + ISL_GRAZING_MARGIN_KM


def isl_visibility(
    a: SatelliteState, b: SatelliteState, constants: PhysicalConstants = DEFAULT_CONSTANTS
) -> IslVisibility:
    # canonical ordering keeps the floating-point result symmetric in (a, b)
    pa, pb = sorted([tuple(a.position), tuple(b.position)])
    va, vb = np.asarray(pa)[None, :], np.asarray(pb)[None, :]
    ok = bool(isl_clear(va, vb, constants)[0])
    return IslVisibility(ok, float(np.linalg.norm(vb - va)))


def beta_angle_deg(orbit: CircularOrbit, sun_direction) -> float:
    """Angle between the sun vector and the orbit plane."""
    inc = math.radians(orbit.inclination_deg)
    raan = math.radians(orbit.raan_deg)
    normal = np.array([math.sin(raan) * math.sin(inc), -math.cos(raan) * math.sin(inc), math.cos(inc)])
    s = np.asarray(sun_direction, dtype=float)
    return math.degrees(math.asin(float(np.clip(normal @ s / np.linalg.norm(s), -1.0, 1.0))))
