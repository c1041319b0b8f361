"""WGS84 geodetic/ECEF conversions, distances, and signal propagation delay.

All localization math in this package runs in the Earth-centered Earth-fixed
(ECEF) Cartesian frame, where straight-line Euclidean distance is physically
meaningful over the few-hundred-km scale of a receiver network. Geodetic
coordinates are the interchange format; results convert back on output.

Conventions:
- Altitudes are ellipsoidal (WGS84) throughout. Barometric altitude is
  carried by the dataset layer but never enters geometry.
- Propagation is straight-line vacuum travel at c. Tropospheric refraction
  is ignored; over long slant paths this contributes on the order of tens
  of nanoseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidCoordinateError, SingularityError

SPEED_OF_LIGHT_MPS = 299_792_458.0

# WGS84 ellipsoid
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


@dataclass(frozen=True)
class GeoPosition:
    """WGS84 geodetic position; altitude in meters above the ellipsoid."""

    latitude_deg: float
    longitude_deg: float
    altitude_m: float


@dataclass(frozen=True)
class EcefPosition:
    """Earth-centered Earth-fixed Cartesian position in meters."""

    x_m: float
    y_m: float
    z_m: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x_m, self.y_m, self.z_m)


def _check_geodetic(g: GeoPosition) -> None:
    if not (-90.0 <= g.latitude_deg <= 90.0):
        raise InvalidCoordinateError(f"latitude {g.latitude_deg} outside [-90, 90]")
    if not (-180.0 <= g.longitude_deg < 180.0):
        raise InvalidCoordinateError(f"longitude {g.longitude_deg} outside [-180, 180)")


def geodetic_to_ecef(g: GeoPosition) -> EcefPosition:
    """Exact closed-form WGS84 forward transform."""
    _check_geodetic(g)
    lat = math.radians(g.latitude_deg)
    lon = math.radians(g.longitude_deg)
    sin_lat = math.sin(lat)
    cos_lat = math.cos(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    x = (n + g.altitude_m) * cos_lat * math.cos(lon)
    y = (n + g.altitude_m) * cos_lat * math.sin(lon)
    z = (n * (1.0 - WGS84_E2) + g.altitude_m) * sin_lat
    return EcefPosition(x, y, z)


def ecef_to_geodetic(e: EcefPosition) -> GeoPosition:
    """Inverse of geodetic_to_ecef, iterated to sub-micrometer closure.

    Raises SingularityError near the Earth center, where latitude and
    altitude are undefined.
    """
    x, y, z = e.x_m, e.y_m, e.z_m
    p = math.hypot(x, y)
    r = math.hypot(p, z)
    if r < 1e3:
        raise SingularityError("ECEF point too close to Earth center")
    if p < 1e-9:
        # Exactly on the polar axis.
        lat = math.copysign(90.0, z)
        return GeoPosition(lat, 0.0, abs(z) - WGS84_B)

    lon = math.atan2(y, x)
    # Bowring-style fixed point: update latitude with the altitude-corrected
    # eccentricity term until stationary.
    lat = math.atan2(z, p * (1.0 - WGS84_E2))
    alt = 0.0
    for _ in range(25):
        sin_lat = math.sin(lat)
        n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
        alt = p / math.cos(lat) - n
        new_lat = math.atan2(z, p * (1.0 - WGS84_E2 * n / (n + alt)))
        if abs(new_lat - lat) < 1e-14:
            lat = new_lat
            break
        lat = new_lat
    sin_lat = math.sin(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    # Near the poles cos(lat) degrades; derive altitude from z there instead.
    if abs(math.cos(lat)) > 1e-8:
        alt = p / math.cos(lat) - n
    else:
        alt = z / sin_lat - n * (1.0 - WGS84_E2)
    lon_deg = math.degrees(lon)
    if lon_deg >= 180.0:
        lon_deg -= 360.0
    return GeoPosition(math.degrees(lat), lon_deg, alt)


def ecef_distance(a: EcefPosition, b: EcefPosition) -> float:
    """Euclidean distance in meters."""
    return math.sqrt(
        (a.x_m - b.x_m) ** 2 + (a.y_m - b.y_m) ** 2 + (a.z_m - b.z_m) ** 2
    )


def propagation_delay(a: EcefPosition, b: EcefPosition) -> float:
    """Straight-line vacuum propagation time between two points, in seconds."""
    return ecef_distance(a, b) / SPEED_OF_LIGHT_MPS
