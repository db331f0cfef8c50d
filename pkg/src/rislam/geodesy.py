"""WGS-84 geodetic <-> UTM conversion.

Transverse Mercator via the Krueger series in terms of the third flattening,
accurate to well under a millimeter inside a UTM zone. Both directions are
provided; the inverse is needed to synthesize GNSS fixes from metric ground
truth.
"""

from __future__ import annotations

import math
from typing import NamedTuple

# WGS-84 ellipsoid
A = 6378137.0
F = 1.0 / 298.257223563

K0 = 0.9996
FALSE_EASTING = 500000.0
FALSE_NORTHING_SOUTH = 10000000.0
MAX_LATITUDE = 84.0

_N = F / (2.0 - F)
_N2 = _N * _N
_N3 = _N2 * _N
_N4 = _N2 * _N2
# rectifying radius
_A_HAT = A / (1.0 + _N) * (1.0 + _N2 / 4.0 + _N4 / 64.0)

_ALPHA = (
    _N / 2.0 - 2.0 * _N2 / 3.0 + 5.0 * _N3 / 16.0 + 41.0 * _N4 / 180.0,
    13.0 * _N2 / 48.0 - 3.0 * _N3 / 5.0 + 557.0 * _N4 / 1440.0,
    61.0 * _N3 / 240.0 - 103.0 * _N4 / 140.0,
    49561.0 * _N4 / 161280.0,
)
_BETA = (
    _N / 2.0 - 2.0 * _N2 / 3.0 + 37.0 * _N3 / 96.0 - _N4 / 360.0,
    _N2 / 48.0 + _N3 / 15.0 - 437.0 * _N4 / 1440.0,
    17.0 * _N3 / 480.0 - 37.0 * _N4 / 840.0,
    4397.0 * _N4 / 161280.0,
)
_DELTA = (
    2.0 * _N - 2.0 * _N2 / 3.0 - 2.0 * _N3 + 116.0 * _N4 / 45.0,
    7.0 * _N2 / 3.0 - 8.0 * _N3 / 5.0 - 227.0 * _N4 / 45.0,
    56.0 * _N3 / 15.0 - 136.0 * _N4 / 35.0,
    4279.0 * _N4 / 630.0,
)

_E = math.sqrt(F * (2.0 - F))


class UnsupportedLatitudeError(ValueError):
    """Latitude outside the UTM band (|lat| > 84 deg)."""


class UtmCoordinate(NamedTuple):
    zone: int
    easting: float
    northing: float
    altitude: float
    hemisphere: str


def utm_zone(lon_deg: float) -> int:
    """Standard 6-degree zone number for a longitude in degrees."""
    lon = ((lon_deg + 180.0) % 360.0) - 180.0
    zone = int((lon + 180.0) // 6.0) + 1
    return min(max(zone, 1), 60)


def central_meridian(zone: int) -> float:
    return -183.0 + 6.0 * zone


def geodetic_to_utm(
    lat_deg: float, lon_deg: float, alt: float = 0.0, zone: int | None = None
) -> UtmCoordinate:
    """Forward projection. Pass `zone` to force a neighbouring zone's grid,
    which keeps coordinates continuous across a zone boundary."""
    if not (math.isfinite(lat_deg) and math.isfinite(lon_deg)):
        raise ValueError("non-finite latitude/longitude")
    if abs(lat_deg) > MAX_LATITUDE:
        raise UnsupportedLatitudeError(
            f"latitude {lat_deg:.4f} outside +/-{MAX_LATITUDE} deg UTM band"
        )
    if zone is None:
        zone = utm_zone(lon_deg)
    elif not 1 <= zone <= 60:
        raise ValueError(f"zone {zone} out of range 1..60")

    lat = math.radians(lat_deg)
    dlon = math.radians(lon_deg - central_meridian(zone))

    # conformal latitude
    s = math.sin(lat)
    t = math.sinh(math.atanh(s) - _E * math.atanh(_E * s))
    xi_p = math.atan2(t, math.cos(dlon))
    eta_p = math.asinh(math.sin(dlon) / math.hypot(t, math.cos(dlon)))

    xi = xi_p
    eta = eta_p
    for j, a in enumerate(_ALPHA, start=1):
        xi += a * math.sin(2 * j * xi_p) * math.cosh(2 * j * eta_p)
        eta += a * math.cos(2 * j * xi_p) * math.sinh(2 * j * eta_p)

    easting = FALSE_EASTING + K0 * _A_HAT * eta
    northing = K0 * _A_HAT * xi
    hemisphere = "N"
    if lat_deg < 0.0:
        northing += FALSE_NORTHING_SOUTH
        hemisphere = "S"
    return UtmCoordinate(zone, easting, northing, alt, hemisphere)


def utm_to_geodetic(
    zone: int, easting: float, northing: float, hemisphere: str = "N"
) -> tuple[float, float]:
    """(lat_deg, lon_deg) of a UTM coordinate."""
    if not 1 <= zone <= 60:
        raise ValueError(f"zone {zone} out of range 1..60")
    if hemisphere not in ("N", "S"):
        raise ValueError("hemisphere must be 'N' or 'S'")
    y = northing - (FALSE_NORTHING_SOUTH if hemisphere == "S" else 0.0)
    xi = y / (K0 * _A_HAT)
    eta = (easting - FALSE_EASTING) / (K0 * _A_HAT)

    xi_p = xi
    eta_p = eta
    for j, b in enumerate(_BETA, start=1):
        xi_p -= b * math.sin(2 * j * xi) * math.cosh(2 * j * eta)
        eta_p -= b * math.cos(2 * j * xi) * math.sinh(2 * j * eta)

    chi = math.asin(math.sin(xi_p) / math.cosh(eta_p))
    lat = chi
    for j, d in enumerate(_DELTA, start=1):
        lat += d * math.sin(2 * j * chi)
    lon = math.radians(central_meridian(zone)) + math.atan2(
        math.sinh(eta_p), math.cos(xi_p)
    )
    return math.degrees(lat), math.degrees(lon)
