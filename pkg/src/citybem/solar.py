"""Sun position, sky-direction binning and plane-of-array irradiance.

Directions use azimuth clockwise from north and altitude above the horizon;
the matching local vector is (east, north, up).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

BELOW_HORIZON = None


@dataclass(frozen=True)
class SunDirection:
    azimuth: float
    altitude: float

    def vector(self) -> np.ndarray:
        return direction_vector(self.azimuth, self.altitude)


def direction_vector(azimuth, altitude) -> np.ndarray:
    az = np.radians(azimuth)
    alt = np.radians(altitude)
    return np.stack([np.cos(alt) * np.sin(az), np.cos(alt) * np.cos(az), np.sin(alt)], axis=-1)


def _julian_day(t: datetime) -> float:
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    epoch = datetime(2000, 1, 1, 12, tzinfo=timezone.utc)
    return 2451545.0 + (t - epoch).total_seconds() / 86400.0


def sun_position(lat: float, lon: float, t: datetime) -> SunDirection:
    """Low-precision solar ephemeris (Astronomical Almanac style).

    Mean longitude and anomaly give the ecliptic longitude, then declination
    and right ascension; the hour angle follows from Greenwich mean sidereal
    time. Good to a few hundredths of a degree for 1950-2050; no refraction.
    """
    if abs(lat) > 90:
        raise ValueError(f"latitude {lat} out of range")
    n = _julian_day(t) - 2451545.0
    L = math.radians((280.460 + 0.9856474 * n) % 360.0)
    g = math.radians((357.528 + 0.9856003 * n) % 360.0)
    lam = L + math.radians(1.915) * math.sin(g) + math.radians(0.020) * math.sin(2 * g)
    eps = math.radians(23.439 - 0.0000004 * n)
    ra = math.atan2(math.cos(eps) * math.sin(lam), math.cos(lam))
    dec = math.asin(math.sin(eps) * math.sin(lam))
    gmst_h = (18.697374558 + 24.06570982441908 * n) % 24.0
    ha = math.radians(gmst_h * 15.0 + lon) - ra
    phi = math.radians(lat)
    sin_alt = math.sin(phi) * math.sin(dec) + math.cos(phi) * math.cos(dec) * math.cos(ha)
    alt = math.asin(max(-1.0, min(1.0, sin_alt)))
    # azimuth from north, clockwise
    az = math.atan2(-math.sin(ha) * math.cos(dec),
                    math.cos(phi) * math.sin(dec) - math.sin(phi) * math.cos(dec) * math.cos(ha))
    return SunDirection(math.degrees(az) % 360.0, math.degrees(alt))


@dataclass(frozen=True)
class SkyGrid:
    n_az: int = 72
    n_alt: int = 10

    def __post_init__(self):
        if self.n_az < 4 or self.n_alt < 2:
            raise ValueError("sky grid needs n_az >= 4 and n_alt >= 2")

    @property
    def n_bins(self) -> int:
        return self.n_az * self.n_alt

    @property
    def d_az(self) -> float:
        return 360.0 / self.n_az

    @property
    def d_alt(self) -> float:
        return 90.0 / self.n_alt

    def az_centers(self) -> np.ndarray:
        return (np.arange(self.n_az) + 0.5) * self.d_az

    def alt_centers(self) -> np.ndarray:
        return (np.arange(self.n_alt) + 0.5) * self.d_alt

    def center(self, i_az: int, i_alt: int) -> SunDirection:
        return SunDirection((i_az + 0.5) * self.d_az, (i_alt + 0.5) * self.d_alt)

    def center_vectors(self) -> np.ndarray:
        """(n_az, n_alt, 3) unit vectors at bin centers."""
        az, alt = np.meshgrid(self.az_centers(), self.alt_centers(), indexing="ij")
        return direction_vector(az, alt)

    def solid_angles(self) -> np.ndarray:
        """(n_alt,) solid angle of one bin in each altitude band."""
        edges = np.radians(np.arange(self.n_alt + 1) * self.d_alt)
        return np.radians(self.d_az) * np.diff(np.sin(edges))


def grid_bin(grid: SkyGrid, sun: SunDirection) -> tuple[int, int] | None:
    """Sky bin ``(i_az, i_alt)`` holding the direction; None below the horizon."""
    if sun.altitude < 0:
        return BELOW_HORIZON
    i_az = int((sun.azimuth % 360.0) // grid.d_az) % grid.n_az
    i_alt = min(int(sun.altitude // grid.d_alt), grid.n_alt - 1)
    return i_az, i_alt


def face_irradiance(normal, sun: SunDirection, dni: float, dhi: float,
                    blocked: float, sky_view: float) -> float:
    """Direct plus isotropic-diffuse irradiance on a face, W/m2."""
    direct = 0.0
    if sun.altitude >= 0:
        cos_t = float(np.dot(np.asarray(normal, dtype=float), sun.vector()))
        direct = dni * max(0.0, cos_t) * (1.0 - blocked)
    return direct + dhi * sky_view


def sky_view_factor(normal, blocked: np.ndarray, grid: SkyGrid) -> float:
    """Unblocked, cosine-weighted share of the sky seen by a face.

    Bin-center quadrature normalized so that an unobstructed horizontal roof
    sees exactly 1 and an unobstructed wall about one half.
    """
    cos = np.clip(grid.center_vectors() @ np.asarray(normal, dtype=float), 0.0, None)
    w = cos * grid.solid_angles()[None, :]
    roof = (np.sin(np.radians(grid.alt_centers())) * grid.solid_angles()).sum() * grid.n_az
    return float(((1.0 - np.asarray(blocked)) * w).sum() / roof)
