"""WGS84 frames, a single-zone map projection, and polynomial orbits.

Absolute positions are ECEF meters unless a type says otherwise. The
ellipsoid is fixed to WGS84; no other datum exists anywhere in the package,
which keeps frame bookkeeping out of every downstream interface. The map
projection is a transverse Mercator with standard UTM parameters, evaluated
with a sixth-order Krueger series so round trips are far below the
millimeter level inside a zone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import OrbitValidityError, ValidationError

# WGS84 defining constants
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)

SPEED_OF_LIGHT = 299792458.0

# UTM convention: scale on the central meridian, false easting/northing
_K0 = 0.9996
_FALSE_EASTING = 500000.0
_FALSE_NORTHING_SOUTH = 10000000.0

# Krueger series in the third flattening n, order n^6
_N = WGS84_F / (2.0 - WGS84_F)
_A_BAR = WGS84_A / (1.0 + _N) * (1.0 + _N**2 / 4.0 + _N**4 / 64.0 + _N**6 / 256.0)
_ALPHA = (
    0.0,
    _N / 2.0 - 2.0 / 3.0 * _N**2 + 5.0 / 16.0 * _N**3 + 41.0 / 180.0 * _N**4
    - 127.0 / 288.0 * _N**5 + 7891.0 / 37800.0 * _N**6,
    13.0 / 48.0 * _N**2 - 3.0 / 5.0 * _N**3 + 557.0 / 1440.0 * _N**4
    + 281.0 / 630.0 * _N**5 - 1983433.0 / 1935360.0 * _N**6,
    61.0 / 240.0 * _N**3 - 103.0 / 140.0 * _N**4 + 15061.0 / 26880.0 * _N**5
    + 167603.0 / 181440.0 * _N**6,
    49561.0 / 161280.0 * _N**4 - 179.0 / 168.0 * _N**5
    + 6601661.0 / 7257600.0 * _N**6,
    34729.0 / 80640.0 * _N**5 - 3418889.0 / 1995840.0 * _N**6,
    212378941.0 / 319334400.0 * _N**6,
)
_BETA = (
    0.0,
    _N / 2.0 - 2.0 / 3.0 * _N**2 + 37.0 / 96.0 * _N**3 - 1.0 / 360.0 * _N**4
    - 81.0 / 512.0 * _N**5 + 96199.0 / 604800.0 * _N**6,
    1.0 / 48.0 * _N**2 + 1.0 / 15.0 * _N**3 - 437.0 / 1440.0 * _N**4
    + 46.0 / 105.0 * _N**5 - 1118711.0 / 3870720.0 * _N**6,
    17.0 / 480.0 * _N**3 - 37.0 / 840.0 * _N**4 - 209.0 / 4480.0 * _N**5
    + 5569.0 / 90720.0 * _N**6,
    4397.0 / 161280.0 * _N**4 - 11.0 / 504.0 * _N**5
    - 830251.0 / 7257600.0 * _N**6,
    4583.0 / 161280.0 * _N**5 - 108847.0 / 3991680.0 * _N**6,
    20648693.0 / 638668800.0 * _N**6,
)


@dataclass(frozen=True)
class Ecef:
    """Earth-centered, earth-fixed cartesian position in meters."""

    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "Ecef":
        a = np.asarray(arr, dtype=float)
        if a.shape != (3,):
            raise ValidationError(f"ECEF vector must have shape (3,), got {a.shape}")
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def distance_to(self, other: "Ecef") -> float:
        return math.dist((self.x, self.y, self.z), (other.x, other.y, other.z))


@dataclass(frozen=True)
class Geodetic:
    """Geodetic position on WGS84: latitude/longitude in degrees, height in meters."""

    lat_deg: float
    lon_deg: float
    height_m: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.lat_deg <= 90.0:
            raise ValidationError(f"latitude {self.lat_deg} outside [-90, 90]")


@dataclass(frozen=True)
class MapGrid:
    """Projected position: UTM-style easting/northing in meters plus zone id.

    The zone string is `<number><N|S>`, e.g. "35N". All point sets that are
    compared in map coordinates must share the zone; mixing zones is a bug,
    not something this type papers over.
    """

    easting_m: float
    northing_m: float
    zone: str


def geodetic_to_ecef(g: Geodetic) -> Ecef:
    """Convert geodetic coordinates to ECEF meters."""
    lat = math.radians(g.lat_deg)
    lon = math.radians(g.lon_deg)
    s, c = math.sin(lat), math.cos(lat)
    nrad = WGS84_A / math.sqrt(1.0 - WGS84_E2 * s * s)
    return Ecef(
        (nrad + g.height_m) * c * math.cos(lon),
        (nrad + g.height_m) * c * math.sin(lon),
        (nrad * (1.0 - WGS84_E2) + g.height_m) * s,
    )


def ecef_to_geodetic(p: Ecef) -> Geodetic:
    """Convert ECEF meters to geodetic coordinates.

    Fixed-point iteration on the latitude; converges to well below 1e-6 m
    everywhere including the poles.
    """
    x, y, z = p.x, p.y, p.z
    lon = math.atan2(y, x)
    rho = math.hypot(x, y)
    if rho < 1e-9:
        lat = math.copysign(math.pi / 2.0, z) if z != 0.0 else 0.0
        return Geodetic(math.degrees(lat), math.degrees(lon), abs(z) - WGS84_B)
    lat = math.atan2(z, rho * (1.0 - WGS84_E2))
    nrad = WGS84_A
    h = 0.0
    for _ in range(32):
        s = math.sin(lat)
        nrad = WGS84_A / math.sqrt(1.0 - WGS84_E2 * s * s)
        c = math.cos(lat)
        if abs(c) > 0.1:
            h = rho / c - nrad
        else:
            h = z / s - nrad * (1.0 - WGS84_E2)
        lat_new = math.atan2(z, rho * (1.0 - WGS84_E2 * nrad / (nrad + h)))
        if abs(lat_new - lat) < 1e-14:
            lat = lat_new
            break
        lat = lat_new
    s = math.sin(lat)
    c = math.cos(lat)
    nrad = WGS84_A / math.sqrt(1.0 - WGS84_E2 * s * s)
    h = rho / c - nrad if abs(c) > 0.1 else z / s - nrad * (1.0 - WGS84_E2)
    return Geodetic(math.degrees(lat), math.degrees(lon), h)


def enu_rotation(lat_deg: float, lon_deg: float) -> np.ndarray:
    """Rows are the unit east, north, up vectors at the given geodetic spot.

    Up is the ellipsoid normal, so the matrix is orthonormal with
    determinant +1 (east x north = up).
    """
    lat = math.radians(lat_deg)
    lon = math.radians(lon_deg)
    sl, cl = math.sin(lat), math.cos(lat)
    so, co = math.sin(lon), math.cos(lon)
    return np.array([
        [-so, co, 0.0],
        [-sl * co, -sl * so, cl],
        [cl * co, cl * so, sl],
    ])


def enu_basis(origin: Ecef) -> np.ndarray:
    """ENU rotation matrix (rows east/north/up) for an ECEF origin."""
    g = ecef_to_geodetic(origin)
    return enu_rotation(g.lat_deg, g.lon_deg)


@dataclass(frozen=True)
class LocalEnu:
    """A local east/north/up frame anchored at an ECEF origin."""

    origin: Ecef
    rotation: np.ndarray  # rows east, north, up

    def to_local(self, p: Ecef) -> np.ndarray:
        return self.rotation @ (p.as_array() - self.origin.as_array())

    def to_ecef(self, enu) -> Ecef:
        v = self.origin.as_array() + self.rotation.T @ np.asarray(enu, dtype=float)
        return Ecef.from_array(v)


def make_local_enu(origin: Ecef) -> LocalEnu:
    return LocalEnu(origin, enu_basis(origin))


# ---------------------------------------------------------------------------
# Transverse Mercator (UTM parameters, Krueger series)
# ---------------------------------------------------------------------------

def utm_zone(g: Geodetic) -> str:
    """Standard 6-degree zone containing the point (no polar/Norway exceptions)."""
    lon = ((g.lon_deg + 180.0) % 360.0) - 180.0
    num = int((lon + 180.0) // 6.0) + 1
    num = min(max(num, 1), 60)
    return f"{num}{'N' if g.lat_deg >= 0.0 else 'S'}"


def _zone_params(zone: str) -> tuple[float, float]:
    try:
        num = int(zone[:-1])
        hemi = zone[-1].upper()
    except (ValueError, IndexError):
        raise ValidationError(f"bad zone id {zone!r}, expected like '35N'") from None
    if not 1 <= num <= 60 or hemi not in ("N", "S"):
        raise ValidationError(f"bad zone id {zone!r}, expected like '35N'")
    lon0 = math.radians(num * 6.0 - 183.0)
    fn = 0.0 if hemi == "N" else _FALSE_NORTHING_SOUTH
    return lon0, fn


def geodetic_to_map(g: Geodetic, zone: str | None = None) -> MapGrid:
    """Project to the transverse Mercator grid of `zone` (default: the point's zone)."""
    if zone is None:
        zone = utm_zone(g)
    lon0, fn = _zone_params(zone)
    lat = math.radians(g.lat_deg)
    dlon = math.radians(((g.lon_deg - math.degrees(lon0) + 180.0) % 360.0) - 180.0)
    e = math.sqrt(WGS84_E2)
    s = math.sin(lat)
    t = math.sinh(math.atanh(s) - e * math.atanh(e * s))
    cd = math.cos(dlon)
    xi_p = math.atan2(t, cd)
    eta_p = math.asinh(math.sin(dlon) / math.hypot(t, cd))
    xi, eta = xi_p, eta_p
    for j in range(1, 7):
        xi += _ALPHA[j] * math.sin(2 * j * xi_p) * math.cosh(2 * j * eta_p)
        eta += _ALPHA[j] * math.cos(2 * j * xi_p) * math.sinh(2 * j * eta_p)
    return MapGrid(
        _K0 * _A_BAR * eta + _FALSE_EASTING,
        _K0 * _A_BAR * xi + fn,
        zone,
    )


def _tau_from_tau_prime(tau_p: float) -> float:
    # invert the conformal-latitude map by Newton iteration
    e = math.sqrt(WGS84_E2)
    tau = tau_p / (1.0 - WGS84_E2)
    for _ in range(8):
        sig = math.sinh(e * math.atanh(e * tau / math.hypot(1.0, tau)))
        f = tau * math.hypot(1.0, sig) - sig * math.hypot(1.0, tau) - tau_p
        df = ((math.hypot(1.0, sig) * math.hypot(1.0, tau) - sig * tau)
              * (1.0 - WGS84_E2) * math.hypot(1.0, tau)
              / (1.0 + (1.0 - WGS84_E2) * tau * tau))
        step = f / df
        tau -= step
        if abs(step) < 1e-15 * max(1.0, abs(tau)):
            break
    return tau


def map_to_geodetic(m: MapGrid, height_m: float = 0.0) -> Geodetic:
    """Inverse projection; the caller supplies the height to carry along."""
    lon0, fn = _zone_params(m.zone)
    xi = (m.northing_m - fn) / (_K0 * _A_BAR)
    eta = (m.easting_m - _FALSE_EASTING) / (_K0 * _A_BAR)
    xi_p, eta_p = xi, eta
    for j in range(1, 7):
        xi_p -= _BETA[j] * math.sin(2 * j * xi) * math.cosh(2 * j * eta)
        eta_p -= _BETA[j] * math.cos(2 * j * xi) * math.sinh(2 * j * eta)
    se = math.sinh(eta_p)
    cx = math.cos(xi_p)
    tau_p = math.sin(xi_p) / math.hypot(se, cx)
    lat = math.atan(_tau_from_tau_prime(tau_p))
    lon = lon0 + math.atan2(se, cx)
    lon_deg = ((math.degrees(lon) + 180.0) % 360.0) - 180.0
    return Geodetic(math.degrees(lat), lon_deg, height_m)


# ---------------------------------------------------------------------------
# Polynomial orbit model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OrbitModel:
    """Satellite trajectory as one polynomial per ECEF component.

    `coeffs` has shape (degree + 1, 3), low order first, in meters over
    powers of (t - epoch) seconds. Velocity and acceleration come from the
    analytic derivatives. Evaluation is only legal inside
    [t_min, t_max]; outside is a hard error, never an extrapolation.
    """

    epoch: float
    coeffs: np.ndarray
    t_min: float
    t_max: float

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 2 or c.shape[1] != 3:
            raise ValidationError(f"orbit coeffs must be (k, 3), got {c.shape}")
        if c.shape[0] < 3:
            raise ValidationError("orbit polynomial degree must be at least 2")
        if not np.all(np.isfinite(c)):
            raise ValidationError("orbit coeffs must be finite")
        if not self.t_min < self.t_max:
            raise ValidationError("orbit validity interval is empty")
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return self.coeffs.shape[0] - 1

    def _check(self, t) -> np.ndarray:
        dt = np.asarray(t, dtype=float) - self.epoch
        lo = self.t_min - self.epoch
        hi = self.t_max - self.epoch
        if np.any(dt < lo - 1e-9) or np.any(dt > hi + 1e-9):
            raise OrbitValidityError(
                f"time outside orbit validity [{self.t_min}, {self.t_max}]")
        return dt

    def _eval(self, coeffs: np.ndarray, t) -> np.ndarray:
        dt = self._check(t)
        out = np.zeros(dt.shape + (3,))
        for row in coeffs[::-1]:
            out = out * dt[..., None] + row
        return out

    def position(self, t) -> np.ndarray:
        """Position at time(s) t; shape (3,) for scalar t, (n, 3) for arrays."""
        return self._eval(self.coeffs, t)

    def velocity(self, t) -> np.ndarray:
        k = np.arange(1, self.coeffs.shape[0])
        return self._eval(self.coeffs[1:] * k[:, None], t)

    def acceleration(self, t) -> np.ndarray:
        k = np.arange(1, self.coeffs.shape[0])
        d1 = self.coeffs[1:] * k[:, None]
        k2 = np.arange(1, d1.shape[0])
        return self._eval(d1[1:] * k2[:, None], t)

    def state(self, t) -> tuple[np.ndarray, np.ndarray]:
        return self.position(t), self.velocity(t)


def fit_orbit(times, positions, degree: int = 5,
              validity: tuple[float, float] | None = None) -> OrbitModel:
    """Least-squares polynomial fit of sampled ECEF states.

    The epoch is placed at the center of the sampled interval so the
    polynomial is evaluated with small abscissae.
    """
    t = np.asarray(times, dtype=float)
    pos = np.asarray(positions, dtype=float)
    if pos.shape != (t.size, 3):
        raise ValidationError("positions must be (n, 3) matching times")
    epoch = 0.5 * (t.min() + t.max())
    coeffs = np.polynomial.polynomial.polyfit(t - epoch, pos, degree)
    if validity is None:
        validity = (float(t.min()), float(t.max()))
    return OrbitModel(epoch, coeffs, validity[0], validity[1])
