"""Zero-Doppler radar timing: radar coding, geocoding, and pixel maps.

The forward problem (radar coding) finds the azimuth time where the
satellite velocity is orthogonal to the line of sight and returns it with
the two-way range time tau_rg = 2 |X_S - X_T| / c. The inverse problem
(geocoding) intersects the range sphere, the zero-Doppler plane, and a
constant-ellipsoidal-height surface. Both are exact to the stated
tolerances, not approximations: every downstream positioning claim leans on
these two routines agreeing with each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConvergenceError,
    NoIntersectionError,
    ValidationError,
)
from .geodesy import (
    SPEED_OF_LIGHT,
    Ecef,
    Geodetic,
    OrbitModel,
    ecef_to_geodetic,
    enu_rotation,
    geodetic_to_ecef,
)

_COARSE_SAMPLES = 64
_AZ_TOL_S = 1e-12
_GEOCODE_TOL_M = 1e-9
_GEOCODE_MAX_ITER = 50
_MAX_STEP_M = 2e5


@dataclass(frozen=True)
class RadarTiming:
    """One radar observation: zero-Doppler azimuth time and two-way range time."""

    t_az: float
    tau_rg: float

    def __post_init__(self):
        if not self.tau_rg > 0.0:
            raise ValidationError(f"tau_rg must be positive, got {self.tau_rg}")
        if not (math.isfinite(self.t_az) and math.isfinite(self.tau_rg)):
            raise ValidationError("timing values must be finite")


@dataclass(frozen=True)
class PixelCoord:
    """Fractional image coordinates: line along azimuth, sample along range."""

    line: float
    sample: float


@dataclass(frozen=True)
class AcquisitionGeometry:
    """Everything needed to map between a target and one image's timings.

    heading is the ground-track class at the scene, incidence_deg the nominal
    scene-center incidence. Both are annotation-level descriptors; the orbit
    polynomial is the actual geometry.
    """

    orbit: OrbitModel
    prf: float
    rsf: float
    t_az_first: float
    tau_rg_first: float
    heading: str
    incidence_deg: float
    look_side: str = "right"

    def __post_init__(self):
        if self.prf <= 0.0 or self.rsf <= 0.0:
            raise ValidationError("prf and rsf must be positive")
        if self.heading not in ("ascending", "descending"):
            raise ValidationError(f"bad heading {self.heading!r}")
        if self.look_side not in ("left", "right"):
            raise ValidationError(f"bad look side {self.look_side!r}")
        if not 0.0 < self.incidence_deg < 90.0:
            raise ValidationError(f"incidence {self.incidence_deg} outside (0, 90)")


def radar_code(geom: AcquisitionGeometry, target: Ecef) -> RadarTiming:
    """Solve the zero-Doppler equation for a fixed target.

    A coarse scan over the orbit validity window brackets the sign change of
    f(t) = v(t) . (X_T - X_S(t)), then a safeguarded Newton iteration
    polishes it. No crossing inside the window is an error: the target is
    simply not imaged by this acquisition.
    """
    orbit = geom.orbit
    tgt = target.as_array()

    ts = np.linspace(orbit.t_min, orbit.t_max, _COARSE_SAMPLES)
    f = np.sum(orbit.velocity(ts) * (tgt - orbit.position(ts)), axis=1)
    idx = np.nonzero(np.sign(f[:-1]) * np.sign(f[1:]) <= 0.0)[0]
    if idx.size == 0:
        raise ConvergenceError(
            "no zero-Doppler crossing inside the orbit validity window")
    i = int(idx[0])
    lo, hi = float(ts[i]), float(ts[i + 1])
    f_lo = float(f[i])

    # Newton with bisection fallback; f is monotone near the crossing
    t = lo + (hi - lo) * 0.5
    for _ in range(60):
        p = orbit.position(t)
        v = orbit.velocity(t)
        a = orbit.acceleration(t)
        d = tgt - p
        ft = float(v @ d)
        dft = float(a @ d - v @ v)
        if ft * f_lo > 0.0:
            lo = t
        else:
            hi = t
        t_new = t - ft / dft if dft != 0.0 else 0.5 * (lo + hi)
        if not lo <= t_new <= hi:
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) < _AZ_TOL_S:
            t = t_new
            break
        t = t_new
    else:
        raise ConvergenceError("zero-Doppler iteration stagnated")

    rng = float(np.linalg.norm(tgt - orbit.position(t)))
    return RadarTiming(t, 2.0 * rng / SPEED_OF_LIGHT)


def _look_frame(sat: np.ndarray, vel: np.ndarray, look_side: str):
    up = sat / np.linalg.norm(sat)
    v_hat = vel / np.linalg.norm(vel)
    side = np.cross(v_hat, up)  # right of the velocity, roughly horizontal
    side /= np.linalg.norm(side)
    if look_side == "left":
        side = -side
    return up, side


def geocode(geom: AcquisitionGeometry, timing: RadarTiming, height_m: float) -> Ecef:
    """Intersect range sphere, Doppler plane, and constant-height surface.

    The height constraint is the exact geodetic height (gradient = ellipsoid
    normal), so geocoding a target's own timing at its own height returns the
    target itself, not a nearby point on an axis-scaled ellipsoid. Damped
    Newton from a nadir-offset initial guess; the look side picks between the
    two mirror intersections.
    """
    orbit = geom.orbit
    sat = orbit.position(timing.t_az)
    vel = orbit.velocity(timing.t_az)
    rng = 0.5 * SPEED_OF_LIGHT * timing.tau_rg

    # initial guess from the satellite-centered triangle with the local sphere
    sat_g = ecef_to_geodetic(Ecef.from_array(sat))
    ground = geodetic_to_ecef(Geodetic(sat_g.lat_deg, sat_g.lon_deg, height_m))
    r_s = float(np.linalg.norm(sat))
    r_t = float(np.linalg.norm(ground.as_array()))
    cos_look = (r_s * r_s + rng * rng - r_t * r_t) / (2.0 * r_s * rng)
    if not -1.0 <= cos_look <= 1.0:
        raise NoIntersectionError(
            f"range sphere (R = {rng:.1f} m) misses the height surface")
    look = math.acos(cos_look)
    up, side = _look_frame(sat, vel, geom.look_side)
    los = -up * math.cos(look) + side * math.sin(look)
    x = sat + rng * los / np.linalg.norm(los)

    speed = float(np.linalg.norm(vel))
    for _ in range(_GEOCODE_MAX_ITER):
        d = x - sat
        r = float(np.linalg.norm(d))
        g = ecef_to_geodetic(Ecef.from_array(x))
        normal = enu_rotation(g.lat_deg, g.lon_deg)[2]
        fvec = np.array([r - rng, float(vel @ d), g.height_m - height_m])
        # residuals in meters: range miss, off-plane distance, height miss
        miss = max(abs(fvec[0]), abs(fvec[1]) / speed, abs(fvec[2]))
        jac = np.vstack([d / r, vel, normal])
        try:
            step = np.linalg.solve(jac, -fvec)
        except np.linalg.LinAlgError:
            raise ConvergenceError("geocoding Jacobian is singular") from None
        norm = float(np.linalg.norm(step))
        if norm > _MAX_STEP_M:
            step *= _MAX_STEP_M / norm
        x = x + step
        if norm < _GEOCODE_TOL_M or miss < 1e-7:
            break
    else:
        raise ConvergenceError("geocoding Newton iteration did not converge")

    if float((x - sat) @ side) < 0.0:
        raise ConvergenceError("geocoding converged on the wrong look side")
    return Ecef.from_array(x)


def timing_to_pixel(geom: AcquisitionGeometry, timing: RadarTiming) -> PixelCoord:
    """Affine map from timings to fractional (line, sample)."""
    return PixelCoord(
        (timing.t_az - geom.t_az_first) * geom.prf,
        (timing.tau_rg - geom.tau_rg_first) * geom.rsf,
    )


def pixel_to_timing(geom: AcquisitionGeometry, pixel: PixelCoord) -> RadarTiming:
    """Affine map from fractional (line, sample) to timings."""
    return RadarTiming(
        geom.t_az_first + pixel.line / geom.prf,
        geom.tau_rg_first + pixel.sample / geom.rsf,
    )
