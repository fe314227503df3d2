"""Synthetic multi-aspect scenes with exactly known truth.

Builds near-circular orbit arcs that hit configured heading and incidence
at the scene center, synthesizes point-response chips, amplitude stacks,
PSI-like clouds, road networks, and optical images, and records every
injected quantity (timings, corrections, noise draws, correspondences) so
the rest of the package can be scored against ground truth.

Track presets follow two published multi-aspect TerraSAR-X style
configurations: a two-stack cross-heading city setup and a four-stack
two-per-heading setup, plus a deliberately small one for fast end-to-end
runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .errors import ValidationError
from .geodesy import (
    SPEED_OF_LIGHT,
    Ecef,
    Geodetic,
    OrbitModel,
    ecef_to_geodetic,
    enu_rotation,
    fit_orbit,
    geodetic_to_ecef,
)
from .geometry import (
    AcquisitionGeometry,
    RadarTiming,
    radar_code,
    timing_to_pixel,
)

GM_EARTH = 3.986004418e14  # m^3 / s^2

PRF_HZ = 7600.0
RSF_HZ = 300e6
N_LINES = 4096
N_SAMPLES = 4096
ORBIT_ALTITUDE_M = 514e3
ORBIT_WINDOW_S = 16.0
ORBIT_DEGREE = 5

# point response resolution, meters (range x azimuth)
RANGE_RESOLUTION_M = 0.6
AZIMUTH_RESOLUTION_M = 1.1


@dataclass(frozen=True)
class TrackSpec:
    """Nominal viewing geometry of one stack at the scene center."""

    stack_id: str
    heading: str  # "ascending" | "descending"
    heading_deg: float
    incidence_deg: float


# Two-stack cross-heading configuration (city block scale)
BERLIN_TRACKS = (
    TrackSpec("A1", "ascending", 350.3, 41.9),
    TrackSpec("D1", "descending", 190.6, 36.1),
)

# Four-stack configuration, two incidences per heading
OULU_TRACKS = (
    TrackSpec("A1", "ascending", 346.1, 30.9),
    TrackSpec("D1", "descending", 191.4, 41.1),
    TrackSpec("A2", "ascending", 350.0, 46.2),
    TrackSpec("D2", "descending", 187.5, 53.4),
)

MINIMAL_TRACKS = (
    TrackSpec("A1", "ascending", 350.3, 41.9),
    TrackSpec("D1", "descending", 190.6, 36.1),
)


def _rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    k = axis / np.linalg.norm(axis)
    kx = np.array([
        [0.0, -k[2], k[1]],
        [k[2], 0.0, -k[0]],
        [-k[1], k[0], 0.0],
    ])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def _circular_arc_orbit(origin: Geodetic, heading_deg: float, offset_m: float,
                        look_side: str, altitude_m: float,
                        window_s: float) -> OrbitModel:
    """Circular-speed orbit arc with the zero-Doppler crossing at t = 0.

    The base point sits cross-track of the origin; because bearings rotate
    over long ground distances the closest approach is not at the base
    point, so the sampled window is recentered on the exact crossing of the
    circular arc (v . T = 0 has a closed form there).
    """
    target = geodetic_to_ecef(origin).as_array()
    basis = enu_rotation(origin.lat_deg, origin.lon_deg)
    to_track_deg = heading_deg - 90.0 if look_side == "right" else heading_deg + 90.0
    b = math.radians(to_track_deg)
    ground = target + offset_m * (basis.T @ np.array([math.sin(b), math.cos(b), 0.0]))
    gg = ecef_to_geodetic(Ecef.from_array(ground))
    sat0 = geodetic_to_ecef(Geodetic(gg.lat_deg, gg.lon_deg, altitude_m)).as_array()

    h = math.radians(heading_deg)
    v_dir = enu_rotation(gg.lat_deg, gg.lon_deg).T @ np.array(
        [math.sin(h), math.cos(h), 0.0])
    r_hat = sat0 / np.linalg.norm(sat0)
    v_dir = v_dir - (v_dir @ r_hat) * r_hat  # keep the arc exactly circular
    v_dir /= np.linalg.norm(v_dir)
    speed = math.sqrt(GM_EARTH / np.linalg.norm(sat0))
    omega = speed / np.linalg.norm(sat0)
    axis = np.cross(r_hat, v_dir)

    # on the circle v . S = 0, so v . (T - S) = 0 reduces to v . T = 0
    t_star = math.atan2(float(np.cross(axis, sat0) @ target),
                        float(sat0 @ target)) / omega
    times = np.linspace(-window_s / 2.0, window_s / 2.0, 33)
    positions = np.array(
        [_rodrigues(axis, omega * (t_star + t)) @ sat0 for t in times])
    return fit_orbit(times, positions, degree=ORBIT_DEGREE,
                     validity=(-window_s / 2.0, window_s / 2.0))


def _incidence_at(orbit: OrbitModel, origin: Geodetic, track: TrackSpec) -> float:
    probe = AcquisitionGeometry(
        orbit, PRF_HZ, RSF_HZ, orbit.t_min, 1e-6,
        track.heading, 45.0, "right")
    target = geodetic_to_ecef(origin)
    timing = radar_code(probe, target)
    los = orbit.position(timing.t_az) - target.as_array()
    up = enu_rotation(origin.lat_deg, origin.lon_deg)[2]
    return math.degrees(math.acos(float(up @ los) / np.linalg.norm(los)))


def synthetic_geometry(origin: Geodetic, track: TrackSpec, *,
                       look_side: str = "right",
                       altitude_m: float = ORBIT_ALTITUDE_M,
                       window_s: float = ORBIT_WINDOW_S) -> AcquisitionGeometry:
    """Build an acquisition whose scene-center incidence matches the track spec.

    The cross-track offset of the ground track is solved numerically so the
    incidence measured through the actual zero-Doppler geometry (not a
    flat-earth formula) equals the configured one. The scene center lands at
    the image-center pixel.
    """

    def mismatch(offset_m: float) -> float:
        orbit = _circular_arc_orbit(origin, track.heading_deg, offset_m,
                                    look_side, altitude_m, window_s)
        return _incidence_at(orbit, origin, track) - track.incidence_deg

    offset = brentq(mismatch, 60e3, 1600e3, xtol=0.5)
    orbit = _circular_arc_orbit(origin, track.heading_deg, offset,
                                look_side, altitude_m, window_s)
    center = radar_code(
        AcquisitionGeometry(orbit, PRF_HZ, RSF_HZ, orbit.t_min, 1e-6,
                            track.heading, track.incidence_deg, look_side),
        geodetic_to_ecef(origin))
    return AcquisitionGeometry(
        orbit=orbit,
        prf=PRF_HZ,
        rsf=RSF_HZ,
        t_az_first=center.t_az - (N_LINES / 2.0) / PRF_HZ,
        tau_rg_first=center.tau_rg - (N_SAMPLES / 2.0) / RSF_HZ,
        heading=track.heading,
        incidence_deg=track.incidence_deg,
        look_side=look_side,
    )


def azimuth_rate_m_per_s(geom: AcquisitionGeometry, target: Ecef,
                         t_az: float) -> float:
    """Meters of along-track misclosure per second of azimuth timing shift.

    The naive |v| underestimates the rate by the orbit curvature share of
    a few percent, which matters when timing noise is specified in meters.
    """
    orbit = geom.orbit
    sat = orbit.position(t_az)
    vel = orbit.velocity(t_az)
    acc = orbit.acceleration(t_az)
    speed2 = float(vel @ vel)
    return (speed2 - float(acc @ (target.as_array() - sat))) / math.sqrt(speed2)


def timing_with_misfit(geom: AcquisitionGeometry, target: Ecef,
                       az_m: float = 0.0, rg_m: float = 0.0) -> RadarTiming:
    """Timing whose post-fit misclosure at the true target is (az_m, rg_m).

    az_m is the along-track projection of the zero-Doppler misclosure and
    rg_m the slant-range excess, matching the positioning residual
    convention, so injected biases land on the quality gates unscaled.
    """
    base = radar_code(geom, target)
    rate = azimuth_rate_m_per_s(geom, target, base.t_az)
    t_az = base.t_az - az_m / rate
    # range taken at the shifted time, so the azimuth shift cannot bleed
    # into the range misclosure through the slant-range curvature
    rho = float(np.linalg.norm(target.as_array() - geom.orbit.position(t_az)))
    return RadarTiming(t_az, 2.0 * (rho - rg_m) / SPEED_OF_LIGHT)


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

CHIP_SIZE = 32
# first null of the chip point response at 32/27 px, near the nominal
# 0.6 m x 1.1 m resolutions on this pixel grid
CHIP_KERNEL_BINS = 27
CHI2_3DOF_95 = 7.814727903251179


@dataclass(frozen=True)
class SimConfig:
    """Everything that determines a scene, so a seed pins it completely."""

    seed: int
    tracks: tuple = MINIMAL_TRACKS
    epochs: int = 12
    origin: Geodetic = Geodetic(52.5, 13.4, 40.0)
    crop_px: int = 512
    sigma_az_m: float = 0.0
    sigma_rg_m: float = 0.0
    scr_db: float | None = None  # None disables clutter entirely
    inject_errors: bool = True
    corrupt_epochs: tuple = ()
    pole_spacing_m: float = 30.0
    road_half_length_m: float = 90.0
    facades: bool = True
    with_clouds: bool = True
    with_optical: bool = True
    cloud_sigma_m: float = 0.10
    cloud_outlier_fraction: float = 0.05
    cloud_shift_m: tuple = (3.2, -2.1, 0.8)
    optical_spacing_m: float = 0.1

    def __post_init__(self):
        if self.epochs < 2:
            raise ValidationError("need at least 2 epochs per geometry")
        if not self.tracks:
            raise ValidationError("need at least one track")
        ids = [t.stack_id for t in self.tracks]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate stack ids")
        for t in self.tracks:
            if not 20.0 < t.incidence_deg < 60.0:
                raise ValidationError(
                    f"incidence {t.incidence_deg} outside (20, 60)")
        if self.crop_px < 4 * CHIP_SIZE:
            raise ValidationError("crop too small for chip windows")
        if any(not 0 <= e < self.epochs for e in self.corrupt_epochs):
            raise ValidationError("corrupt epoch index out of range")
        if not (self.pole_spacing_m > 0 and self.road_half_length_m > 0):
            raise ValidationError("road layout lengths must be positive")


def preset(name: str, seed: int = 7, **overrides) -> SimConfig:
    """Named scene configurations used by the CLI and the test suite."""
    if name == "minimal":
        base = dict(tracks=MINIMAL_TRACKS, epochs=8, facades=False,
                    with_clouds=False, with_optical=False)
    elif name == "berlin":
        base = dict(tracks=BERLIN_TRACKS, epochs=12)
    elif name == "oulu":
        base = dict(tracks=OULU_TRACKS, epochs=12)
    else:
        raise ValidationError(f"unknown preset {name!r}")
    base.update(overrides)
    return SimConfig(seed=seed, **base)


@dataclass(frozen=True)
class TruthTarget:
    """One physical scatterer with its exact coordinates."""

    target_id: str
    kind: str  # pole | facade
    position: Ecef
    east: float
    north: float
    height: float


@dataclass(frozen=True)
class TruthObservation:
    """What one acquisition truly saw of one target."""

    target_id: str
    stack_id: str
    epoch: int
    acquisition_id: str
    t_az: float
    tau_rg: float
    line: float  # observed absolute pixel, errors and noise included
    sample: float
    az_noise_m: float
    rg_noise_m: float


@dataclass(frozen=True)
class SceneTruth:
    """Complete generation record; the oracle for every downstream test."""

    config: SimConfig
    zone: str
    center_east: float
    center_north: float
    crop_origin: tuple
    targets: tuple
    observations: tuple
    cloud_links: dict  # stack -> ((point_id, target_id), ...)
    files: dict  # role -> relative path or list of relative paths

    @property
    def origin(self) -> Geodetic:
        return self.config.origin

    def targets_of_kind(self, kind: str) -> tuple:
        return tuple(t for t in self.targets if t.kind == kind)

    def observation(self, target_id: str, stack_id: str,
                    epoch: int) -> TruthObservation:
        for ob in self.observations:
            if (ob.target_id == target_id and ob.stack_id == stack_id
                    and ob.epoch == epoch):
                return ob
        raise KeyError((target_id, stack_id, epoch))


def default_error_providers():
    """Timing error terms injected when the config enables them.

    A path-delay term per geometry, constant internal delays, and a slow
    azimuth drift over epochs: each is removable by the correction stage
    from the same configuration file.
    """
    from .timing import ConstantTerm, LinearDriftTerm, ZenithDelayTerm
    return (
        ZenithDelayTerm(term="range.delta_t", zenith_delay_m=2.4),
        ConstantTerm(term="range.delta_sd",
                     seconds=2.0 * 0.35 / SPEED_OF_LIGHT),
        ConstantTerm(term="azimuth.delta_sd", seconds=0.22 / 7600.0),
        LinearDriftTerm(term="azimuth.delta_o", offset_s=0.15 / 7600.0,
                        rate_s_per_epoch=0.004 / 7600.0, epoch_ref=0.0),
    )


def point_response(n: int, row: float, col: float,
                   bins: int = CHIP_KERNEL_BINS,
                   amplitude: float = 1.0) -> np.ndarray:
    """Separable periodic band-limited impulse with peak at (row, col).

    Exactly band-limited on the n-grid, so spectral oversampling
    reconstructs the continuous peak without truncation artifacts.
    """
    idx = np.arange(n, dtype=float)

    def kernel(x):
        den = np.sin(np.pi * x / n)
        with np.errstate(invalid="ignore", divide="ignore"):
            val = np.sin(np.pi * bins * x / n) / (bins * den)
        return np.where(np.abs(den) < 1e-12, 1.0, val)

    return amplitude * np.outer(kernel(idx - row),
                                kernel(idx - col)).astype(np.complex128)


def _truncated_response(shape, row, col, amplitude, half=24):
    """Plain sinc response pasted into a large raster, peak at (row, col).

    Used only for detector-grade amplitude rasters where sub-millipixel
    peak fidelity is irrelevant.
    """
    out = np.zeros(shape, dtype=np.complex128)
    r0 = max(0, int(round(row)) - half)
    r1 = min(shape[0], int(round(row)) + half + 1)
    c0 = max(0, int(round(col)) - half)
    c1 = min(shape[1], int(round(col)) + half + 1)
    if r0 >= r1 or c0 >= c1:
        return out
    rr = np.arange(r0, r1, dtype=float) - row
    cc = np.arange(c0, c1, dtype=float) - col
    width = 32.0 / CHIP_KERNEL_BINS
    out[r0:r1, c0:c1] = amplitude * np.outer(np.sinc(rr / width),
                                             np.sinc(cc / width))
    return out


def _pole_offsets(cfg: SimConfig) -> np.ndarray:
    half = cfg.road_half_length_m
    return np.arange(-half + cfg.pole_spacing_m / 2.0, half,
                     cfg.pole_spacing_m)


def _scene_targets(cfg: SimConfig, rng: np.random.Generator, zone: str,
                   center_east: float, center_north: float):
    """Pole and facade scatterers in map coordinates, then ECEF."""
    from .geodesy import MapGrid, map_to_geodetic

    def make(target_id, kind, de, dn, height):
        east = center_east + de
        north = center_north + dn
        geo = map_to_geodetic(MapGrid(east, north, zone), height)
        return TruthTarget(target_id, kind, geodetic_to_ecef(geo),
                           east, north, height)

    h0 = cfg.origin.height_m
    targets = [make(f"pole{k:03d}", "pole", de, 0.0, h0)
               for k, de in enumerate(_pole_offsets(cfg))]
    if cfg.facades:
        k = 0
        for (be, bn, ue, un, cols, du, floors, dz, hb) in (
                (25.0, 40.0, 1.0, 0.0, 8, 5.0, 5, 3.1, h0 + 2.0),
                (-60.0, -30.0, 0.0, 1.0, 7, 5.5, 5, 2.9, h0 + 1.5)):
            for c in range(cols):
                for f in range(floors):
                    targets.append(make(f"fac{k:03d}", "facade",
                                        be + c * du * ue, bn + c * du * un,
                                        hb + f * dz))
                    k += 1
        ground = rng.uniform(-80.0, 80.0, (40, 2))
        for g, (de, dn) in enumerate(ground):
            targets.append(make(f"gnd{g:03d}", "facade", float(de),
                                float(dn), h0))
    return tuple(targets)


def _acquisition_id(stack_id: str, epoch: int) -> str:
    return f"{stack_id}_{epoch:02d}"


def build_scene(cfg: SimConfig, out_dir) -> SceneTruth:
    """Generate every scene artifact under out_dir and return the truth.

    All randomness flows from one generator in a fixed order, so a config
    regenerates its scene bit for bit.
    """
    import configparser
    from pathlib import Path

    from .geodesy import geodetic_to_map
    from .io_formats import (AcquisitionRecord, PointTable, RasterTile,
                             write_metadata, write_point_table,
                             write_raster_tile)
    from .timing import (apply_timing_errors, assemble_corrections,
                         write_correction_config)

    out = Path(out_dir)
    for sub in ("meta", "amp", "chips", "clouds"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    center = geodetic_to_map(cfg.origin)
    zone = center.zone
    rng = np.random.default_rng(cfg.seed)
    targets = _scene_targets(cfg, rng, zone, center.easting_m,
                             center.northing_m)
    poles = [t for t in targets if t.kind == "pole"]

    geoms = {t.stack_id: synthetic_geometry(cfg.origin, t)
             for t in cfg.tracks}
    providers = default_error_providers() if cfg.inject_errors else ()
    files: dict = {"meta": [], "amp": [], "chips": [], "clouds": []}

    crop = cfg.crop_px
    line0 = N_LINES // 2 - crop // 2
    samp0 = N_SAMPLES // 2 - crop // 2
    half_chip = CHIP_SIZE // 2
    amplitude = 1.0 if cfg.scr_db is None else 10.0 ** (cfg.scr_db / 20.0)

    observations = []
    for track in cfg.tracks:
        sid = track.stack_id
        geom = geoms[sid]
        for epoch in range(cfg.epochs):
            acq = _acquisition_id(sid, epoch)
            rec = AcquisitionRecord(acq, geom, calibration=1.0)
            meta_path = out / "meta" / f"{acq}.meta"
            write_metadata(meta_path, rec)
            files["meta"].append(str(meta_path.relative_to(out)))

            amp_factor = 0.1 if epoch in cfg.corrupt_epochs else 1.0
            pixels = []
            for target in poles:
                az_n, rg_n = rng.normal(0.0, 1.0, 2)
                az_m = az_n * cfg.sigma_az_m
                rg_m = rg_n * cfg.sigma_rg_m
                true = radar_code(geom, target.position)
                observed = apply_timing_errors(
                    timing_with_misfit(geom, target.position, az_m, rg_m),
                    assemble_corrections(geom, target.position,
                                         float(epoch), providers))
                px = timing_to_pixel(geom, observed)
                line, sample = px.line, px.sample
                pixels.append((line, sample))
                observations.append(TruthObservation(
                    target.target_id, sid, epoch, acq, true.t_az,
                    true.tau_rg, line, sample, az_m, rg_m))

            if cfg.scr_db is None:
                field_c = np.zeros((crop, crop), dtype=np.complex128)
            else:
                field_c = (rng.standard_normal((crop, crop))
                           + 1j * rng.standard_normal((crop, crop))) \
                    / math.sqrt(2.0)
            for line, sample in pixels:
                field_c += _truncated_response(
                    (crop, crop), line - line0, sample - samp0,
                    amplitude * amp_factor)
            amp = np.abs(field_c)

            for target, (line, sample) in zip(poles, pixels):
                c_line0 = int(round(line)) - half_chip
                c_samp0 = int(round(sample)) - half_chip
                chip = point_response(CHIP_SIZE, line - c_line0,
                                      sample - c_samp0,
                                      amplitude=amplitude * amp_factor)
                if cfg.scr_db is not None:
                    chip = chip + (
                        rng.standard_normal((CHIP_SIZE, CHIP_SIZE))
                        + 1j * rng.standard_normal((CHIP_SIZE, CHIP_SIZE))) \
                        / math.sqrt(2.0)
                name = f"{acq}_{c_line0:05d}_{c_samp0:05d}.rt"
                write_raster_tile(out / "chips" / name,
                                  RasterTile(chip, c_line0, c_samp0))
                files["chips"].append(f"chips/{name}")
                # keep the detector raster consistent with the chip
                lr = c_line0 - line0
                sr = c_samp0 - samp0
                if (0 <= lr and lr + CHIP_SIZE <= crop
                        and 0 <= sr and sr + CHIP_SIZE <= crop):
                    amp[lr:lr + CHIP_SIZE, sr:sr + CHIP_SIZE] = np.abs(chip)

            amp_path = out / "amp" / f"{acq}.rt"
            write_raster_tile(amp_path,
                              RasterTile(amp.astype(np.float32),
                                         line0, samp0))
            files["amp"].append(f"amp/{acq}.rt")

    # PSI clouds: every real scatterer plus spurious points, one systematic
    # shift per stack for the registration stage to find
    cloud_links: dict = {}
    if cfg.with_clouds:
        per_axis = cfg.cloud_sigma_m / math.sqrt(3.0)
        shift = np.asarray(cfg.cloud_shift_m, dtype=float)
        for i, track in enumerate(cfg.tracks):
            sid = track.stack_id
            rows = []
            links = []
            for t in targets:
                noise = rng.normal(0.0, per_axis, 3)
                e = t.east + i * shift[0] + noise[0]
                n = t.north + i * shift[1] + noise[1]
                h = t.height + i * shift[2] + noise[2]
                if t.kind == "facade" and not t.target_id.startswith("gnd"):
                    prec = rng.uniform(0.3, 0.8)
                else:
                    prec = rng.uniform(1.2, 2.5)
                coh = rng.uniform(0.7, 0.95)
                adi = rng.uniform(0.05, 0.2)
                rows.append((t.target_id, e, n, h, coh, prec, adi))
                links.append((t.target_id, t.target_id))
            n_out = int(round(cfg.cloud_outlier_fraction * len(targets)))
            for k in range(n_out):
                e = center.easting_m + rng.uniform(-120.0, 120.0)
                n = center.northing_m + rng.uniform(-120.0, 120.0)
                h = cfg.origin.height_m + rng.uniform(0.0, 40.0)
                rows.append((f"{sid}_sp{k:03d}", e, n, h,
                             rng.uniform(0.3, 0.6), rng.uniform(1.5, 3.5),
                             rng.uniform(0.4, 0.9)))
            table = PointTable(
                (("point_id", "str"), ("east", "float"), ("north", "float"),
                 ("height", "float"), ("coherence", "float"),
                 ("height_precision", "float"), ("adi", "float")),
                tuple(rows))
            path = out / "clouds" / f"{sid}.pt"
            write_point_table(path, table)
            files["clouds"].append(f"clouds/{sid}.pt")
            cloud_links[sid] = tuple(links)

    # road vector with poles on it
    road_rows = []
    h0 = cfg.origin.height_m
    for v, de in enumerate((-cfg.road_half_length_m,
                            cfg.road_half_length_m)):
        road_rows.append((0, v, center.easting_m + de, center.northing_m,
                          h0))
    write_point_table(out / "roads.pt", PointTable(
        (("polyline", "int"), ("vertex", "int"), ("east", "float"),
         ("north", "float"), ("height", "float")), tuple(road_rows)))
    files["roads"] = "roads.pt"

    # optical image with one dark shadow blob south of every pole base
    optical_meta = {}
    if cfg.with_optical:
        sp = cfg.optical_spacing_m
        half_extent = cfg.road_half_length_m + 25.0
        npx = int(round(2.0 * half_extent / sp))
        origin_e = center.easting_m - half_extent
        origin_n = center.northing_m + half_extent
        img = 0.55 + rng.normal(0.0, 0.02, (npx, npx))

        def base_px(t):
            return (int(round((origin_n - t.north) / sp)),
                    int(round((t.east - origin_e) / sp)))

        for t in poles:
            r, c = base_px(t)
            img[r + 3:r + 20, c - 2:c + 3] = 0.18
            img[r - 1:r + 2, c - 1:c + 2] = 0.95
        img = np.clip(img, 0.0, 1.0)
        write_raster_tile(out / "optical.rt",
                          RasterTile(img.astype(np.float32), 0, 0))
        files["optical"] = "optical.rt"
        write_point_table(out / "optical_geo.pt", PointTable(
            (("origin_easting", "float"), ("origin_northing", "float"),
             ("spacing_m", "float"), ("zone", "str")),
            ((origin_e, origin_n, sp, zone),)))
        files["optical_geo"] = "optical_geo.pt"
        r0, c0 = base_px(poles[0])
        optical_meta = {
            "spacing_m": repr(sp),
            "template_line0": str(r0 - 4),
            "template_sample0": str(c0 - 6),
            "template_height": "26",
            "template_width": "13",
            "template_anchor_line": "4.0",
            "template_anchor_sample": "6.0",
            "height_m": repr(h0),
        }

    write_correction_config(out / "corrections.ini", providers)
    files["corrections"] = "corrections.ini"

    write_point_table(out / "truth_targets.pt", PointTable(
        (("target_id", "str"), ("kind", "str"), ("east", "float"),
         ("north", "float"), ("height", "float"), ("x", "float"),
         ("y", "float"), ("z", "float")),
        tuple((t.target_id, t.kind, float(t.east), float(t.north),
               float(t.height), t.position.x, t.position.y, t.position.z)
              for t in targets)))
    files["truth_targets"] = "truth_targets.pt"
    write_point_table(out / "truth_observations.pt", PointTable(
        (("target_id", "str"), ("stack", "str"), ("epoch", "int"),
         ("acquisition_id", "str"), ("t_az", "float"), ("tau_rg", "float"),
         ("line", "float"), ("sample", "float"), ("az_noise_m", "float"),
         ("rg_noise_m", "float")),
        tuple((o.target_id, o.stack_id, o.epoch, o.acquisition_id, o.t_az,
               o.tau_rg, o.line, o.sample, o.az_noise_m, o.rg_noise_m)
              for o in observations)))
    files["truth_observations"] = "truth_observations.pt"

    manifest = configparser.ConfigParser()
    manifest["format"] = {"version": "1"}
    manifest["scene"] = {
        "zone": zone,
        "origin_lat": repr(cfg.origin.lat_deg),
        "origin_lon": repr(cfg.origin.lon_deg),
        "origin_height": repr(cfg.origin.height_m),
        "center_east": repr(center.easting_m),
        "center_north": repr(center.northing_m),
        "road_height": repr(h0),
        "crop_line0": str(line0),
        "crop_sample0": str(samp0),
        "crop_px": str(crop),
        "chip_px": str(CHIP_SIZE),
        "epochs": str(cfg.epochs),
        "stacks": ",".join(t.stack_id for t in cfg.tracks),
    }
    manifest["files"] = {
        role: val if isinstance(val, str) else ",".join(val)
        for role, val in files.items() if val
    }
    # search geometry matched to the compact scene: pole spacing well
    # above twice the disc radius on the ground
    manifest["road"] = {"radius_px": "25", "adi_max": "0.25",
                        "densify_m": "10.0"}
    if optical_meta:
        manifest["optical"] = optical_meta
    with open(out / "scene_manifest.ini", "w", encoding="utf-8") as fh:
        manifest.write(fh)
    files["manifest"] = "scene_manifest.ini"

    return SceneTruth(
        config=cfg, zone=zone, center_east=center.easting_m,
        center_north=center.northing_m, crop_origin=(line0, samp0),
        targets=targets, observations=tuple(observations),
        cloud_links=cloud_links, files=files)


@dataclass(frozen=True)
class TruthCatalog:
    """Just enough truth to score against: targets plus the scene origin.

    Lets consumers rebuild a scoring reference from the written truth
    table without the full generation record.
    """

    targets: tuple
    origin: Geodetic

    @classmethod
    def from_table(cls, table, origin: Geodetic) -> "TruthCatalog":
        targets = tuple(
            TruthTarget(row["target_id"], row["kind"],
                        Ecef(row["x"], row["y"], row["z"]),
                        row["east"], row["north"], row["height"])
            for row in table.to_dicts())
        return cls(targets, origin)


@dataclass(frozen=True)
class ScoreReport:
    """How a set of solved positions compares against scene truth."""

    n_truth: int
    n_solved: int
    matches: tuple  # (target_id, solved_index, (de, dn, du), distance_m)
    precision: float
    recall: float
    bias_enu: tuple | None
    rmse_enu: tuple | None
    rmse_3d_m: float | None
    worst_m: float | None
    chi2_pass_rate: float | None


def score_against_truth(positions, truth, kinds=("pole",),
                        match_radius_m: float = 1.0, covariances=None):
    """Match solved ECEF positions to truth targets and report errors.

    Matching is greedy nearest neighbour with unique assignment, ordered
    by distance so the result does not depend on input ordering. Error
    statistics are east/north/up at the scene origin. When per-point
    covariances are given, the pass rate counts squared Mahalanobis
    distances below the 95 percent chi-square bound for three degrees
    of freedom.
    """
    from .errors import ValidationError
    from .geodesy import Ecef, enu_basis, geodetic_to_ecef

    wanted = [t for t in truth.targets if t.kind in kinds]
    if not wanted:
        raise ValidationError(f"no truth targets of kind {kinds}")
    if match_radius_m <= 0.0:
        raise ValidationError("match_radius_m must be positive")

    pts = [p.as_array() if isinstance(p, Ecef) else
           np.asarray(p, dtype=float) for p in positions]
    solved = (np.asarray(pts, dtype=float).reshape(-1, 3) if pts
              else np.zeros((0, 3)))
    if covariances is not None:
        covariances = np.asarray(covariances, dtype=float)
        if covariances.shape != (len(solved), 3, 3):
            raise ValidationError("covariances must be (n, 3, 3)")

    ref = np.asarray([t.position.as_array() for t in wanted])
    if len(solved):
        d = np.linalg.norm(ref[:, None, :] - solved[None, :, :], axis=2)
        order = sorted(((d[i, j], i, j) for i in range(len(wanted))
                        for j in range(len(solved))
                        if d[i, j] <= match_radius_m))
    else:
        order = []

    rot = enu_basis(geodetic_to_ecef(truth.origin))
    used_t: set = set()
    used_s: set = set()
    matches = []
    errors = []
    chi2_ok = 0
    for dist, i, j in order:
        if i in used_t or j in used_s:
            continue
        used_t.add(i)
        used_s.add(j)
        err = solved[j] - ref[i]
        enu = rot @ err
        matches.append((wanted[i].target_id, j,
                        (float(enu[0]), float(enu[1]), float(enu[2])),
                        float(dist)))
        errors.append(enu)
        if covariances is not None:
            q = float(err @ np.linalg.solve(covariances[j], err))
            chi2_ok += q <= CHI2_3DOF_95

    if matches:
        e = np.asarray(errors)
        bias = tuple(float(v) for v in e.mean(axis=0))
        rmse = tuple(float(v) for v in np.sqrt((e * e).mean(axis=0)))
        rmse_3d = float(np.sqrt((e * e).sum(axis=1).mean()))
        worst = float(np.linalg.norm(e, axis=1).max())
    else:
        bias = rmse = rmse_3d = worst = None
    return ScoreReport(
        n_truth=len(wanted), n_solved=len(solved),
        matches=tuple(sorted(matches)),
        precision=len(matches) / len(solved) if len(solved) else 1.0,
        recall=len(matches) / len(wanted),
        bias_enu=bias, rmse_enu=rmse, rmse_3d_m=rmse_3d, worst_m=worst,
        chi2_pass_rate=(chi2_ok / len(matches) if matches
                        and covariances is not None else None))
