"""Candidate detection in a high-resolution optical image.

Lamp poles cast compact, repeatable shadows. One hand-picked shadow patch
is matched over the sharpened image by normalized cross-correlation, the
hits are condensed to object positions by flat-kernel mean shift, and the
radar-coded objects are aligned onto bright SAR points with a rigid 2D
ICP so each detection snaps to the scatterer it belongs to.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.signal import fftconvolve
from scipy.spatial import cKDTree

from .errors import ValidationError
from .geodesy import Ecef, Geodetic, MapGrid, geodetic_to_ecef, map_to_geodetic
from .geometry import AcquisitionGeometry, radar_code, timing_to_pixel

MAX_POLE_SPACING_M = 0.1  # ground sampling needed to resolve pole shadows
NCC_THRESHOLD = 0.6
CLUSTER_RADIUS_M = 1.5
CLUSTER_TOL_M = 1e-3
ICP_GATE_PX = 3.0
BRIGHT_PERCENTILE = 99.5


@dataclass(frozen=True)
class OpticalImage:
    """Single-band intensity raster pinned to map-grid coordinates.

    Pixel (row, col) centers sit at
    easting = origin_easting_m + col * spacing_m,
    northing = origin_northing_m - row * spacing_m (north-up).
    """

    intensity: np.ndarray
    origin_easting_m: float
    origin_northing_m: float
    spacing_m: float
    zone: str

    def __post_init__(self):
        arr = np.asarray(self.intensity, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValidationError(f"intensity must be 2-D, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("intensity must be finite")
        if not self.spacing_m > 0.0:
            raise ValidationError("spacing must be positive")
        if self.spacing_m > MAX_POLE_SPACING_M:
            warnings.warn(
                f"ground spacing {self.spacing_m} m is coarser than "
                f"{MAX_POLE_SPACING_M} m; small objects may be unresolvable",
                stacklevel=3)
        arr.setflags(write=False)
        object.__setattr__(self, "intensity", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensity.shape

    def pixel_to_map(self, row: float, col: float) -> tuple[float, float]:
        return (self.origin_easting_m + col * self.spacing_m,
                self.origin_northing_m - row * self.spacing_m)

    def map_to_pixel(self, easting: float, northing: float):
        return ((self.origin_northing_m - northing) / self.spacing_m,
                (easting - self.origin_easting_m) / self.spacing_m)


@dataclass(frozen=True)
class Template:
    """Intensity patch plus the anchor pixel it stands for.

    The anchor marks the object position inside the patch (the pole base,
    not the shadow centroid), so detections are geo-referenced at the
    object and not at the patch corner.
    """

    patch: np.ndarray
    anchor_row: float
    anchor_col: float

    def __post_init__(self):
        arr = np.asarray(self.patch, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 3 or arr.shape[1] < 3:
            raise ValidationError(
                f"template must be at least 3x3, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("template must be finite")
        if float(arr.max()) == float(arr.min()):
            raise ValidationError("template must not be constant")
        if not (0.0 <= self.anchor_row <= arr.shape[0] - 1 and
                0.0 <= self.anchor_col <= arr.shape[1] - 1):
            raise ValidationError("anchor must lie inside the patch")
        arr.setflags(write=False)
        object.__setattr__(self, "patch", arr)

    @classmethod
    def from_image(cls, image: OpticalImage, row: int, col: int,
                   height: int, width: int,
                   anchor: tuple[float, float] | None = None) -> "Template":
        patch = image.intensity[row:row + height, col:col + width]
        if patch.shape != (height, width):
            raise ValidationError("template rectangle leaves the image")
        if anchor is None:
            anchor = ((height - 1) / 2.0, (width - 1) / 2.0)
        return cls(patch.copy(), anchor[0], anchor[1])


@dataclass(frozen=True)
class DetectedObject:
    """One clustered detection in map coordinates."""

    position: MapGrid
    member_count: int
    mean_score: float

    def __post_init__(self):
        if self.member_count < 1:
            raise ValidationError("member_count must be at least 1")
        if not 0.0 < self.mean_score <= 1.0:
            raise ValidationError(
                f"mean score must lie in (0, 1], got {self.mean_score}")


def normalize_intensity(arr: np.ndarray, negative: bool = False) -> np.ndarray:
    """Scale to [0, 1]; optionally invert so dark shadows become bright."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        out = np.zeros_like(arr)
    else:
        out = (arr - lo) / (hi - lo)
    return 1.0 - out if negative else out


def high_boost(image: OpticalImage, a: float,
               blur_sigma_px: float = 2.0) -> OpticalImage:
    """Sharpen by adding `a` times the unsharp mask to the image."""
    if a < 0.0:
        raise ValidationError("sharpening factor must be non-negative")
    if blur_sigma_px <= 0.0:
        raise ValidationError("blur sigma must be positive")
    if a == 0.0:
        return image
    mask = image.intensity - gaussian_filter(image.intensity, blur_sigma_px)
    return OpticalImage(image.intensity + a * mask, image.origin_easting_m,
                        image.origin_northing_m, image.spacing_m, image.zone)


def _box_sums(arr: np.ndarray, n1: int, n2: int) -> np.ndarray:
    """Sum of every n1 x n2 window via an integral image."""
    ii = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1))
    ii[1:, 1:] = arr.cumsum(axis=0).cumsum(axis=1)
    return (ii[n1:, n2:] - ii[:-n1, n2:] - ii[n1:, :-n2] + ii[:-n1, :-n2])


def ncc_match(image: OpticalImage, template: Template) -> np.ndarray:
    """Normalized cross-correlation score at every template placement.

    Scores live in [-1, 1] and do not change under positive affine
    rescaling of the image intensities. Placements where the image window
    is constant have no defined correlation and score exactly 0; window
    constancy is decided by an exact range test, not by a variance
    epsilon, so the affine invariance extends to those windows too.
    """
    f = image.intensity
    t = template.patch
    n1, n2 = t.shape
    if n1 > f.shape[0] or n2 > f.shape[1]:
        raise ValidationError("template larger than image")

    t0 = t - t.mean()
    denom_t = math.sqrt(float((t0 * t0).sum()))
    num = fftconvolve(f, t0[::-1, ::-1], mode="valid")

    n = float(n1 * n2)
    s1 = _box_sums(f, n1, n2)
    s2 = _box_sums(f * f, n1, n2)
    ssd = np.clip(s2 - s1 * s1 / n, 0.0, None)

    # a window is constant exactly when every adjacent-pixel difference
    # inside it vanishes; counting differences with integral images keeps
    # the test exact and affine-safe
    row_steps = (f[1:, :] != f[:-1, :]).astype(np.float64)
    col_steps = (f[:, 1:] != f[:, :-1]).astype(np.float64)
    flat = ((_box_sums(row_steps, n1 - 1, n2) == 0.0) &
            (_box_sums(col_steps, n1, n2 - 1) == 0.0))

    with np.errstate(invalid="ignore", divide="ignore"):
        rho = num / (np.sqrt(ssd) * denom_t)
    rho[flat] = 0.0
    return np.clip(rho, -1.0, 1.0)


def threshold_and_cluster(scores: np.ndarray, image: OpticalImage,
                          template: Template,
                          threshold: float = NCC_THRESHOLD,
                          radius_m: float = CLUSTER_RADIUS_M,
                          tol_m: float = CLUSTER_TOL_M,
                          max_iterations: int = 500,
                          ) -> tuple[DetectedObject, ...]:
    """Condense above-threshold score pixels into object positions.

    Every hit pixel is geo-referenced at the template anchor and climbs
    to its local density mode with a flat kernel (mean of hits within
    `radius_m`, iterated until the step falls under `tol_m`). Modes
    closer than half the radius are the same object.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError("threshold must lie in (0, 1)")
    rows, cols = np.nonzero(scores > threshold)
    if rows.size == 0:
        return ()
    hit_scores = scores[rows, cols]
    east, north = image.pixel_to_map(rows + template.anchor_row,
                                     cols + template.anchor_col)
    pts = np.column_stack([east, north])

    tree = cKDTree(pts)
    modes = pts.copy()
    active = np.ones(len(pts), dtype=bool)
    for _ in range(max_iterations):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        neighborhoods = tree.query_ball_point(modes[idx], radius_m)
        new = np.array([pts[nb].mean(axis=0) for nb in neighborhoods])
        steps = np.linalg.norm(new - modes[idx], axis=1)
        modes[idx] = new
        active[idx] = steps >= tol_m

    order = np.lexsort((modes[:, 1], modes[:, 0]))
    merge_tol = 0.5 * radius_m
    objects = []
    used = np.zeros(len(pts), dtype=bool)
    mode_tree = cKDTree(modes)
    for i in order:
        if used[i]:
            continue
        members = mode_tree.query_ball_point(modes[i], merge_tol)
        members = [m for m in members if not used[m]]
        used[members] = True
        center = modes[members].mean(axis=0)
        objects.append(DetectedObject(
            position=MapGrid(float(center[0]), float(center[1]), image.zone),
            member_count=len(members),
            mean_score=float(hit_scores[members].mean()),
        ))
    objects.sort(key=lambda o: (o.position.easting_m, o.position.northing_m))
    return tuple(objects)


def radar_code_objects(objects, height_m: float,
                       geom: AcquisitionGeometry) -> np.ndarray:
    """Pixel positions of detected objects in one acquisition.

    Optical detections are 2D; the scene height (road level) supplies the
    third coordinate.
    """
    out = np.empty((len(objects), 2))
    for k, obj in enumerate(objects):
        geo = map_to_geodetic(obj.position, height_m)
        timing = radar_code(geom, geodetic_to_ecef(geo))
        px = timing_to_pixel(geom, timing)
        out[k] = (px.line, px.sample)
    return out


def bright_points(mean_amplitude: np.ndarray,
                  percentile: float = BRIGHT_PERCENTILE) -> np.ndarray:
    """Pixel coordinates of the brightest stable scatterers in a stack."""
    arr = np.asarray(mean_amplitude, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValidationError("mean amplitude must be a 2-D raster")
    cut = float(np.percentile(arr, percentile))
    rows, cols = np.nonzero(arr > cut)
    return np.column_stack([rows, cols]).astype(np.float64)


@dataclass(frozen=True)
class IcpResult:
    """Rigid 2D alignment of detections onto reference points."""

    angle_rad: float
    translation_px: np.ndarray  # (2,)
    aligned_px: np.ndarray  # (n, 2) transformed detections
    matches: np.ndarray  # (n,) reference index, -1 where nothing in gate
    mse_px2: float
    mse_history: tuple[float, ...]
    iterations: int
    diverged: bool

    def __post_init__(self):
        for name in ("translation_px", "aligned_px", "matches"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def matched_fraction(self) -> float:
        return float(np.count_nonzero(self.matches >= 0) / len(self.matches))


def _rigid_fit(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation + translation taking src onto dst."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    p = src - sc
    q = dst - dc
    angle = math.atan2(float(np.sum(p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0])),
                       float(np.sum(p * q)))
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return angle, rot, dc - rot @ sc


def icp_align(detected_px: np.ndarray, reference_px: np.ndarray,
              max_iterations: int = 50,
              gate_px: float = ICP_GATE_PX) -> IcpResult:
    """Rigid 2D ICP of detected points onto the bright-point set.

    Iterates nearest-neighbor correspondence and closed-form rigid fits
    until the mean squared distance stops improving. Three consecutive
    increases count as divergence and return the best state found. The
    final matches are gated: detections with no reference point within
    `gate_px` stay unmatched.
    """
    src = np.asarray(detected_px, dtype=np.float64)
    ref = np.asarray(reference_px, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 or src.shape[0] == 0:
        raise ValidationError("detected points must be (n, 2), n >= 1")
    if ref.ndim != 2 or ref.shape[1] != 2 or ref.shape[0] == 0:
        raise ValidationError("reference points must be (m, 2), m >= 1")

    tree = cKDTree(ref)
    angle, rot, shift = 0.0, np.eye(2), np.zeros(2)
    moved = src
    history: list[float] = []
    best = None
    rising = 0
    diverged = False
    for _ in range(max_iterations):
        dist, idx = tree.query(moved)
        mse = float(np.mean(dist * dist))
        state = (mse, angle, rot, shift, moved)
        if best is None or mse < best[0]:
            best = state
        if history:
            if mse > history[-1]:
                rising += 1
                if rising >= 3:
                    diverged = True
                    history.append(mse)
                    break
            else:
                rising = 0
            if history[-1] - mse < 1e-6 and mse <= history[-1]:
                history.append(mse)
                break
        history.append(mse)
        angle, rot, shift = _rigid_fit(src, ref[idx])
        moved = src @ rot.T + shift

    mse, angle, rot, shift, moved = best
    dist, idx = tree.query(moved)
    matches = np.where(dist <= gate_px, idx, -1)
    return IcpResult(
        angle_rad=angle,
        translation_px=shift,
        aligned_px=moved,
        matches=matches,
        mse_px2=mse,
        mse_history=tuple(history),
        iterations=len(history),
        diverged=diverged,
    )
