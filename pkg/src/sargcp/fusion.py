"""Identical-scatterer detection from two same-heading PSI point clouds.

Two geocoded clouds of the same scene see the same strong scatterers with
an unknown relative offset. The chain here: coarse 3D registration by
cross-correlating plane-projected occupancy rasters, a discrete local
search that refines the shift, mutual-nearest-neighbor pairing, grid
thinning to one pair per cell, and radar-coding of the surviving pairs
into per-acquisition pixel locations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve
from scipy.spatial import cKDTree

from .candidates import FLAG_PARTIAL, PsCandidate
from .errors import GeometryError, RegistrationError, ValidationError
from .geodesy import MapGrid, geodetic_to_ecef, map_to_geodetic
from .geometry import timing_to_pixel, radar_code

DEFAULT_CELL_M = 2.0
DEFAULT_PAIR_RADIUS_M = 5.0
DEFAULT_THIN_CELL_M = 10.0
# fraction of points (best height precision first) used for registration
PRECISION_QUANTILE = 0.25
MIN_PEAK_SIGNIFICANCE = 5.0


@dataclass(frozen=True)
class PsiPointCloud:
    """One stack's persistent scatterers in map-grid coordinates."""

    stack_id: str
    zone: str
    ids: tuple[str, ...]
    xyz: np.ndarray  # (n, 3) easting, northing, height in meters
    coherence: np.ndarray
    height_precision: np.ndarray  # 1-sigma of the height estimate, meters
    adi: np.ndarray

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3 or xyz.shape[0] == 0:
            raise ValidationError(f"xyz must be (n, 3), got {xyz.shape}")
        n = xyz.shape[0]
        ids = tuple(self.ids)
        if len(ids) != n or len(set(ids)) != n:
            raise ValidationError("ids must be unique and match point count")
        cols = {}
        for name in ("coherence", "height_precision", "adi"):
            col = np.asarray(getattr(self, name), dtype=np.float64)
            if col.shape != (n,):
                raise ValidationError(f"{name} must have shape ({n},)")
            if not np.all(np.isfinite(col)):
                raise ValidationError(f"{name} must be finite")
            cols[name] = col
        if np.any((cols["coherence"] < 0.0) | (cols["coherence"] > 1.0)):
            raise ValidationError("coherence must lie in [0, 1]")
        if np.any(cols["height_precision"] <= 0.0):
            raise ValidationError("height_precision must be positive")
        if np.any(cols["adi"] < 0.0):
            raise ValidationError("adi must be non-negative")
        if not np.all(np.isfinite(xyz)):
            raise ValidationError("xyz must be finite")
        for arr in (xyz, *cols.values()):
            arr.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "xyz", xyz)
        for name, col in cols.items():
            object.__setattr__(self, name, col)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class CoarseShift:
    """3D shift that moves cloud B onto cloud A, with diagnostics.

    Each axis is seen by two of the three projection planes; their
    disagreement is a direct registration quality readout.
    """

    shift_m: np.ndarray  # (3,)
    plane_disagreement_m: np.ndarray  # (3,) per axis
    significance: float  # weakest plane peak, in sigmas above background

    def __post_init__(self):
        s = np.asarray(self.shift_m, dtype=np.float64)
        d = np.asarray(self.plane_disagreement_m, dtype=np.float64)
        s.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "shift_m", s)
        object.__setattr__(self, "plane_disagreement_m", d)


@dataclass(frozen=True)
class PsPair:
    """One matched scatterer: ids in both clouds plus match quality."""

    id_a: str
    id_b: str
    position: np.ndarray  # (3,) map-grid midpoint after registration
    separation_m: float
    max_adi: float

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64)
        if p.shape != (3,):
            raise ValidationError("pair position must be a 3-vector")
        p.setflags(write=False)
        object.__setattr__(self, "position", p)
        if self.separation_m < 0.0:
            raise ValidationError("separation must be non-negative")

    @property
    def quality(self) -> tuple[float, float]:
        """Sort key: tighter match first, then the steadier scatterer."""
        return (self.separation_m, self.max_adi)


def _registration_subset(cloud: PsiPointCloud,
                         quantile: float) -> np.ndarray:
    """Points in the best height-precision quantile (at least 8 points)."""
    cut = float(np.quantile(cloud.height_precision, quantile))
    mask = cloud.height_precision <= cut
    if int(mask.sum()) < 8:
        mask = np.ones(len(cloud), dtype=bool)
    return cloud.xyz[mask]


def _plane_shift(pa: np.ndarray, pb: np.ndarray, cell: float):
    """2D shift (meters) aligning projection B to A, with significance.

    Both occupancy rasters share one grid so the shift carries no
    sub-cell binning bias; the correlation peak is refined per axis by a
    parabolic fit, which keeps self-correlation at exactly zero.
    """
    lo = np.minimum(pa.min(axis=0), pb.min(axis=0))
    hi = np.maximum(pa.max(axis=0), pb.max(axis=0))
    nbins = np.maximum(np.ceil((hi - lo) / cell).astype(int) + 1, 2)
    edges = [lo[k] + cell * np.arange(nbins[k] + 1) for k in range(2)]
    ra, _, _ = np.histogram2d(pa[:, 0], pa[:, 1], bins=edges)
    rb, _, _ = np.histogram2d(pb[:, 0], pb[:, 1], bins=edges)
    # counts correlate to exact integers; rounding strips the FFT noise so
    # self-correlation is perfectly symmetric and refines to exactly zero
    corr = np.rint(fftconvolve(ra, rb[::-1, ::-1], mode="full"))
    flat = corr.ravel()
    spread = float(flat.std())
    if spread <= 0.0:
        raise RegistrationError("correlation surface is flat")
    peak_idx = np.unravel_index(int(np.argmax(flat)), corr.shape)
    significance = (float(corr[peak_idx]) - float(flat.mean())) / spread

    shift_cells = np.array(peak_idx, dtype=np.float64) - (nbins - 1)
    for axis in range(2):
        i, j = peak_idx
        if axis == 0 and 0 < i < corr.shape[0] - 1:
            c0, c1, c2 = corr[i - 1, j], corr[i, j], corr[i + 1, j]
        elif axis == 1 and 0 < j < corr.shape[1] - 1:
            c0, c1, c2 = corr[i, j - 1], corr[i, j], corr[i, j + 1]
        else:
            continue
        denom = c0 - 2.0 * c1 + c2
        if denom < 0.0:
            shift_cells[axis] += 0.5 * (c0 - c2) / denom
    return shift_cells * cell, significance


def coarse_register(a: PsiPointCloud, b: PsiPointCloud,
                    cell: float = DEFAULT_CELL_M,
                    precision_quantile: float = PRECISION_QUANTILE,
                    min_significance: float = MIN_PEAK_SIGNIFICANCE,
                    ) -> CoarseShift:
    """Estimate the 3D offset of cloud B against cloud A.

    Projects the most precise points of both clouds onto the xy, xz and
    yz planes, cross-correlates occupancy rasters per plane, and fuses
    the plane shifts (every axis is measured twice). A weak correlation
    peak in any plane aborts the registration.
    """
    if a.zone != b.zone:
        raise ValidationError(f"clouds in different zones {a.zone}/{b.zone}")
    if cell <= 0.0:
        raise ValidationError("cell must be positive")
    pa = _registration_subset(a, precision_quantile)
    pb = _registration_subset(b, precision_quantile)

    planes = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}
    estimates: dict[str, np.ndarray] = {}
    weakest = math.inf
    for name, (i, j) in planes.items():
        shift2, signif = _plane_shift(pa[:, (i, j)], pb[:, (i, j)], cell)
        if signif < min_significance:
            raise RegistrationError(
                f"{name} correlation peak at {signif:.1f} sigma, "
                f"need {min_significance}")
        estimates[name] = shift2
        weakest = min(weakest, signif)

    per_axis = (
        (estimates["xy"][0], estimates["xz"][0]),
        (estimates["xy"][1], estimates["yz"][0]),
        (estimates["xz"][1], estimates["yz"][1]),
    )
    shift = np.array([0.5 * (u + v) for u, v in per_axis])
    disagreement = np.array([abs(u - v) for u, v in per_axis])
    return CoarseShift(shift, disagreement, weakest)


def _mutual_matches(tree_a: cKDTree, tree_b: cKDTree, a_xyz, b_xyz,
                    shift: np.ndarray, radius: float):
    """Mutual nearest neighbors of A and B + shift within radius."""
    dist_ab, idx_ab = tree_a.query(b_xyz + shift, k=1,
                                   distance_upper_bound=radius)
    _, idx_ba = tree_b.query(a_xyz - shift, k=1,
                             distance_upper_bound=radius)
    return [(int(idx_ab[jb]), jb, float(dist_ab[jb]))
            for jb in range(len(b_xyz))
            if np.isfinite(dist_ab[jb]) and idx_ba[int(idx_ab[jb])] == jb]


def refine_and_pair(a: PsiPointCloud, b: PsiPointCloud, coarse: CoarseShift,
                    radius: float = DEFAULT_PAIR_RADIUS_M,
                    refine_extent_m: float = 1.5,
                    refine_step_m: float = 0.5) -> tuple[PsPair, ...]:
    """Polish the shift on a discrete grid, then pair mutual neighbors.

    The refinement keeps the shift (within the search extent) that pairs
    the most points inside `radius`, breaking count ties by mean pair
    distance. Mutual nearest neighbor matching makes the result
    one-to-one and symmetric in the cloud order.
    """
    if a.zone != b.zone:
        raise ValidationError(f"clouds in different zones {a.zone}/{b.zone}")
    tree_a = cKDTree(a.xyz)
    tree_b = cKDTree(b.xyz)
    steps = np.arange(-refine_extent_m, refine_extent_m + 1e-9, refine_step_m)
    best = None
    for dx in steps:
        for dy in steps:
            for dz in steps:
                shift = coarse.shift_m + (dx, dy, dz)
                matches = _mutual_matches(tree_a, tree_b, a.xyz, b.xyz,
                                          shift, radius)
                mean = float(np.mean([m[2] for m in matches])) \
                    if matches else math.inf
                key = (-len(matches), mean)
                if best is None or key < best[0]:
                    best = (key, shift)
    shift = best[1]

    pairs = []
    for ia, jb, dist in _mutual_matches(tree_a, tree_b, a.xyz, b.xyz,
                                        shift, radius):
        midpoint = 0.5 * (a.xyz[ia] + b.xyz[jb] + shift)
        pairs.append(PsPair(
            id_a=a.ids[ia],
            id_b=b.ids[jb],
            position=midpoint,
            separation_m=dist,
            max_adi=float(max(a.adi[ia], b.adi[jb])),
        ))
    pairs.sort(key=lambda p: (p.id_a, p.id_b))
    return tuple(pairs)


def thin_pairs(pairs, cell: float = DEFAULT_THIN_CELL_M) -> tuple[PsPair, ...]:
    """Keep the best pair per ground cell.

    Best means lexicographically smallest (separation, max ADI); ties
    fall back to the point ids so the result is deterministic.
    """
    if cell <= 0.0:
        raise ValidationError("cell must be positive")
    best: dict[tuple[int, int], PsPair] = {}
    for pair in pairs:
        key = (int(math.floor(pair.position[0] / cell)),
               int(math.floor(pair.position[1] / cell)))
        held = best.get(key)
        if held is None or (pair.quality, pair.id_a, pair.id_b) < \
                (held.quality, held.id_a, held.id_b):
            best[key] = pair
    return tuple(sorted(best.values(), key=lambda p: (p.id_a, p.id_b)))


def radar_code_pairs(pairs, zone: str, geoms_by_stack,
                     source: str = "fusion",
                     id_prefix: str = "fus") -> tuple[PsCandidate, ...]:
    """Turn matched pairs into candidates with per-acquisition pixels.

    Each pair's midpoint is radar-coded into every acquisition of every
    stack; acquisitions whose validity window does not see the point are
    left out and the candidate is flagged partial.
    """
    out = []
    for k, pair in enumerate(pairs):
        east, north, height = (float(pair.position[0]),
                               float(pair.position[1]),
                               float(pair.position[2]))
        geo = map_to_geodetic(MapGrid(east, north, zone), height)
        ecef = geodetic_to_ecef(geo)
        pixels = {}
        partial = False
        for stack_id in sorted(geoms_by_stack):
            for acq_id in sorted(geoms_by_stack[stack_id]):
                geom = geoms_by_stack[stack_id][acq_id]
                try:
                    timing = radar_code(geom, ecef)
                except GeometryError:
                    partial = True
                    continue
                pixels[acq_id] = timing_to_pixel(geom, timing)
        if not pixels:
            continue
        out.append(PsCandidate(
            candidate_id=f"{id_prefix}_{k:05d}",
            source=source,
            position=ecef,
            pixels=pixels,
            quality={"separation_m": pair.separation_m,
                     "max_adi": pair.max_adi},
            flags=(FLAG_PARTIAL,) if partial else (),
        ))
    return tuple(out)
