"""Candidate detection along road networks.

Lamp poles line the roads, so the search space for stable scatterers
shrinks to circular neighborhoods around radar-coded road vertices. The
amplitude dispersion index picks the most phase-stable pixel per
neighborhood, and candidates seen from several viewing geometries at
ground level survive the cross-geometry match.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree

from .candidates import FLAG_PARTIAL, PsCandidate
from .errors import GeometryError, ValidationError
from .geodesy import Ecef, MapGrid, geodetic_to_ecef, map_to_geodetic
from .geometry import (AcquisitionGeometry, PixelCoord, geocode,
                       pixel_to_timing, radar_code, timing_to_pixel)
from .timing import correct_timing

SEARCH_RADIUS_PX = 70
ADI_THRESHOLD = 0.25
ADI_TIE_FLOOR = 0.01
MATCH_DIST_MANY_M = 3.0  # three or more viewing geometries
MATCH_DIST_TWO_M = 1.5
ELEVATION_TOL_M = 2.0
DENSIFY_SPACING_M = 35.0  # about half the search radius on the ground


@dataclass(frozen=True)
class RoadNetwork:
    """Polylines in map-grid coordinates with a scene-level road height.

    Per-vertex heights are optional; where absent the default height
    applies. Heights refer to the ground at the road, not pole tops.
    """

    polylines: tuple
    zone: str
    default_height_m: float = 0.0
    heights: tuple | None = None

    def __post_init__(self):
        if not self.polylines:
            raise ValidationError("network needs at least one polyline")
        lines = []
        for line in self.polylines:
            arr = np.asarray(line, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
                raise ValidationError(
                    f"polyline must be (k, 2) with k >= 1, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError("polyline vertices must be finite")
            arr.setflags(write=False)
            lines.append(arr)
        object.__setattr__(self, "polylines", tuple(lines))
        if not np.isfinite(self.default_height_m):
            raise ValidationError("default height must be finite")
        if self.heights is not None:
            if len(self.heights) != len(lines):
                raise ValidationError("one height array per polyline")
            hs = []
            for arr, line in zip(self.heights, lines):
                h = np.asarray(arr, dtype=np.float64)
                if h.shape != (line.shape[0],):
                    raise ValidationError("height count must match vertices")
                if not np.all(np.isfinite(h)):
                    raise ValidationError("heights must be finite")
                h.setflags(write=False)
                hs.append(h)
            object.__setattr__(self, "heights", tuple(hs))

    def vertex_heights(self, index: int) -> np.ndarray:
        if self.heights is not None:
            return self.heights[index]
        return np.full(self.polylines[index].shape[0], self.default_height_m)

    def densified(self, max_spacing_m: float = DENSIFY_SPACING_M
                  ) -> "RoadNetwork":
        """Insert vertices so consecutive spacing never exceeds the limit.

        Search discs around the radar-coded vertices then cover the road
        without gaps.
        """
        if not max_spacing_m > 0.0:
            raise ValidationError("spacing must be positive")
        out_lines = []
        out_heights = []
        for i, line in enumerate(self.polylines):
            hts = self.vertex_heights(i)
            pts = [line[0]]
            hs = [hts[0]]
            for a, b, ha, hb in zip(line[:-1], line[1:], hts[:-1], hts[1:]):
                length = float(np.linalg.norm(b - a))
                pieces = max(1, int(np.ceil(length / max_spacing_m)))
                for k in range(1, pieces + 1):
                    f = k / pieces
                    pts.append(a + f * (b - a))
                    hs.append(ha + f * (hb - ha))
            out_lines.append(np.array(pts))
            out_heights.append(np.array(hs))
        return RoadNetwork(tuple(out_lines), self.zone,
                           self.default_height_m, tuple(out_heights))


@dataclass(frozen=True)
class AdiRaster:
    """Per-pixel amplitude dispersion over a co-registered stack.

    The temporal mean amplitude rides along to break dispersion ties;
    with little or no clutter whole sidelobe regions share one
    dispersion value and only the brightness separates the peak.
    """

    values: np.ndarray
    valid: np.ndarray
    acquisition_count: int
    mean_amplitude: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.valid, dtype=bool)
        if vals.ndim != 2 or vals.shape != mask.shape:
            raise ValidationError("values and valid mask must be equal 2-D")
        if self.acquisition_count < 2:
            raise ValidationError("dispersion needs at least 2 acquisitions")
        if not np.all(np.isfinite(vals[mask])) or np.any(vals[mask] < 0.0):
            raise ValidationError("dispersion must be finite and >= 0")
        vals.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "valid", mask)
        if self.mean_amplitude is not None:
            amp = np.asarray(self.mean_amplitude, dtype=np.float64)
            if amp.shape != vals.shape:
                raise ValidationError("mean amplitude shape must match")
            if not np.all(np.isfinite(amp)):
                raise ValidationError("mean amplitude must be finite")
            amp.setflags(write=False)
            object.__setattr__(self, "mean_amplitude", amp)


@dataclass(frozen=True)
class RoadHit:
    """Most stable pixel found near one stretch of road."""

    line: int
    sample: int
    adi: float

    def pixel(self) -> PixelCoord:
        return PixelCoord(float(self.line), float(self.sample))


def compute_adi(stack: Sequence[np.ndarray]) -> AdiRaster:
    """Temporal sample standard deviation over temporal mean, per pixel.

    Pixels whose temporal mean is not positive carry no usable amplitude
    statistics and are flagged invalid.
    """
    if len(stack) < 2:
        raise ValidationError("dispersion needs at least 2 acquisitions")
    arrs = [np.asarray(a, dtype=np.float64) for a in stack]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs) or len(shape) != 2:
        raise ValidationError("stack rasters must share one 2-D shape")
    cube = np.stack(arrs)
    mean = cube.mean(axis=0)
    sd = cube.std(axis=0, ddof=1)
    valid = mean > 0.0
    values = np.zeros(shape)
    np.divide(sd, mean, out=values, where=valid)
    values[valid] = np.abs(values[valid])
    return AdiRaster(values, valid, len(stack), mean_amplitude=mean)


def radar_code_network(network: RoadNetwork, geom: AcquisitionGeometry,
                       max_spacing_m: float = DENSIFY_SPACING_M) -> np.ndarray:
    """Densified road vertices as (line, sample) pixels in one stack.

    Vertices outside the acquisition's timing coverage are dropped; a
    road may well run off the edge of the scene.
    """
    dense = network.densified(max_spacing_m)
    out = []
    for i, line in enumerate(dense.polylines):
        for (east, north), height in zip(line, dense.vertex_heights(i)):
            geo = map_to_geodetic(MapGrid(float(east), float(north),
                                          network.zone), float(height))
            try:
                timing = radar_code(geom, geodetic_to_ecef(geo))
            except GeometryError:
                continue
            px = timing_to_pixel(geom, timing)
            out.append((px.line, px.sample))
    return np.array(out).reshape(-1, 2)


def _disc_offsets(radius_px: int) -> np.ndarray:
    span = np.arange(-radius_px, radius_px + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    keep = dy * dy + dx * dx <= radius_px * radius_px
    return np.column_stack([dy[keep], dx[keep]])


def search_candidates(adi: AdiRaster, road_px: np.ndarray,
                      radius_px: int = SEARCH_RADIUS_PX,
                      threshold: float = ADI_THRESHOLD) -> tuple:
    """Lowest-dispersion pixel per road-vertex disc, thresholded.

    Adjacent vertices often find the same pixel; duplicates collapse to
    one hit. Discs with no valid pixel yield nothing.
    """
    if radius_px < 1:
        raise ValidationError("radius must be at least 1 pixel")
    if not 0.0 < threshold:
        raise ValidationError("threshold must be positive")
    road_px = np.asarray(road_px, dtype=np.float64).reshape(-1, 2)
    h, w = adi.values.shape
    offsets = _disc_offsets(radius_px)
    found = {}
    for line, sample in road_px:
        center = np.array([round(line), round(sample)], dtype=np.int64)
        cells = center + offsets
        inside = ((cells[:, 0] >= 0) & (cells[:, 0] < h) &
                  (cells[:, 1] >= 0) & (cells[:, 1] < w))
        cells = cells[inside]
        if cells.size == 0:
            continue
        vals = adi.values[cells[:, 0], cells[:, 1]].copy()
        vals[~adi.valid[cells[:, 0], cells[:, 1]]] = np.inf
        best = int(np.argmin(vals))
        if not np.isfinite(vals[best]) or vals[best] > threshold:
            continue
        if adi.mean_amplitude is not None:
            # a dispersion estimate from n epochs carries sampling error
            # of order adi / sqrt(2 (n - 1)); differences inside that
            # band are noise, so the brighter pixel is the better pick
            tol = max(ADI_TIE_FLOOR, 2.0 * vals[best] / np.sqrt(
                adi.acquisition_count - 1.0))
            tied = np.flatnonzero(vals <= vals[best] + tol)
            amps = adi.mean_amplitude[cells[tied, 0], cells[tied, 1]]
            best = int(tied[np.argmax(amps)])
        key = (int(cells[best, 0]), int(cells[best, 1]))
        found.setdefault(key, float(vals[best]))
    return tuple(RoadHit(r, c, v) for (r, c), v in sorted(found.items()))


def _pair_height(geom_a: AcquisitionGeometry, timing_a,
                 geom_b: AcquisitionGeometry, timing_b,
                 road_height_m: float, span_m: float = 60.0) -> float:
    """Height at which the two geocoding loci come closest.

    Geocoding a fixed timing at a wrong height displaces the ground
    position; with two viewing directions the displacement directions
    differ, so the gap minimizes at the target's true height.
    """
    def gap(h: float) -> float:
        pa = geocode(geom_a, timing_a, h).as_array()
        pb = geocode(geom_b, timing_b, h).as_array()
        return float(np.linalg.norm(pa - pb))

    res = minimize_scalar(gap, bounds=(road_height_m - span_m,
                                       road_height_m + span_m),
                          method="bounded", options={"xatol": 0.01})
    return float(res.x)


def _screen_pair(members):
    """The two members whose viewing directions differ the most."""
    best = None
    for i in range(len(members)):
        for j in range(i + 1, len(members)):
            gi, gj = members[i][2], members[j][2]
            cross = gi.heading != gj.heading
            spread = abs(gi.incidence_deg - gj.incidence_deg)
            key = (cross, spread)
            if best is None or key > best[0]:
                best = (key, members[i], members[j])
    return best[1], best[2]


def match_across_geometries(hits_by_stack: Mapping[str, Sequence[RoadHit]],
                            geoms_by_stack: Mapping[str,
                                                    AcquisitionGeometry],
                            road_height_m: float,
                            threshold_m: float | None = None,
                            elevation_tol_m: float = ELEVATION_TOL_M,
                            corrections_by_stack: Mapping | None = None,
                            source: str = "road",
                            id_prefix: str = "road") -> tuple:
    """Group per-stack hits that geocode to the same ground point.

    Hits are geocoded at the road height; single-linkage groups within
    the distance threshold become candidates when they contain at least
    two stacks, no stack twice, and sit at ground level. The threshold
    default loosens with more geometries because cross-heading geocoding
    errors stack up. Known timing perturbations (atmosphere and the
    like) displace the geocoded positions by meters, enough to defeat
    the match; pass them per stack to take them out before geocoding.
    """
    stacks = sorted(hits_by_stack)
    for sid in stacks:
        if sid not in geoms_by_stack:
            raise ValidationError(f"no geometry for stack {sid!r}")
    if threshold_m is None:
        threshold_m = (MATCH_DIST_MANY_M if len(stacks) >= 3
                       else MATCH_DIST_TWO_M)
    if not threshold_m > 0.0:
        raise ValidationError("distance threshold must be positive")

    entries = []  # (stack_id, hit, geom, timing, position)
    for sid in stacks:
        geom = geoms_by_stack[sid]
        for hit in hits_by_stack[sid]:
            timing = pixel_to_timing(geom, hit.pixel())
            if corrections_by_stack is not None \
                    and sid in corrections_by_stack:
                timing = correct_timing(timing, corrections_by_stack[sid])
            pos = geocode(geom, timing, road_height_m)
            entries.append((sid, hit, geom, timing, pos.as_array()))
    if not entries:
        return ()

    positions = np.array([e[4] for e in entries])
    tree = cKDTree(positions)
    parent = list(range(len(entries)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in tree.query_pairs(threshold_m):
        parent[find(i)] = find(j)

    groups = {}
    for i in range(len(entries)):
        groups.setdefault(find(i), []).append(i)

    candidates = []
    for root in sorted(groups, key=lambda r: tuple(positions[r])):
        idx = groups[root]
        members = [entries[i] for i in idx]
        seen = [m[0] for m in members]
        if len(seen) < 2 or len(set(seen)) != len(seen):
            continue
        (sa, _, ga, ta, _), (sb, _, gb, tb, _) = _screen_pair(members)
        height = _pair_height(ga, ta, gb, tb, road_height_m)
        if abs(height - road_height_m) > elevation_tol_m:
            continue
        center = positions[idx].mean(axis=0)
        flags = (FLAG_PARTIAL,) if len(members) < len(stacks) else ()
        candidates.append(PsCandidate(
            candidate_id=f"{id_prefix}_{len(candidates):05d}",
            source=source,
            position=Ecef(*center),
            pixels={sid: hit.pixel() for sid, hit, *_ in members},
            quality={
                "max_adi": max(m[1].adi for m in members),
                "spread_m": max(
                    float(np.linalg.norm(m[4] - n[4]))
                    for m in members for n in members),
            },
            flags=flags,
        ))
    return tuple(candidates)
