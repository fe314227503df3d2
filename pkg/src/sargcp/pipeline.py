"""File-to-file stages chaining detection to positioned control points.

Every stage reads tables or rasters from disk and writes tables plus a
machine-readable JSON log, so each one is independently runnable,
resumable and testable, and a full run is exactly the composition of its
stages. Nothing here holds state between stages.

Stage order: detect -> pta -> screen -> correct -> solve -> report.
"""

from __future__ import annotations

import configparser
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .candidates import FLAG_PARTIAL, PsCandidate
from .errors import (
    EmptyResultError,
    GeometryError,
    ParseError,
    PeakError,
)
from .fusion import PsiPointCloud, coarse_register, radar_code_pairs, \
    refine_and_pair, thin_pairs
from .geodesy import (
    Ecef,
    Geodetic,
    MapGrid,
    ecef_to_geodetic,
    geodetic_to_ecef,
    geodetic_to_map,
    map_to_geodetic,
)
from .geometry import PixelCoord, RadarTiming, pixel_to_timing
from .io_formats import (
    PointTable,
    read_metadata,
    read_point_table,
    read_raster_tile,
    write_point_table,
)
from .optical import (
    OpticalImage,
    Template,
    bright_points,
    high_boost,
    icp_align,
    ncc_match,
    radar_code_objects,
    threshold_and_cluster,
)
from .pta import SlcChip, analyze_chip
from .roads import (
    RoadHit,
    RoadNetwork,
    compute_adi,
    match_across_geometries,
    radar_code_network,
    search_candidates,
)
from .robust_stats import FLAG_INVISIBLE, FLAG_KEPT, NoiseSeries, \
    screen_series
from .simulate import TruthCatalog, score_against_truth
from .stereo import (
    CASCADE_ACCEPTED,
    CascadeConfig,
    Observation,
    ObservationSet,
    SolverConfig,
    outlier_cascade,
    report_quality,
)
from .timing import assemble_corrections, correct_timing, \
    read_correction_config

log = logging.getLogger(__name__)

METHODS = ("fusion", "optical", "road")
STAGES = ("detect", "pta", "screen", "correct", "solve", "report")

SCENE_MANIFEST = "scene_manifest.ini"

CANDIDATES_FILE = "candidates.pt"
PIXELS_FILE = "candidate_pixels.pt"
OBSERVATIONS_FILE = "observations.pt"
SCREENED_FILE = "observations_screened.pt"
TIMINGS_FILE = "timings.pt"
GCPS_FILE = "gcps.pt"
COMPONENTS_FILE = "components.pt"
RESIDUALS_FILE = "residuals.pt"
REPORT_FILE = "report.txt"
CLASS_STATS_FILE = "class_stats.pt"
SPACING_FILE = "spacing_histogram.pt"
TRUTH_SCORE_FILE = "truth_score.pt"


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineManifest:
    """Parsed run description: where the scene is, what to do, where to."""

    scene_dir: Path
    out_dir: Path
    method: str
    blocks: Mapping[str, Mapping[str, str]]

    @classmethod
    def load(cls, path) -> "PipelineManifest":
        path = Path(path)
        cp = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ParseError(str(exc), path=str(path)) from None
        except configparser.Error as exc:
            raise ParseError(f"bad manifest: {exc}", path=str(path)) from None
        if not cp.has_section("pipeline"):
            raise ParseError("missing [pipeline] section", path=str(path))
        sec = cp["pipeline"]
        for key in ("scene_dir", "method", "out_dir"):
            if key not in sec:
                raise ParseError(f"[pipeline] missing {key!r}",
                                 path=str(path))
        method = sec["method"]
        if method not in METHODS:
            raise ParseError(
                f"method must be one of {METHODS}, got {method!r}",
                path=str(path))
        if not cp.has_section(method):
            raise ParseError(f"method {method!r} needs a [{method}] block",
                             path=str(path))
        base = path.parent
        scene_dir = (base / sec["scene_dir"]).resolve()
        if not (scene_dir / SCENE_MANIFEST).is_file():
            raise ParseError(f"no {SCENE_MANIFEST} under {scene_dir}",
                             path=str(path))
        blocks = {name: dict(cp[name]) for name in cp.sections()
                  if name != "pipeline"}
        return cls(scene_dir=scene_dir,
                   out_dir=(base / sec["out_dir"]).resolve(),
                   method=method, blocks=blocks)

    def params(self, section: str) -> dict:
        return dict(self.blocks.get(section, {}))


@dataclass(frozen=True)
class SceneInfo:
    """Contents of a scene directory as declared by its manifest.

    extras carries the manifest's suggestion sections (search radii,
    template rectangles); pipeline parameters override them.
    """

    root: Path
    zone: str
    origin: Geodetic
    center_east: float
    center_north: float
    road_height_m: float
    crop_px: int
    chip_px: int
    epochs: int
    stacks: tuple
    files: Mapping[str, tuple]
    extras: Mapping[str, Mapping[str, str]]


def load_scene(scene_dir) -> SceneInfo:
    """Parse the scene manifest and verify every listed file exists."""
    root = Path(scene_dir)
    path = root / SCENE_MANIFEST
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ParseError(str(exc), path=str(path)) from None
    except configparser.Error as exc:
        raise ParseError(f"bad scene manifest: {exc}",
                         path=str(path)) from None
    try:
        sec = cp["scene"]
        files = {role: tuple(val.split(","))
                 for role, val in cp["files"].items()}
        extras = {name: dict(cp[name]) for name in cp.sections()
                  if name not in ("format", "scene", "files")}
        info = SceneInfo(
            root=root,
            zone=sec["zone"],
            origin=Geodetic(float(sec["origin_lat"]),
                            float(sec["origin_lon"]),
                            float(sec["origin_height"])),
            center_east=float(sec["center_east"]),
            center_north=float(sec["center_north"]),
            road_height_m=float(sec["road_height"]),
            crop_px=int(sec["crop_px"]),
            chip_px=int(sec["chip_px"]),
            epochs=int(sec["epochs"]),
            stacks=tuple(sec["stacks"].split(",")),
            files=files,
            extras=extras,
        )
    except (KeyError, ValueError) as exc:
        raise ParseError(f"scene manifest field: {exc!r}",
                         path=str(path)) from None
    for role, rels in info.files.items():
        for rel in rels:
            if not (root / rel).is_file():
                raise ParseError(f"listed {role} file missing: {rel}",
                                 path=str(path))
    return info


def _acq_parts(acquisition_id: str) -> tuple:
    stack, epoch = acquisition_id.rsplit("_", 1)
    return stack, int(epoch)


def _scene_geometries(scene: SceneInfo) -> dict:
    """One viewing geometry per stack, from the epoch-0 metadata."""
    geoms = {}
    for rel in scene.files.get("meta", ()):
        rec = read_metadata(scene.root / rel)
        stack, epoch = _acq_parts(rec.acquisition_id)
        if epoch == 0:
            geoms[stack] = rec.geometry
    missing = [s for s in scene.stacks if s not in geoms]
    if missing:
        raise EmptyResultError(f"no epoch-0 metadata for stacks {missing}")
    return geoms


def _scene_records(scene: SceneInfo) -> dict:
    return {rec.acquisition_id: rec
            for rec in (read_metadata(scene.root / rel)
                        for rel in scene.files.get("meta", ()))}


def _amp_stack(scene: SceneInfo, stack: str):
    """All epochs of one stack's amplitude crops, plus the crop origin."""
    tiles = []
    for rel in scene.files.get("amp", ()):
        sid, epoch = _acq_parts(Path(rel).stem)
        if sid == stack:
            tiles.append((epoch, read_raster_tile(scene.root / rel)))
    tiles.sort(key=lambda t: t[0])
    if not tiles:
        raise EmptyResultError(f"no amplitude rasters for stack {stack}")
    first = tiles[0][1]
    return [t.data for _, t in tiles], (first.first_line, first.first_sample)


def _chip_index(scene: SceneInfo) -> dict:
    """(stack, epoch) -> [(line0, sample0, relative path)], sorted."""
    index: dict = {}
    for rel in scene.files.get("chips", ()):
        stack, rest = Path(rel).stem.split("_", 1)
        epoch, line0, samp0 = rest.split("_")
        index.setdefault((stack, int(epoch)), []).append(
            (int(line0), int(samp0), rel))
    for windows in index.values():
        windows.sort()
    return index


def _write_log(out_dir: Path, stage: str, payload: dict) -> None:
    body = json.dumps({"stage": stage, **payload}, indent=2, sort_keys=True)
    (out_dir / f"{stage}_log.json").write_text(body + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Candidate table round trip
# ---------------------------------------------------------------------------

_CAND_SCHEMA = (
    ("candidate_id", "str"), ("source", "str"),
    ("x", "float"), ("y", "float"), ("z", "float"),
    ("east", "float"), ("north", "float"), ("height", "float"),
    ("flags", "str"), ("quality", "str"),
)
_PIXEL_SCHEMA = (("candidate_id", "str"), ("stack", "str"),
                 ("line", "float"), ("sample", "float"))


def _quality_str(quality: Mapping) -> str:
    items = [f"{k}={float(quality[k])!r}" for k in sorted(quality)]
    return ";".join(items) if items else "-"


def _write_candidates(out_dir: Path, cands) -> None:
    rows = []
    pixel_rows = []
    for c in cands:
        geo = ecef_to_geodetic(c.position)
        grid = geodetic_to_map(geo)
        rows.append((c.candidate_id, c.source,
                     c.position.x, c.position.y, c.position.z,
                     grid.easting_m, grid.northing_m, geo.height_m,
                     ",".join(c.flags) if c.flags else "-",
                     _quality_str(c.quality)))
        for stack in sorted(c.pixels):
            px = c.pixels[stack]
            pixel_rows.append((c.candidate_id, stack,
                               float(px.line), float(px.sample)))
    write_point_table(out_dir / CANDIDATES_FILE,
                      PointTable(_CAND_SCHEMA, tuple(rows)))
    write_point_table(out_dir / PIXELS_FILE,
                      PointTable(_PIXEL_SCHEMA, tuple(pixel_rows)))


def _read_candidates(out_dir: Path):
    cands = read_point_table(out_dir / CANDIDATES_FILE).to_dicts()
    pixels: dict = {}
    for row in read_point_table(out_dir / PIXELS_FILE).to_dicts():
        pixels.setdefault(row["candidate_id"], {})[row["stack"]] = \
            PixelCoord(row["line"], row["sample"])
    return cands, pixels


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------


def _road_network_from_table(scene: SceneInfo) -> RoadNetwork:
    rel = scene.files.get("roads")
    if rel is None:
        raise EmptyResultError("scene has no road table")
    table = read_point_table(scene.root / rel[0])
    lines: dict = {}
    for row in table.to_dicts():
        lines.setdefault(row["polyline"], []).append(
            (row["vertex"], row["east"], row["north"], row["height"]))
    if not lines:
        raise EmptyResultError("road table is empty")
    polylines = []
    heights = []
    for pid in sorted(lines):
        verts = sorted(lines[pid])
        polylines.append(np.array([(e, n) for _, e, n, _ in verts]))
        heights.append(np.array([h for _, _, _, h in verts]))
    return RoadNetwork(tuple(polylines), scene.zone,
                       scene.road_height_m, tuple(heights))


def _stage_params(manifest, scene: SceneInfo, section: str) -> dict:
    merged = dict(scene.extras.get(section, {}))
    merged.update(manifest.params(section))
    return merged


def _center_corrections(scene: SceneInfo, geoms: dict) -> dict:
    """Per-stack timing corrections at the scene center, mid epoch.

    Detection works on temporal composites, so the mid-epoch value of a
    drifting term is the one the composite actually carries.
    """
    providers = read_correction_config(
        scene.root / scene.files["corrections"][0])
    center = geodetic_to_ecef(map_to_geodetic(
        MapGrid(scene.center_east, scene.center_north, scene.zone),
        scene.road_height_m))
    mid = (scene.epochs - 1) / 2.0
    return {sid: assemble_corrections(geom, center, mid, providers)
            for sid, geom in geoms.items()}


def _detect_road(manifest, scene: SceneInfo, geoms: dict):
    params = _stage_params(manifest, scene, "road")
    radius = int(params.get("radius_px", 70))
    threshold = float(params.get("adi_max", 0.25))
    densify = float(params.get("densify_m", 35.0))
    network = _road_network_from_table(scene)
    corrections = _center_corrections(scene, geoms)

    hits_by_stack = {}
    counts = {}
    for stack in scene.stacks:
        rasters, (line0, samp0) = _amp_stack(scene, stack)
        adi = compute_adi(rasters)
        road_px = radar_code_network(network, geoms[stack], densify)
        rel_px = road_px - np.array([line0, samp0], dtype=float)
        hits = search_candidates(adi, rel_px, radius_px=radius,
                                 threshold=threshold)
        hits_by_stack[stack] = tuple(
            RoadHit(h.line + line0, h.sample + samp0, h.adi) for h in hits)
        counts[stack] = {"road_nodes": len(road_px), "hits": len(hits)}
    cands = match_across_geometries(hits_by_stack, geoms,
                                    scene.road_height_m,
                                    corrections_by_stack=corrections)
    info = {"per_stack": counts,
            "params": {"radius_px": radius, "adi_max": threshold,
                       "densify_m": densify}}
    return cands, info


def _require(params: Mapping, key: str, section: str) -> str:
    if key not in params:
        raise ParseError(f"[{section}] missing {key!r}")
    return params[key]


def _detect_optical(manifest, scene: SceneInfo, geoms: dict):
    params = _stage_params(manifest, scene, "optical")
    rels = scene.files.get("optical")
    geo_rels = scene.files.get("optical_geo")
    if rels is None or geo_rels is None:
        raise EmptyResultError("scene has no optical image")
    tile = read_raster_tile(scene.root / rels[0])
    geo = read_point_table(scene.root / geo_rels[0]).to_dicts()[0]
    image = OpticalImage(tile.data.astype(np.float64),
                         geo["origin_easting"], geo["origin_northing"],
                         geo["spacing_m"], geo["zone"])

    boost = float(params.get("boost", 1.0))
    blur = float(params.get("blur_sigma_px", 2.0))
    threshold = float(params.get("ncc_min", 0.6))
    radius_m = float(params.get("cluster_radius_m", 1.5))
    percentile = float(params.get("bright_percentile", 99.5))
    gate_px = float(params.get("gate_px", 3.0))
    height_m = float(params.get("height_m", scene.road_height_m))
    r0 = int(_require(params, "template_line0", "optical"))
    c0 = int(_require(params, "template_sample0", "optical"))
    th = int(_require(params, "template_height", "optical"))
    tw = int(_require(params, "template_width", "optical"))
    anchor = (float(params.get("template_anchor_line", (th - 1) / 2.0)),
              float(params.get("template_anchor_sample", (tw - 1) / 2.0)))

    boosted = high_boost(image, boost, blur_sigma_px=blur)
    template = Template.from_image(boosted, r0, c0, th, tw, anchor=anchor)
    scores = ncc_match(boosted, template)
    objects = threshold_and_cluster(scores, boosted, template,
                                    threshold=threshold, radius_m=radius_m)

    pixels_per_object: list = [dict() for _ in objects]
    counts = {}
    for stack in scene.stacks:
        if not objects:
            counts[stack] = {"matched": 0}
            continue
        rasters, (line0, samp0) = _amp_stack(scene, stack)
        predicted = radar_code_objects(objects, height_m, geoms[stack])
        bright = bright_points(np.mean(rasters, axis=0),
                               percentile=percentile)
        bright += (line0, samp0)
        aligned = icp_align(predicted, bright, gate_px=gate_px)
        for k, ref in enumerate(aligned.matches):
            if ref >= 0:
                pixels_per_object[k][stack] = PixelCoord(*bright[ref])
        counts[stack] = {"bright_points": len(bright),
                         "matched": int((aligned.matches >= 0).sum()),
                         "icp_mse_px2": aligned.mse_px2,
                         "diverged": aligned.diverged}

    cands = []
    dropped = []
    for k, obj in enumerate(objects):
        pixels = pixels_per_object[k]
        if len(pixels) < 2:
            dropped.append({"identifier": f"object_{k:05d}",
                            "reason": f"matched in {len(pixels)} stacks, "
                                      "need 2"})
            continue
        geo_pos = map_to_geodetic(obj.position, height_m)
        flags = (FLAG_PARTIAL,) if len(pixels) < len(scene.stacks) else ()
        cands.append(PsCandidate(
            candidate_id=f"opt_{len(cands):05d}",
            source="optical",
            position=geodetic_to_ecef(geo_pos),
            pixels=pixels,
            quality={"mean_score": obj.mean_score,
                     "members": float(obj.member_count)},
            flags=flags))
    info = {"objects": len(objects), "per_stack": counts,
            "drops": dropped,
            "params": {"boost": boost, "ncc_min": threshold,
                       "cluster_radius_m": radius_m, "gate_px": gate_px}}
    return tuple(cands), info


def _cloud_from_table(stack: str, zone: str, table: PointTable
                      ) -> PsiPointCloud:
    rows = table.to_dicts()
    return PsiPointCloud(
        stack_id=stack,
        zone=zone,
        ids=tuple(r["point_id"] for r in rows),
        xyz=np.array([(r["east"], r["north"], r["height"]) for r in rows]),
        coherence=np.array([r["coherence"] for r in rows]),
        height_precision=np.array([r["height_precision"] for r in rows]),
        adi=np.array([r["adi"] for r in rows]),
    )


def _detect_fusion(manifest, scene: SceneInfo, geoms: dict):
    params = manifest.params("fusion")
    cloud_rels = {Path(rel).stem: rel
                  for rel in scene.files.get("clouds", ())}
    if len(cloud_rels) < 2:
        raise EmptyResultError(
            f"fusion needs two point clouds, scene has {len(cloud_rels)}")
    defaults = [s for s in scene.stacks if s in cloud_rels]
    stack_a = params.get("stack_a", defaults[0])
    stack_b = params.get("stack_b", defaults[1])
    for stack in (stack_a, stack_b):
        if stack not in cloud_rels:
            raise ParseError(f"no cloud for stack {stack!r}")
    cell = float(params.get("cell_m", 2.0))
    pair_radius = float(params.get("pair_radius_m", 5.0))
    thin_cell = float(params.get("thin_cell_m", 10.0))

    cloud_a = _cloud_from_table(stack_a, scene.zone, read_point_table(
        scene.root / cloud_rels[stack_a]))
    cloud_b = _cloud_from_table(stack_b, scene.zone, read_point_table(
        scene.root / cloud_rels[stack_b]))
    coarse = coarse_register(cloud_a, cloud_b, cell=cell)
    pairs = refine_and_pair(cloud_a, cloud_b, coarse, radius=pair_radius)
    thinned = thin_pairs(pairs, cell=thin_cell)
    cands = radar_code_pairs(
        thinned, scene.zone,
        {stack_a: {stack_a: geoms[stack_a]},
         stack_b: {stack_b: geoms[stack_b]}})
    info = {"clouds": {stack_a: len(cloud_a), stack_b: len(cloud_b)},
            "coarse_shift_m": [float(v) for v in coarse.shift_m],
            "coarse_significance": coarse.significance,
            "pairs": len(pairs), "thinned": len(thinned),
            "params": {"cell_m": cell, "pair_radius_m": pair_radius,
                       "thin_cell_m": thin_cell}}
    return cands, info


def run_detect(manifest: PipelineManifest) -> None:
    """Find identical-scatterer candidates with the configured method."""
    scene = load_scene(manifest.scene_dir)
    out = manifest.out_dir
    out.mkdir(parents=True, exist_ok=True)
    geoms = _scene_geometries(scene)
    detector = {"road": _detect_road, "optical": _detect_optical,
                "fusion": _detect_fusion}[manifest.method]
    cands, info = detector(manifest, scene, geoms)
    _write_candidates(out, cands)
    _write_log(out, "detect", {"method": manifest.method,
                               "out": {"candidates": len(cands)}, **info})
    log.info("detect: %d candidates via %s", len(cands), manifest.method)


# ---------------------------------------------------------------------------
# pta
# ---------------------------------------------------------------------------

_OBS_SCHEMA = (
    ("candidate_id", "str"), ("stack", "str"), ("acquisition_id", "str"),
    ("epoch", "int"), ("t_az", "float"), ("tau_rg", "float"),
    ("line", "float"), ("sample", "float"), ("scr", "float"),
    ("sigma_phi", "float"), ("peak_power_db", "float"),
    ("clutter_power_db", "float"),
)


def _covering_window(windows, line: float, sample: float, chip_px: int):
    """The chip window containing the pixel, nearest center on ties."""
    half = chip_px / 2.0
    best = None
    for line0, samp0, rel in windows:
        if not (line0 <= line < line0 + chip_px
                and samp0 <= sample < samp0 + chip_px):
            continue
        off = max(abs(line0 + half - 0.5 - line),
                  abs(samp0 + half - 0.5 - sample))
        if best is None or off < best[0]:
            best = (off, rel)
    return None if best is None else best[1]


def run_pta(manifest: PipelineManifest, threads: int = 1) -> None:
    """Refine every candidate pixel to sub-pixel timings per acquisition."""
    scene = load_scene(manifest.scene_dir)
    out = manifest.out_dir
    params = manifest.params("pta")
    factor = int(params.get("factor", 32))
    threads = int(params.get("threads", threads))
    cands, pixels = _read_candidates(out)
    records = _scene_records(scene)
    chips = _chip_index(scene)

    tasks = []
    drops = []
    for cand in cands:
        cid = cand["candidate_id"]
        for stack in sorted(pixels.get(cid, {})):
            px = pixels[cid][stack]
            for epoch in range(scene.epochs):
                acq = f"{stack}_{epoch:02d}"
                rel = _covering_window(chips.get((stack, epoch), ()),
                                       px.line, px.sample, scene.chip_px)
                if rel is None:
                    drops.append({"identifier": f"{cid}/{acq}",
                                  "reason": "no chip window covers pixel"})
                    continue
                tasks.append((cid, stack, acq, epoch, rel))

    def analyze(task):
        cid, stack, acq, epoch, rel = task
        tile = read_raster_tile(scene.root / rel)
        rec = records[acq]
        chip = SlcChip(tile.data, tile.first_line, tile.first_sample,
                       calibration=rec.calibration)
        try:
            res = analyze_chip(chip, factor=factor)
        except PeakError as exc:
            return ("drop", {"identifier": f"{cid}/{acq}",
                             "reason": str(exc)})
        timing = pixel_to_timing(rec.geometry, res.peak)
        return ("row", (cid, stack, acq, epoch, timing.t_az, timing.tau_rg,
                        res.peak.line, res.peak.sample, res.scr,
                        res.sigma_phi, res.peak_power_db,
                        res.clutter_power_db))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(analyze, tasks))
    else:
        outcomes = [analyze(t) for t in tasks]
    rows = [payload for kind, payload in outcomes if kind == "row"]
    drops += [payload for kind, payload in outcomes if kind == "drop"]

    write_point_table(out / OBSERVATIONS_FILE,
                      PointTable(_OBS_SCHEMA, tuple(rows)))
    _write_log(out, "pta", {
        "in": {"candidates": len(cands), "chip_windows": len(tasks)},
        "out": {"observations": len(rows)},
        "drops": drops,
        "params": {"factor": factor, "threads": threads}})
    log.info("pta: %d observations from %d candidates", len(rows),
             len(cands))


# ---------------------------------------------------------------------------
# screen
# ---------------------------------------------------------------------------


def run_screen(manifest: PipelineManifest) -> None:
    """Flag unstable epochs per candidate and stack by their phase noise."""
    out = manifest.out_dir
    params = manifest.params("screen")
    limit = float(params.get("visibility_limit_rad", 0.5))
    table = read_point_table(out / OBSERVATIONS_FILE)
    rows = table.to_dicts()

    series_rows: dict = {}
    for i, row in enumerate(rows):
        series_rows.setdefault((row["candidate_id"], row["stack"]),
                               []).append(i)
    flags = [""] * len(rows)
    shorts = [0] * len(rows)
    for key in sorted(series_rows):
        idx = sorted(series_rows[key], key=lambda i: rows[i]["epoch"])
        finite = [i for i in idx if math.isfinite(rows[i]["sigma_phi"])]
        for i in set(idx) - set(finite):
            flags[i] = FLAG_INVISIBLE  # no measurable peak at all
        if not finite:
            continue
        series = NoiseSeries(
            tuple(rows[i]["acquisition_id"] for i in finite),
            tuple(rows[i]["sigma_phi"] for i in finite))
        screened = screen_series(series, visibility_limit=limit)
        for i, flag in zip(finite, screened.flags):
            flags[i] = flag
            shorts[i] = int(screened.short)

    out_rows = tuple(tuple(row.values()) + (flags[i], shorts[i])
                     for i, row in enumerate(rows))
    schema = table.schema + (("flag", "str"), ("short", "int"))
    write_point_table(out / SCREENED_FILE, PointTable(schema, out_rows))
    counts: dict = {}
    for f in flags:
        counts[f] = counts.get(f, 0) + 1
    _write_log(out, "screen", {
        "in": {"observations": len(rows)},
        "out": {"kept": counts.get(FLAG_KEPT, 0)},
        "flags": counts,
        "params": {"visibility_limit_rad": limit}})
    log.info("screen: kept %d of %d", counts.get(FLAG_KEPT, 0), len(rows))


# ---------------------------------------------------------------------------
# correct
# ---------------------------------------------------------------------------

_TIMING_SCHEMA = (
    ("candidate_id", "str"), ("stack", "str"), ("acquisition_id", "str"),
    ("epoch", "int"), ("t_az", "float"), ("tau_rg", "float"),
    ("provenance", "str"),
)


def run_correct(manifest: PipelineManifest) -> None:
    """Remove configured timing perturbations from the kept observations."""
    scene = load_scene(manifest.scene_dir)
    out = manifest.out_dir
    providers = read_correction_config(
        scene.root / scene.files["corrections"][0])
    geoms = _scene_geometries(scene)
    cands, _ = _read_candidates(out)
    positions = {c["candidate_id"]: Ecef(c["x"], c["y"], c["z"])
                 for c in cands}
    rows = read_point_table(out / SCREENED_FILE).to_dicts()

    out_rows = []
    for row in rows:
        if row["flag"] != FLAG_KEPT:
            continue
        geom = geoms[row["stack"]]
        corr = assemble_corrections(geom, positions[row["candidate_id"]],
                                    float(row["epoch"]), providers)
        timing = correct_timing(RadarTiming(row["t_az"], row["tau_rg"]),
                                corr)
        provenance = ";".join(sorted(set(corr.provenance.values())))
        out_rows.append((row["candidate_id"], row["stack"],
                         row["acquisition_id"], row["epoch"],
                         timing.t_az, timing.tau_rg, provenance))
    write_point_table(out / TIMINGS_FILE,
                      PointTable(_TIMING_SCHEMA, tuple(out_rows)))
    _write_log(out, "correct", {
        "in": {"observations": len(rows)},
        "out": {"timings": len(out_rows)},
        "providers": sorted({p.name for p in providers}),
        "params": {}})
    log.info("correct: %d timings", len(out_rows))


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

_GCP_SCHEMA = (
    ("candidate_id", "str"), ("source", "str"), ("geometry_class", "str"),
    ("x", "float"), ("y", "float"), ("z", "float"),
    ("east", "float"), ("north", "float"), ("height", "float"),
    ("s_e_m", "float"), ("s_n_m", "float"), ("s_h_m", "float"),
    ("sigma_scale", "float"),
    ("cov_xx", "float"), ("cov_xy", "float"), ("cov_xz", "float"),
    ("cov_yy", "float"), ("cov_yz", "float"), ("cov_zz", "float"),
    ("n_observations", "int"), ("n_geometries", "int"),
    ("iterations", "int"), ("vce_rounds", "int"),
)
_COMPONENT_SCHEMA = (
    ("candidate_id", "str"), ("geometry_id", "str"),
    ("s_az_m", "float"), ("s_rg_m", "float"),
)
_RESIDUAL_SCHEMA = (
    ("candidate_id", "str"), ("acquisition_id", "str"),
    ("az_m", "float"), ("rg_m", "float"),
)


def _solver_configs(manifest: PipelineManifest):
    params = manifest.params("solve")
    solver = SolverConfig(
        reference_height_m=float(params.get("reference_height_m", 0.0)))
    cascade = CascadeConfig(
        gross_range_m=float(params.get("gross_range_m", 0.6)),
        gross_azimuth_m=float(params.get("gross_azimuth_m", 1.1)),
        residual_sigma_factor=float(params.get("residual_sigma_factor",
                                               2.0)),
        max_s_az_m=float(params.get("max_s_az_m", 0.20)),
        min_obs_per_geometry=int(params.get("min_obs_per_geometry", 3)))
    sigma_scale = float(params.get("sigma_scale", 1.96))
    return solver, cascade, sigma_scale


def run_solve(manifest: PipelineManifest) -> None:
    """Position every candidate and keep the ones that survive cleaning."""
    scene = load_scene(manifest.scene_dir)
    out = manifest.out_dir
    solver, cascade, sigma_scale = _solver_configs(manifest)
    geoms = _scene_geometries(scene)
    cands, _ = _read_candidates(out)
    sources = {c["candidate_id"]: c["source"] for c in cands}
    rows = read_point_table(out / TIMINGS_FILE).to_dicts()

    grouped: dict = {}
    for row in rows:
        grouped.setdefault(row["candidate_id"], []).append(row)

    gcp_rows = []
    comp_rows = []
    res_rows = []
    drops = []
    for cid in sorted(grouped):
        members = grouped[cid]
        if len({m["stack"] for m in members}) < 2:
            drops.append({"identifier": cid,
                          "reason": "fewer than 2 viewing geometries"})
            continue
        observations = tuple(
            Observation(m["acquisition_id"], m["stack"],
                        geoms[m["stack"]],
                        RadarTiming(m["t_az"], m["tau_rg"]),
                        tuple(m["provenance"].split(";")))
            for m in members)
        try:
            result = outlier_cascade(ObservationSet(observations),
                                     config=solver, cascade=cascade)
        except GeometryError as exc:
            drops.append({"identifier": cid, "reason": f"solver: {exc}"})
            continue
        for record in result.log:
            drops.append({"identifier": f"{cid}/{record.identifier}",
                          "stage": record.stage, "scope": record.scope,
                          "reason": record.reason})
        if result.status != CASCADE_ACCEPTED:
            drops.append({"identifier": cid,
                          "reason": f"cascade {result.status}"})
            continue
        sol = result.solution
        quality = report_quality(sol, sol.position,
                                 sigma_scale=sigma_scale)
        geo = ecef_to_geodetic(sol.position)
        grid = geodetic_to_map(geo)
        cov = sol.covariance
        gcp_rows.append((
            cid, sources.get(cid, "manual"), sol.geometry_class,
            sol.position.x, sol.position.y, sol.position.z,
            grid.easting_m, grid.northing_m, geo.height_m,
            quality.s_e_m, quality.s_n_m, quality.s_h_m, sigma_scale,
            cov[0, 0], cov[0, 1], cov[0, 2],
            cov[1, 1], cov[1, 2], cov[2, 2],
            len(result.observations), len(sol.components),
            sol.iterations, sol.vce_rounds))
        for gid in sorted(sol.components):
            comp = sol.components[gid]
            comp_rows.append((cid, gid, comp.s_az_m, comp.s_rg_m))
        for aid in sorted(sol.residuals):
            res = sol.residuals[aid]
            res_rows.append((cid, aid, res.az_m, res.rg_m))

    write_point_table(out / GCPS_FILE,
                      PointTable(_GCP_SCHEMA, tuple(gcp_rows)))
    write_point_table(out / COMPONENTS_FILE,
                      PointTable(_COMPONENT_SCHEMA, tuple(comp_rows)))
    write_point_table(out / RESIDUALS_FILE,
                      PointTable(_RESIDUAL_SCHEMA, tuple(res_rows)))
    _write_log(out, "solve", {
        "in": {"candidates": len(grouped), "timings": len(rows)},
        "out": {"gcps": len(gcp_rows)},
        "drops": drops,
        "params": {"max_s_az_m": cascade.max_s_az_m,
                   "gross_range_m": cascade.gross_range_m,
                   "sigma_scale": sigma_scale}})
    log.info("solve: %d accepted of %d candidates", len(gcp_rows),
             len(grouped))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_CLASS_SCHEMA = (
    ("geometry_class", "str"), ("count", "int"),
    ("mean_s_e_m", "float"), ("mean_s_n_m", "float"),
    ("mean_s_h_m", "float"),
    ("sd_s_e_m", "float"), ("sd_s_n_m", "float"), ("sd_s_h_m", "float"),
)
_SPACING_SCHEMA = (("bin_low_m", "float"), ("bin_high_m", "float"),
                   ("count", "int"))
_SCORE_SCHEMA = (("metric", "str"), ("value", "float"))


def _class_stats(gcps) -> tuple:
    groups: dict = {}
    for row in gcps:
        groups.setdefault(row["geometry_class"], []).append(
            (row["s_e_m"], row["s_n_m"], row["s_h_m"]))
    out = []
    for cls in sorted(groups):
        arr = np.asarray(groups[cls])
        mean = arr.mean(axis=0)
        sd = arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros(3)
        out.append((cls, len(arr), *map(float, mean), *map(float, sd)))
    return tuple(out)


def _spacing_histogram(gcps, bin_m: float, max_m: float) -> tuple:
    if len(gcps) < 2:
        return ()
    xy = np.array([(r["east"], r["north"]) for r in gcps])
    d = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    nearest = d.min(axis=1)
    edges = np.arange(0.0, max_m + bin_m / 2.0, bin_m)
    counts, _ = np.histogram(nearest, bins=edges)
    rows = [(float(edges[i]), float(edges[i + 1]), int(counts[i]))
            for i in range(len(counts))]
    rows.append((float(edges[-1]), math.inf,
                 int((nearest >= edges[-1]).sum())))
    return tuple(rows)


def _truth_rows(manifest, scene, gcps) -> tuple:
    rels = scene.files.get("truth_targets")
    if rels is None or not gcps:
        return ()
    catalog = TruthCatalog.from_table(
        read_point_table(scene.root / rels[0]), scene.origin)
    positions = np.array([(r["x"], r["y"], r["z"]) for r in gcps])
    covs = np.array([[[r["cov_xx"], r["cov_xy"], r["cov_xz"]],
                      [r["cov_xy"], r["cov_yy"], r["cov_yz"]],
                      [r["cov_xz"], r["cov_yz"], r["cov_zz"]]]
                     for r in gcps])
    radius = float(manifest.params("report").get("match_radius_m", 1.0))
    rep = score_against_truth(positions, catalog, match_radius_m=radius,
                              covariances=covs)
    rows = [("precision", rep.precision), ("recall", rep.recall)]
    if rep.bias_enu is not None:
        rows += [("bias_east_m", rep.bias_enu[0]),
                 ("bias_north_m", rep.bias_enu[1]),
                 ("bias_up_m", rep.bias_enu[2]),
                 ("rmse_east_m", rep.rmse_enu[0]),
                 ("rmse_north_m", rep.rmse_enu[1]),
                 ("rmse_up_m", rep.rmse_enu[2]),
                 ("rmse_3d_m", rep.rmse_3d_m),
                 ("worst_m", rep.worst_m)]
    if rep.chi2_pass_rate is not None:
        rows.append(("chi2_pass_rate", rep.chi2_pass_rate))
    return tuple((name, float(value)) for name, value in rows)


def run_report(manifest: PipelineManifest) -> None:
    """Summaries of the solved control points, plus truth metrics if any."""
    scene = load_scene(manifest.scene_dir)
    out = manifest.out_dir
    params = manifest.params("report")
    gcps = read_point_table(out / GCPS_FILE).to_dicts()
    residuals = read_point_table(out / RESIDUALS_FILE).to_dicts()

    class_rows = _class_stats(gcps)
    spacing_rows = _spacing_histogram(
        gcps, float(params.get("hist_bin_m", 10.0)),
        float(params.get("hist_max_m", 100.0)))
    truth_rows = () if params.get("use_truth", "yes") == "no" else \
        _truth_rows(manifest, scene, gcps)

    write_point_table(out / CLASS_STATS_FILE,
                      PointTable(_CLASS_SCHEMA, class_rows))
    write_point_table(out / SPACING_FILE,
                      PointTable(_SPACING_SCHEMA, spacing_rows))
    write_point_table(out / TRUTH_SCORE_FILE,
                      PointTable(_SCORE_SCHEMA, truth_rows))

    by_stack: dict = {}
    for row in residuals:
        stack, _ = _acq_parts(row["acquisition_id"])
        by_stack.setdefault(stack, []).append((row["az_m"], row["rg_m"]))

    lines = [f"control points: {len(gcps)}", "",
             "per geometry class (reported confidence per axis, m):",
             f"{'class':<8}{'count':>6}{'s_e':>10}{'s_n':>10}{'s_h':>10}"]
    for cls, count, me, mn, mh, *_ in class_rows:
        lines.append(f"{cls:<8}{count:>6}{me:>10.4f}{mn:>10.4f}"
                     f"{mh:>10.4f}")
    lines += ["", "post-fit residuals per stack (mean / max abs, m):",
              f"{'stack':<8}{'n':>6}{'az mean':>10}{'az max':>10}"
              f"{'rg mean':>10}{'rg max':>10}"]
    for stack in sorted(by_stack):
        arr = np.abs(np.asarray(by_stack[stack]))
        lines.append(
            f"{stack:<8}{len(arr):>6}{arr[:, 0].mean():>10.4f}"
            f"{arr[:, 0].max():>10.4f}{arr[:, 1].mean():>10.4f}"
            f"{arr[:, 1].max():>10.4f}")
    if spacing_rows:
        lines += ["", "nearest-neighbor spacing (m):"]
        for lo, hi, count in spacing_rows:
            top = "inf" if math.isinf(hi) else f"{hi:g}"
            lines.append(f"  {lo:>5g} .. {top:<5} {count}")
    if truth_rows:
        lines += ["", "against truth:"]
        for name, value in truth_rows:
            lines.append(f"  {name:<16} {value:.6f}")
    (out / REPORT_FILE).write_text("\n".join(lines) + "\n",
                                   encoding="utf-8")
    _write_log(out, "report", {
        "in": {"gcps": len(gcps), "residuals": len(residuals)},
        "out": {"classes": len(class_rows),
                "truth_metrics": len(truth_rows)},
        "params": {}})
    log.info("report: %d gcps in %d classes", len(gcps), len(class_rows))


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

_STAGE_FUNCS = {
    "detect": run_detect,
    "pta": run_pta,
    "screen": run_screen,
    "correct": run_correct,
    "solve": run_solve,
    "report": run_report,
}


def run_all(manifest: PipelineManifest, threads: int = 1) -> None:
    """Run the full chain; identical to invoking each stage in order."""
    for stage in STAGES:
        if stage == "pta":
            run_pta(manifest, threads=threads)
        else:
            _STAGE_FUNCS[stage](manifest)
