"""Tests for road-network candidate detection."""

import math

import numpy as np
import pytest
from pytest import approx

from sargcp.candidates import FLAG_PARTIAL
from sargcp.errors import ValidationError
from sargcp.geodesy import Geodetic, MapGrid, geodetic_to_ecef, geodetic_to_map
from sargcp.geometry import PixelCoord, radar_code, timing_to_pixel
from sargcp.roads import (
    AdiRaster,
    RoadHit,
    RoadNetwork,
    compute_adi,
    match_across_geometries,
    radar_code_network,
    search_candidates,
    _pair_height,
)
from sargcp.simulate import OULU_TRACKS, synthetic_geometry

ORIGIN = Geodetic(52.5, 13.4, 40.0)
ROAD_HEIGHT = 40.0
ORIGIN_MAP = geodetic_to_map(ORIGIN)
ZONE = ORIGIN_MAP.zone


@pytest.fixture(scope="module")
def geoms():
    return {t.stack_id: synthetic_geometry(ORIGIN, t) for t in OULU_TRACKS}


def _map_point(de, dn):
    return MapGrid(ORIGIN_MAP.easting_m + de, ORIGIN_MAP.northing_m + dn,
                   ZONE)


def _hit(geom, grid, height, adi=0.05):
    from sargcp.geodesy import map_to_geodetic
    target = geodetic_to_ecef(map_to_geodetic(grid, height))
    px = timing_to_pixel(geom, radar_code(geom, target))
    return RoadHit(int(round(px.line)), int(round(px.sample)), adi)


class TestRoadNetwork:

    def test_rejects_degenerate_networks(self):
        with pytest.raises(ValidationError):
            RoadNetwork((), ZONE)
        with pytest.raises(ValidationError):
            RoadNetwork((np.zeros((3, 3)),), ZONE)
        with pytest.raises(ValidationError):
            RoadNetwork((np.array([[0.0, np.inf]]),), ZONE)
        with pytest.raises(ValidationError):
            RoadNetwork((np.zeros((2, 2)),), ZONE,
                        heights=(np.zeros(3),))

    def test_default_height_fills_in(self):
        net = RoadNetwork((np.zeros((4, 2)),), ZONE, default_height_m=12.5)
        assert net.vertex_heights(0).tolist() == [12.5] * 4

    def test_densify_bounds_spacing_and_keeps_endpoints(self):
        net = RoadNetwork((np.array([[0.0, 0.0], [100.0, 0.0]]),), ZONE,
                          heights=(np.array([0.0, 30.0]),))
        dense = net.densified(35.0)
        line = dense.polylines[0]
        assert line[0].tolist() == [0.0, 0.0]
        assert line[-1].tolist() == [100.0, 0.0]
        gaps = np.linalg.norm(np.diff(line, axis=0), axis=1)
        assert np.all(gaps <= 35.0 + 1e-9)
        np.testing.assert_allclose(dense.vertex_heights(0),
                                   [0.0, 10.0, 20.0, 30.0], atol=1e-12)

    def test_densify_leaves_single_vertex_alone(self):
        net = RoadNetwork((np.array([[5.0, 5.0]]),), ZONE)
        dense = net.densified(10.0)
        assert dense.polylines[0].shape == (1, 2)


class TestComputeAdi:

    def test_constant_pixel_scores_zero(self):
        adi = compute_adi([np.full((4, 4), 3.0)] * 5)
        assert np.all(adi.values == 0.0)
        assert np.all(adi.valid)

    def test_two_epoch_arithmetic(self):
        # amplitudes {1, 3}: mean 2, sample sd sqrt(2)
        adi = compute_adi([np.full((2, 2), 1.0), np.full((2, 2), 3.0)])
        assert adi.values[0, 0] == approx(math.sqrt(2.0) / 2.0, abs=1e-15)
        assert adi.values[0, 0] == approx(0.7071067811865476, abs=1e-12)

    def test_zero_mean_pixel_flagged_invalid(self):
        a = np.ones((3, 3))
        a[1, 1] = 0.0
        adi = compute_adi([a, a.copy(), a.copy()])
        assert not adi.valid[1, 1]
        assert adi.values[1, 1] == 0.0
        assert adi.valid[0, 0]

    def test_rejects_degenerate_stacks(self):
        with pytest.raises(ValidationError):
            compute_adi([np.ones((3, 3))])
        with pytest.raises(ValidationError):
            compute_adi([np.ones((3, 3)), np.ones((3, 4))])

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        stack = [rng.uniform(0.5, 2.0, (6, 7)) for _ in range(9)]
        base = compute_adi(stack)
        doubled = compute_adi([2.0 * a for a in stack])
        np.testing.assert_array_equal(doubled.values, base.values)
        tripled = compute_adi([3.0 * a for a in stack])
        np.testing.assert_allclose(tripled.values, base.values, atol=1e-12)

    def test_rayleigh_clutter_dispersion(self):
        # sd/mean of a Rayleigh amplitude is sqrt((4 - pi)/pi) ~ 0.5227
        rng = np.random.default_rng(31)
        stack = [rng.rayleigh(2.0, (25, 40)) for _ in range(200)]
        adi = compute_adi(stack)
        analytic = math.sqrt((4.0 - math.pi) / math.pi)
        assert adi.values.mean() == approx(analytic, abs=0.05)
        assert np.all(adi.valid)


class TestRadarCodeNetwork:

    def test_road_through_scene_center(self, geoms):
        pts = np.array([
            [ORIGIN_MAP.easting_m - 200.0, ORIGIN_MAP.northing_m],
            [ORIGIN_MAP.easting_m, ORIGIN_MAP.northing_m],
            [ORIGIN_MAP.easting_m + 200.0, ORIGIN_MAP.northing_m],
        ])
        net = RoadNetwork((pts,), ZONE, default_height_m=ROAD_HEIGHT)
        px = radar_code_network(net, geoms["A1"], max_spacing_m=35.0)
        assert px.shape[0] >= 13  # 400 m at <= 35 m spacing
        assert np.all((px >= 0.0) & (px < 4096.0))
        center = np.linalg.norm(px - [2048.0, 2048.0], axis=1).min()
        assert center < 0.5

    def test_out_of_coverage_road_drops_out(self):
        short = synthetic_geometry(ORIGIN, OULU_TRACKS[0], window_s=4.0)
        far = geodetic_to_map(Geodetic(53.6, 13.4, ROAD_HEIGHT), ZONE)
        pts = np.array([[far.easting_m, far.northing_m],
                        [far.easting_m + 50.0, far.northing_m]])
        net = RoadNetwork((pts,), ZONE, default_height_m=ROAD_HEIGHT)
        px = radar_code_network(net, short)
        assert px.shape == (0, 2)


class TestSearchCandidates:

    def _clutter(self, h=300, w=300, ps=()):
        values = np.full((h, w), 0.5)
        for (r, c, v) in ps:
            values[r, c] = v
        return AdiRaster(values, np.ones((h, w), dtype=bool), 20)

    def test_finds_stable_pixel_in_disc(self):
        adi = self._clutter(ps=[(100, 120, 0.05)])
        hits = search_candidates(adi, np.array([[95.0, 115.0]]),
                                 radius_px=70, threshold=0.25)
        assert hits == (RoadHit(100, 120, 0.05),)

    def test_all_above_threshold_yields_nothing(self):
        adi = self._clutter()
        assert search_candidates(adi, np.array([[150.0, 150.0]])) == ()

    def test_fully_invalid_disc_skips_node(self):
        values = np.full((300, 300), 0.05)
        valid = np.zeros((300, 300), dtype=bool)
        valid[200:, 200:] = True
        adi = AdiRaster(values, valid, 20)
        assert search_candidates(adi, np.array([[50.0, 50.0]]),
                                 radius_px=30) == ()
        hits = search_candidates(adi, np.array([[250.0, 250.0]]),
                                 radius_px=30)
        assert len(hits) == 1

    def test_adjacent_nodes_merge_to_one_hit(self):
        adi = self._clutter(ps=[(100, 120, 0.05)])
        nodes = np.array([[90.0, 110.0], [100.0, 120.0], [110.0, 130.0]])
        hits = search_candidates(adi, nodes)
        assert len(hits) == 1

    def test_hits_stay_inside_disc_union_and_threshold(self):
        rng = np.random.default_rng(6)
        values = rng.uniform(0.05, 0.8, (300, 300))
        adi = AdiRaster(values, np.ones((300, 300), dtype=bool), 20)
        nodes = rng.uniform(20.0, 280.0, (12, 2))
        hits = search_candidates(adi, nodes, radius_px=25, threshold=0.25)
        assert hits
        for hit in hits:
            assert hit.adi <= 0.25
            assert hit.adi == values[hit.line, hit.sample]
            dist = np.linalg.norm(nodes - [hit.line, hit.sample], axis=1)
            assert dist.min() <= 25.0 + 1.0  # node rounding slack

    def test_edge_node_clips_cleanly(self):
        adi = self._clutter(h=100, w=100, ps=[(3, 4, 0.02)])
        hits = search_candidates(adi, np.array([[0.0, 0.0]]), radius_px=10)
        assert hits == (RoadHit(3, 4, 0.02),)

    def test_rejects_bad_parameters(self):
        adi = self._clutter(h=50, w=50)
        with pytest.raises(ValidationError):
            search_candidates(adi, np.zeros((1, 2)), radius_px=0)
        with pytest.raises(ValidationError):
            search_candidates(adi, np.zeros((1, 2)), threshold=0.0)

    def test_amplitude_breaks_dispersion_ties(self):
        # noise-free point response: zero dispersion over the whole
        # sidelobe support, brightness alone marks the peak pixel
        values = np.zeros((80, 80))
        amp = np.full((80, 80), 0.01)
        amp[40, 40] = 5.0
        amp[40, 50] = 1.2
        adi = AdiRaster(values, np.ones((80, 80), dtype=bool), 8,
                        mean_amplitude=amp)
        hits = search_candidates(adi, np.array([[42.0, 44.0]]),
                                 radius_px=10)
        assert hits == (RoadHit(40, 40, 0.0),)

    def test_without_amplitude_first_tie_wins(self):
        values = np.zeros((30, 30))
        adi = AdiRaster(values, np.ones((30, 30), dtype=bool), 8)
        hits = search_candidates(adi, np.array([[15.0, 15.0]]),
                                 radius_px=3)
        assert hits == (RoadHit(12, 15, 0.0),)


class TestAdiRaster:

    def test_rejects_bad_fields(self):
        ok = np.zeros((4, 4))
        mask = np.ones((4, 4), dtype=bool)
        with pytest.raises(ValidationError):
            AdiRaster(ok, np.ones((4, 5), dtype=bool), 10)
        with pytest.raises(ValidationError):
            AdiRaster(ok, mask, 1)
        with pytest.raises(ValidationError):
            AdiRaster(ok - 1.0, mask, 10)

    def test_arrays_read_only(self):
        adi = AdiRaster(np.zeros((4, 4)), np.ones((4, 4), dtype=bool), 10)
        with pytest.raises(ValueError):
            adi.values[0, 0] = 1.0

    def test_mean_amplitude_validated(self):
        ok = np.zeros((4, 4))
        mask = np.ones((4, 4), dtype=bool)
        with pytest.raises(ValidationError):
            AdiRaster(ok, mask, 10, mean_amplitude=np.zeros((4, 5)))
        with pytest.raises(ValidationError):
            AdiRaster(ok, mask, 10, mean_amplitude=np.full((4, 4), np.nan))
        adi = AdiRaster(ok, mask, 10, mean_amplitude=np.ones((4, 4)))
        with pytest.raises(ValueError):
            adi.mean_amplitude[0, 0] = 2.0

    def test_compute_adi_carries_the_temporal_mean(self):
        stack = [np.full((3, 3), 2.0), np.full((3, 3), 4.0)]
        adi = compute_adi(stack)
        assert np.array_equal(adi.mean_amplitude, np.full((3, 3), 3.0))


class TestPairHeight:

    def test_cross_heading_pair_recovers_target_height(self, geoms):
        from sargcp.geodesy import map_to_geodetic
        target = geodetic_to_ecef(
            map_to_geodetic(_map_point(25.0, -60.0), 47.0))
        ta = radar_code(geoms["A1"], target)
        td = radar_code(geoms["D1"], target)
        h = _pair_height(geoms["A1"], ta, geoms["D1"], td, ROAD_HEIGHT)
        assert h == approx(47.0, abs=0.1)


class TestMatchAcrossGeometries:

    def test_four_stack_target_with_geocoding_noise(self, geoms):
        rng = np.random.default_rng(17)
        hits = {}
        for sid, geom in geoms.items():
            angle = rng.uniform(0.0, 2.0 * math.pi)
            grid = _map_point(30.0 + 0.5 * math.cos(angle),
                              10.0 + 0.5 * math.sin(angle))
            hits[sid] = [_hit(geom, grid, ROAD_HEIGHT)]
        out = match_across_geometries(hits, geoms, ROAD_HEIGHT)
        assert len(out) == 1
        cand = out[0]
        assert cand.source == "road"
        assert sorted(cand.pixels) == ["A1", "A2", "D1", "D2"]
        assert not cand.is_partial()
        assert cand.quality["spread_m"] < 3.0
        assert cand.quality["max_adi"] == approx(0.05)

    def test_distant_targets_never_merge(self, geoms):
        hits = {sid: [_hit(g, _map_point(0.0, 0.0), ROAD_HEIGHT),
                      _hit(g, _map_point(10.0, 0.0), ROAD_HEIGHT)]
                for sid, g in geoms.items()}
        out = match_across_geometries(hits, geoms, ROAD_HEIGHT)
        assert len(out) == 2
        gap = np.linalg.norm(out[0].position.as_array()
                             - out[1].position.as_array())
        assert gap == approx(10.0, abs=1.5)

    def test_single_stack_candidate_excluded(self, geoms):
        hits = {sid: [] for sid in geoms}
        hits["A1"] = [_hit(geoms["A1"], _map_point(0.0, 0.0), ROAD_HEIGHT)]
        assert match_across_geometries(hits, geoms, ROAD_HEIGHT) == ()

    def test_partial_group_flagged(self, geoms):
        hits = {sid: [] for sid in geoms}
        for sid in ("A1", "D1"):
            hits[sid] = [_hit(geoms[sid], _map_point(5.0, 5.0), ROAD_HEIGHT)]
        out = match_across_geometries(hits, geoms, ROAD_HEIGHT)
        assert len(out) == 1
        assert out[0].is_partial()
        assert sorted(out[0].pixels) == ["A1", "D1"]

    def test_ambiguous_stack_duplicate_dropped(self, geoms):
        hits = {sid: [_hit(g, _map_point(0.0, 0.0), ROAD_HEIGHT)]
                for sid, g in geoms.items()}
        # second hit from A1 one pixel off, inside the linkage distance
        extra = hits["A1"][0]
        hits["A1"] = [extra, RoadHit(extra.line + 1, extra.sample, 0.07)]
        assert match_across_geometries(hits, geoms, ROAD_HEIGHT) == ()

    def test_elevated_scatterer_fails_ground_screen(self, geoms):
        pair = {sid: geoms[sid] for sid in ("A1", "A2")}
        # same-heading geocoding at road level leaves an elevated target
        # grouped, so only the height screen can reject it
        hits = {sid: [_hit(g, _map_point(-20.0, 15.0), ROAD_HEIGHT + 5.0)]
                for sid, g in pair.items()}
        assert match_across_geometries(hits, pair, ROAD_HEIGHT,
                                       threshold_m=5.0) == ()

    def test_ground_scatterer_passes_screen(self, geoms):
        pair = {sid: geoms[sid] for sid in ("A1", "A2")}
        hits = {sid: [_hit(g, _map_point(-20.0, 15.0), ROAD_HEIGHT)]
                for sid, g in pair.items()}
        out = match_across_geometries(hits, pair, ROAD_HEIGHT,
                                      threshold_m=5.0)
        assert len(out) == 1

    def test_cross_heading_grouping_rejects_elevated(self, geoms):
        # geocoding an elevated target at road height throws ascending and
        # descending positions far apart, so the group never forms
        hits = {sid: [_hit(g, _map_point(0.0, 0.0), ROAD_HEIGHT + 6.0)]
                for sid, g in geoms.items()}
        assert match_across_geometries(hits, geoms, ROAD_HEIGHT) == ()

    def test_empty_input(self, geoms):
        assert match_across_geometries({}, geoms, ROAD_HEIGHT) == ()

    def test_missing_geometry_rejected(self, geoms):
        hits = {"X9": [RoadHit(10, 10, 0.1)]}
        with pytest.raises(ValidationError):
            match_across_geometries(hits, geoms, ROAD_HEIGHT)

    def test_stack_order_symmetry(self, geoms):
        hits = {sid: [_hit(g, _map_point(12.0, -8.0), ROAD_HEIGHT)]
                for sid, g in geoms.items()}
        reversed_hits = dict(reversed(list(hits.items())))
        reversed_geoms = dict(reversed(list(geoms.items())))
        a = match_across_geometries(hits, geoms, ROAD_HEIGHT)
        b = match_across_geometries(reversed_hits, reversed_geoms,
                                    ROAD_HEIGHT)
        assert len(a) == len(b) == 1
        assert a[0].pixels == b[0].pixels
        np.testing.assert_allclose(a[0].position.as_array(),
                                   b[0].position.as_array(), atol=1e-9)
