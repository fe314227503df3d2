"""Scene generator and truth-scoring tests."""

import configparser
import hashlib
from pathlib import Path

import numpy as np
import pytest

from sargcp.errors import ValidationError
from sargcp.geodesy import enu_basis, geodetic_to_ecef
from sargcp.geometry import radar_code, timing_to_pixel
from sargcp.io_formats import read_metadata, read_point_table, read_raster_tile
from sargcp.pta import SlcChip, analyze_chip
from sargcp.simulate import (
    CHIP_SIZE,
    MINIMAL_TRACKS,
    OULU_TRACKS,
    SimConfig,
    build_scene,
    point_response,
    preset,
    score_against_truth,
)


def _tiny(seed=3, **overrides):
    """Smallest config that still exercises every artifact path."""
    base = dict(tracks=MINIMAL_TRACKS, epochs=2, crop_px=128,
                pole_spacing_m=20.0, road_half_length_m=30.0,
                facades=False, with_clouds=False, with_optical=False,
                optical_spacing_m=0.2)
    base.update(overrides)
    return SimConfig(seed=seed, **base)


def _tree_hash(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def tiny_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    cfg = _tiny()
    return cfg, build_scene(cfg, out), out


@pytest.fixture(scope="module")
def city_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("city")
    cfg = SimConfig(seed=11, tracks=MINIMAL_TRACKS, epochs=2,
                    crop_px=128, pole_spacing_m=20.0,
                    road_half_length_m=30.0, optical_spacing_m=0.2,
                    cloud_outlier_fraction=0.1)
    return cfg, build_scene(cfg, out), out


@pytest.fixture(scope="module")
def score_truth(tmp_path_factory):
    return build_scene(_tiny(seed=5), tmp_path_factory.mktemp("score"))


class TestConfig:

    def test_presets_cover_both_heading_mixes(self):
        assert [t.heading[0] for t in preset("oulu").tracks] == \
            ["a", "d", "a", "d"]
        assert len(preset("berlin").tracks) == 2
        assert preset("minimal").with_clouds is False
        with pytest.raises(ValidationError):
            preset("nonesuch")

    def test_rejects_bad_fields(self):
        with pytest.raises(ValidationError):
            SimConfig(seed=1, epochs=1)
        with pytest.raises(ValidationError):
            SimConfig(seed=1, tracks=())
        with pytest.raises(ValidationError):
            SimConfig(seed=1, tracks=MINIMAL_TRACKS + MINIMAL_TRACKS)
        with pytest.raises(ValidationError):
            SimConfig(seed=1, crop_px=64)
        with pytest.raises(ValidationError):
            SimConfig(seed=1, epochs=4, corrupt_epochs=(4,))


class TestPointResponse:

    def test_unit_peak_at_integer_position(self):
        chip = point_response(32, 10.0, 20.0)
        assert chip[10, 20] == pytest.approx(1.0, abs=1e-15)
        assert np.abs(chip).max() == pytest.approx(1.0, abs=1e-12)

    def test_oversampled_peak_lands_on_injected_offset(self):
        chip = point_response(32, 16.3, 15.8, amplitude=3.0)
        res = analyze_chip(SlcChip(chip, 0, 0), factor=32)
        assert res.peak.line == pytest.approx(16.3, abs=1e-4)
        assert res.peak.sample == pytest.approx(15.8, abs=1e-4)

    def test_response_is_periodic_on_the_chip_grid(self):
        a = point_response(32, 0.4, 0.4)
        b = point_response(32, 32.4, 0.4)
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestBuildScene:

    def test_same_seed_reproduces_every_byte(self, tmp_path):
        cfg = _tiny(seed=9)
        build_scene(cfg, tmp_path / "a")
        build_scene(cfg, tmp_path / "b")
        assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")

    def test_listed_files_all_exist(self, tiny_scene):
        _, truth, out = tiny_scene
        for role, val in truth.files.items():
            rels = [val] if isinstance(val, str) else val
            for rel in rels:
                assert (out / rel).is_file(), (role, rel)

    def test_manifest_parses_and_matches_scene(self, tiny_scene):
        cfg, truth, out = tiny_scene
        cp = configparser.ConfigParser()
        cp.read(out / "scene_manifest.ini")
        assert cp["scene"]["zone"] == truth.zone
        assert int(cp["scene"]["epochs"]) == cfg.epochs
        assert cp["scene"]["stacks"] == "A1,D1"
        assert float(cp["scene"]["center_east"]) == truth.center_east
        names = cp["files"]["chips"].split(",")
        assert len(names) == len(truth.files["chips"])

    def test_noiseless_uninjected_pixels_equal_radar_code(self, tmp_path):
        cfg = _tiny(inject_errors=False)
        truth = build_scene(cfg, tmp_path)
        geoms = {}
        for rel in truth.files["meta"]:
            rec = read_metadata(tmp_path / rel)
            geoms[rec.acquisition_id] = rec.geometry
        for ob in truth.observations:
            target = truth.targets_of_kind("pole")[
                int(ob.target_id.removeprefix("pole"))]
            geom = geoms[ob.acquisition_id]
            px = timing_to_pixel(geom, radar_code(geom, target.position))
            assert ob.line == pytest.approx(px.line, abs=1e-9)
            assert ob.sample == pytest.approx(px.sample, abs=1e-9)

    def test_injected_errors_move_the_observed_pixels(self, tiny_scene):
        cfg, truth, out = tiny_scene
        rec = read_metadata(out / truth.files["meta"][0])
        geom = rec.geometry
        ob = truth.observations[0]
        target = truth.targets_of_kind("pole")[0]
        px = timing_to_pixel(geom, radar_code(geom, target.position))
        assert abs(ob.sample - px.sample) > 1.0  # path delay, whole pixels

    def test_chips_reproduce_observed_peaks(self, tiny_scene):
        _, truth, out = tiny_scene
        for rel in truth.files["chips"][:6]:
            tile = read_raster_tile(out / rel)
            res = analyze_chip(SlcChip(tile.data, tile.first_line,
                                       tile.first_sample), factor=32)
            hits = [o for o in truth.observations
                    if abs(o.line - res.peak.line) < 0.5
                    and abs(o.sample - res.peak.sample) < 0.5]
            assert hits, rel
            ob = min(hits, key=lambda o: abs(o.line - res.peak.line))
            assert res.peak.line == pytest.approx(ob.line, abs=1e-4)
            assert res.peak.sample == pytest.approx(ob.sample, abs=1e-4)

    def test_amplitude_raster_carries_the_chip_windows(self, tmp_path):
        # pole spacing above the chip width, so no window overlaps another
        truth = build_scene(_tiny(pole_spacing_m=30.0), tmp_path)
        tile = read_raster_tile(tmp_path / truth.files["amp"][0])
        acq = Path(truth.files["amp"][0]).stem
        checked = 0
        for rel in truth.files["chips"]:
            if not Path(rel).stem.startswith(acq):
                continue
            chip = read_raster_tile(tmp_path / rel)
            r = chip.first_line - tile.first_line
            c = chip.first_sample - tile.first_sample
            window = tile.data[r:r + CHIP_SIZE, c:c + CHIP_SIZE]
            np.testing.assert_array_equal(
                window, np.abs(chip.data).astype(np.float32))
            checked += 1
        assert checked == 2

    def test_corrupt_epoch_scales_the_response_down(self, tmp_path):
        truth = build_scene(_tiny(corrupt_epochs=(1,)), tmp_path)
        power_db = {}
        for rel in truth.files["chips"]:
            tile = read_raster_tile(tmp_path / rel)
            res = analyze_chip(SlcChip(tile.data, tile.first_line,
                                       tile.first_sample), factor=8)
            stack, epoch = Path(rel).stem.split("_")[:2]
            power_db.setdefault((stack, int(epoch)), []).append(
                res.peak_power_db)
        for stack in ("A1", "D1"):
            drops = np.array(power_db[(stack, 1)]) \
                - np.array(power_db[(stack, 0)])
            np.testing.assert_allclose(drops, -20.0, atol=1e-3)

    def test_road_table_spans_the_pole_row(self, tiny_scene):
        cfg, truth, out = tiny_scene
        table = read_point_table(out / "roads.pt")
        easts = [row[2] for row in table.rows]
        assert min(easts) == pytest.approx(
            truth.center_east - cfg.road_half_length_m)
        assert max(easts) == pytest.approx(
            truth.center_east + cfg.road_half_length_m)

    def test_truth_tables_round_trip_the_dataclasses(self, tiny_scene):
        _, truth, out = tiny_scene
        targets = read_point_table(out / "truth_targets.pt")
        assert len(targets) == len(truth.targets)
        obs = read_point_table(out / "truth_observations.pt")
        assert len(obs) == len(truth.observations)
        first = obs.to_dicts()[0]
        ob = truth.observations[0]
        assert first["target_id"] == ob.target_id
        assert first["line"] == ob.line

    def test_observation_lookup(self, tiny_scene):
        _, truth, _ = tiny_scene
        ob = truth.observation("pole000", "A1", 1)
        assert ob.epoch == 1 and ob.stack_id == "A1"
        with pytest.raises(KeyError):
            truth.observation("pole000", "A1", 99)


class TestFullArtifacts:

    def test_clouds_share_ids_and_carry_the_stack_shift(self, city_scene):
        cfg, truth, out = city_scene
        tables = {Path(rel).stem: read_point_table(out / rel)
                  for rel in truth.files["clouds"]}
        ids_a = {r[0] for r in tables["A1"].rows}
        ids_d = {r[0] for r in tables["D1"].rows}
        real = {t.target_id for t in truth.targets}
        assert real <= ids_a and real <= ids_d
        assert any(i.startswith("D1_sp") for i in ids_d)

        by_id = {r[0]: r for r in tables["D1"].rows}
        deltas = np.array([[by_id[t.target_id][1] - t.east,
                            by_id[t.target_id][2] - t.north,
                            by_id[t.target_id][3] - t.height]
                           for t in truth.targets])
        np.testing.assert_allclose(deltas.mean(axis=0), cfg.cloud_shift_m,
                                   atol=0.05)

    def test_facade_points_get_the_sharp_height_precision(self, city_scene):
        _, truth, out = city_scene
        table = read_point_table(out / truth.files["clouds"][0])
        prec = {r[0]: r[5] for r in table.rows}
        for t in truth.targets:
            if t.target_id.startswith("fac"):
                assert prec[t.target_id] < 1.0
            elif t.kind == "pole":
                assert prec[t.target_id] > 1.0

    def test_optical_shadows_sit_south_of_the_poles(self, city_scene):
        cfg, truth, out = city_scene
        tile = read_raster_tile(out / "optical.rt")
        geo = read_point_table(out / "optical_geo.pt").to_dicts()[0]
        assert geo["zone"] == truth.zone
        for t in truth.targets_of_kind("pole"):
            row = round((geo["origin_northing"] - t.north) / geo["spacing_m"])
            col = round((t.east - geo["origin_easting"]) / geo["spacing_m"])
            assert tile.data[row + 5, col] == pytest.approx(0.18, abs=1e-6)
            assert tile.data[row, col] == pytest.approx(0.95, abs=1e-6)

    def test_manifest_template_rect_frames_one_shadow(self, city_scene):
        _, truth, out = city_scene
        cp = configparser.ConfigParser()
        cp.read(out / "scene_manifest.ini")
        sec = cp["optical"]
        tile = read_raster_tile(out / "optical.rt")
        r0 = int(sec["template_line0"])
        c0 = int(sec["template_sample0"])
        patch = tile.data[r0:r0 + int(sec["template_height"]),
                          c0:c0 + int(sec["template_width"])]
        assert patch.min() == pytest.approx(0.18, abs=1e-6)
        assert patch.max() == pytest.approx(0.95, abs=1e-6)


class TestScoreAgainstTruth:

    def test_exact_positions_score_perfectly(self, score_truth):
        poles = score_truth.targets_of_kind("pole")
        rep = score_against_truth([t.position for t in poles], score_truth)
        assert rep.precision == 1.0 and rep.recall == 1.0
        assert rep.rmse_3d_m == 0.0 and rep.worst_m == 0.0
        assert [m[0] for m in rep.matches] == [t.target_id for t in poles]

    def test_uniform_up_bias_lands_in_the_up_component(self, score_truth):
        up = enu_basis(geodetic_to_ecef(score_truth.config.origin))[2]
        pts = [t.position.as_array() + 0.10 * up
               for t in score_truth.targets_of_kind("pole")]
        rep = score_against_truth(pts, score_truth)
        assert rep.bias_enu[2] == pytest.approx(0.10, abs=1e-6)
        assert abs(rep.bias_enu[0]) < 1e-6 and abs(rep.bias_enu[1]) < 1e-6
        assert rep.rmse_enu[2] == pytest.approx(0.10, abs=1e-6)

    def test_spurious_point_costs_precision_not_recall(self, score_truth):
        pts = [t.position.as_array() for t in score_truth.targets_of_kind("pole")]
        pts.append(pts[0] + 50.0)
        rep = score_against_truth(pts, score_truth)
        assert rep.recall == 1.0
        assert rep.precision == pytest.approx(len(pts[:-1]) / len(pts))

    def test_result_is_input_order_invariant(self, score_truth):
        rng = np.random.default_rng(0)
        pts = [t.position.as_array() + rng.normal(0.0, 0.02, 3)
               for t in score_truth.targets_of_kind("pole")]
        a = score_against_truth(pts, score_truth)
        b = score_against_truth(pts[::-1], score_truth)
        assert a.rmse_3d_m == b.rmse_3d_m and a.bias_enu == b.bias_enu
        assert [m[0] for m in a.matches] == [m[0] for m in b.matches]

    def test_two_solutions_cannot_claim_one_target(self, score_truth):
        t0 = score_truth.targets_of_kind("pole")[0]
        pts = [t0.position.as_array(), t0.position.as_array() + 0.3]
        rep = score_against_truth(pts, score_truth)
        assert len(rep.matches) == 1
        assert rep.precision == 0.5

    def test_chi2_rate_reflects_the_claimed_covariance(self, score_truth):
        up = enu_basis(geodetic_to_ecef(score_truth.config.origin))[2]
        pts = [t.position.as_array() + 0.10 * up
               for t in score_truth.targets_of_kind("pole")]
        honest = np.tile(np.eye(3) * 0.05 ** 2, (len(pts), 1, 1))
        smug = np.tile(np.eye(3) * 0.02 ** 2, (len(pts), 1, 1))
        assert score_against_truth(pts, score_truth,
                                   covariances=honest).chi2_pass_rate == 1.0
        assert score_against_truth(pts, score_truth,
                                   covariances=smug).chi2_pass_rate == 0.0

    def test_empty_and_invalid_inputs(self, score_truth):
        rep = score_against_truth([], score_truth)
        assert rep.precision == 1.0 and rep.recall == 0.0
        assert rep.rmse_3d_m is None and rep.chi2_pass_rate is None
        with pytest.raises(ValidationError):
            score_against_truth([], score_truth, kinds=("facade",))
        with pytest.raises(ValidationError):
            score_against_truth([], score_truth, match_radius_m=0.0)
        with pytest.raises(ValidationError):
            score_against_truth(
                [score_truth.targets[0].position], score_truth,
                covariances=np.eye(3))
