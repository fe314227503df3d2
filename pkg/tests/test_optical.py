"""Tests for optical candidate detection."""

import math

import numpy as np
import pytest
from pytest import approx

from sargcp.errors import ValidationError
from sargcp.geodesy import Geodetic, MapGrid, geodetic_to_map
from sargcp.optical import (
    DetectedObject,
    IcpResult,
    OpticalImage,
    Template,
    bright_points,
    high_boost,
    icp_align,
    ncc_match,
    normalize_intensity,
    radar_code_objects,
    threshold_and_cluster,
)
from sargcp.simulate import MINIMAL_TRACKS, synthetic_geometry

ORIGIN = Geodetic(52.5, 13.4, 40.0)
ZONE = "33N"


def _image(arr, spacing=0.1, origin_e=1000.0, origin_n=2000.0):
    return OpticalImage(np.asarray(arr, dtype=float), origin_e, origin_n,
                        spacing, ZONE)


# independent 1-D route for the sharpening oracle: explicit kernel,
# symmetric padding, plain convolution
def _gaussian_blur_1d(row, sigma):
    radius = int(4.0 * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=float)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(row, radius, mode="symmetric")
    return np.convolve(padded, kernel, mode="valid")


# independent per-window correlation route for the matcher oracle
def _direct_ncc(f, t, i, j):
    win = f[i:i + t.shape[0], j:j + t.shape[1]]
    wd = win - win.mean()
    td = t - t.mean()
    denom = math.sqrt(float((wd * wd).sum()) * float((td * td).sum()))
    if denom == 0.0:
        return 0.0
    return float((wd * td).sum() / denom)


class TestOpticalImage:

    def test_rejects_bad_shapes_and_values(self):
        with pytest.raises(ValidationError):
            _image(np.zeros(5))
        with pytest.raises(ValidationError):
            _image(np.zeros((0, 4)))
        with pytest.raises(ValidationError):
            _image([[1.0, np.nan], [0.0, 0.0]])
        with pytest.raises(ValidationError):
            _image(np.zeros((4, 4)), spacing=0.0)

    def test_coarse_spacing_warns(self):
        with pytest.warns(UserWarning, match="coarser"):
            _image(np.zeros((4, 4)), spacing=0.5)

    def test_fine_spacing_silent(self):
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            _image(np.zeros((4, 4)), spacing=0.1)

    def test_pixel_map_round_trip(self):
        img = _image(np.zeros((10, 10)))
        e, n = img.pixel_to_map(3.0, 7.0)
        assert e == approx(1000.7)
        assert n == approx(1999.7)
        assert img.map_to_pixel(e, n) == approx((3.0, 7.0))

    def test_intensity_read_only(self):
        img = _image(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            img.intensity[0, 0] = 1.0


class TestTemplate:

    def test_rejects_degenerate_patches(self):
        with pytest.raises(ValidationError):
            Template(np.ones((2, 5)), 0.0, 0.0)
        with pytest.raises(ValidationError):
            Template(np.ones((5, 5)), 2.0, 2.0)
        with pytest.raises(ValidationError):
            Template(np.arange(25.0).reshape(5, 5), 5.0, 2.0)

    def test_from_image_defaults_anchor_to_center(self):
        img = _image(np.arange(100.0).reshape(10, 10))
        t = Template.from_image(img, 2, 3, 5, 5)
        assert (t.anchor_row, t.anchor_col) == (2.0, 2.0)
        assert t.patch[0, 0] == img.intensity[2, 3]

    def test_from_image_rejects_out_of_bounds(self):
        img = _image(np.arange(100.0).reshape(10, 10))
        with pytest.raises(ValidationError):
            Template.from_image(img, 8, 8, 5, 5)


class TestNormalize:

    def test_maps_to_unit_interval(self):
        rng = np.random.default_rng(3)
        arr = rng.uniform(-40.0, 200.0, (16, 16))
        out = normalize_intensity(arr)
        assert out.min() == 0.0
        assert out.max() == 1.0

    def test_negative_flips(self):
        arr = np.array([[0.0, 2.0], [4.0, 8.0]])
        out = normalize_intensity(arr, negative=True)
        assert out[0, 0] == 1.0
        assert out[1, 1] == 0.0

    def test_constant_becomes_zero(self):
        assert np.all(normalize_intensity(np.full((3, 3), 7.0)) == 0.0)


class TestHighBoost:

    def test_zero_factor_is_identity(self):
        img = _image(np.random.default_rng(0).uniform(size=(20, 20)))
        assert high_boost(img, 0.0) is img

    def test_constant_image_unchanged(self):
        img = _image(np.full((20, 20), 0.25))
        out = high_boost(img, 2.0, blur_sigma_px=1.5)
        np.testing.assert_allclose(out.intensity, 0.25, atol=1e-12)

    def test_step_edge_matches_direct_convolution(self):
        # constant along rows, step along columns, so the separable blur
        # reduces to the 1-D oracle on every row
        row = np.zeros(64)
        row[32:] = 1.0
        img = _image(np.tile(row, (16, 1)))
        a, sigma = 1.0, 2.0
        out = high_boost(img, a, blur_sigma_px=sigma)
        expected = row + a * (row - _gaussian_blur_1d(row, sigma))
        for r in range(16):
            np.testing.assert_allclose(out.intensity[r], expected, atol=1e-12)

    def test_overshoot_equals_mask_amplitude(self):
        row = np.zeros(64)
        row[32:] = 1.0
        img = _image(np.tile(row, (16, 1)))
        mask = row - _gaussian_blur_1d(row, 2.0)
        out = high_boost(img, 1.0, blur_sigma_px=2.0)
        overshoot = out.intensity.max() - img.intensity.max()
        assert overshoot == approx(mask.max(), abs=1e-12)
        undershoot = img.intensity.min() - out.intensity.min()
        assert undershoot == approx(-mask.min(), abs=1e-12)

    def test_rejects_bad_parameters(self):
        img = _image(np.zeros((4, 4)))
        with pytest.raises(ValidationError):
            high_boost(img, -1.0)
        with pytest.raises(ValidationError):
            high_boost(img, 1.0, blur_sigma_px=0.0)


class TestNccMatch:

    @pytest.fixture()
    def scene(self):
        rng = np.random.default_rng(11)
        # quantized values keep exact-equality comparisons meaningful
        # after affine rescaling
        arr = np.round(rng.uniform(size=(180, 200)), 3)
        arr[40:60, 70:90] = 0.125  # a genuinely constant block
        return _image(arr)

    def test_output_shape(self, scene):
        t = Template(scene.intensity[10:31, 20:39].copy(), 10.0, 9.0)
        scores = ncc_match(scene, t)
        assert scores.shape == (180 - 21 + 1, 200 - 19 + 1)

    def test_scores_bounded(self, scene):
        t = Template(scene.intensity[10:31, 20:39].copy(), 10.0, 9.0)
        scores = ncc_match(scene, t)
        assert scores.min() >= -1.0
        assert scores.max() <= 1.0

    def test_self_match_scores_one_at_cut_location(self, scene):
        t = Template(scene.intensity[100:121, 150:171].copy(), 10.0, 10.0)
        scores = ncc_match(scene, t)
        assert scores[100, 150] == approx(1.0, abs=1e-9)
        assert np.unravel_index(scores.argmax(), scores.shape) == (100, 150)

    def test_matches_direct_formula_at_random_placements(self, scene):
        t = Template(scene.intensity[10:31, 20:39].copy(), 10.0, 9.0)
        scores = ncc_match(scene, t)
        rng = np.random.default_rng(5)
        for _ in range(100):
            i = int(rng.integers(0, scores.shape[0]))
            j = int(rng.integers(0, scores.shape[1]))
            assert scores[i, j] == approx(
                _direct_ncc(scene.intensity, t.patch, i, j), abs=1e-9)

    def test_invariant_under_affine_intensity_transform(self, scene):
        t = Template(scene.intensity[10:31, 20:39].copy(), 10.0, 9.0)
        base = ncc_match(scene, t)
        rescaled = _image(2.0 * scene.intensity + 10.0)
        np.testing.assert_allclose(ncc_match(rescaled, t), base, atol=1e-10)

    def test_constant_window_scores_exactly_zero(self, scene):
        t = Template(scene.intensity[10:15, 20:25].copy(), 2.0, 2.0)
        scores = ncc_match(scene, t)
        # placements fully inside the constant block
        assert np.all(scores[44:52, 74:82] == 0.0)

    def test_template_larger_than_image_rejected(self, scene):
        t = Template(np.arange(25.0).reshape(5, 5), 2.0, 2.0)
        with pytest.raises(ValidationError):
            ncc_match(_image(np.zeros((4, 12))), t)


class TestThresholdAndCluster:

    def _blob_map(self, centers, value=0.9, radius_px=3):
        scores = np.zeros((200, 220))
        yy, xx = np.mgrid[0:200, 0:220]
        for (r, c) in centers:
            scores[(yy - r) ** 2 + (xx - c) ** 2 <= radius_px ** 2] = value
        return scores

    @pytest.fixture()
    def anchor(self):
        patch = np.zeros((7, 7))
        patch[3, 3] = 1.0
        return Template(patch, 3.0, 3.0)

    def test_blob_count_equals_object_count(self, anchor):
        img = _image(np.zeros((220, 240)))
        centers = [(30, 30), (30, 150), (100, 60), (160, 190), (170, 40)]
        objects = threshold_and_cluster(self._blob_map(centers), img, anchor)
        assert len(objects) == 5

    def test_positions_are_hit_centroids(self, anchor):
        img = _image(np.zeros((220, 240)))
        scores = self._blob_map([(50, 80)])
        objects = threshold_and_cluster(scores, img, anchor)
        rows, cols = np.nonzero(scores > 0.6)
        east, north = img.pixel_to_map(rows.mean() + 3.0, cols.mean() + 3.0)
        assert len(objects) == 1
        assert objects[0].position.easting_m == approx(east, abs=1e-9)
        assert objects[0].position.northing_m == approx(north, abs=1e-9)
        assert objects[0].member_count == rows.size
        assert objects[0].mean_score == approx(0.9)

    def test_two_blobs_past_twice_radius_stay_separate(self, anchor):
        img = _image(np.zeros((220, 240)))
        # 40 px = 4.0 m apart, radius 1.5 m
        objects = threshold_and_cluster(self._blob_map([(60, 100), (60, 140)]),
                                        img, anchor)
        assert len(objects) == 2
        gap = abs(objects[0].position.easting_m
                  - objects[1].position.easting_m)
        assert gap == approx(4.0, abs=0.01)

    def test_single_hit_pixel_gives_single_object(self, anchor):
        img = _image(np.zeros((220, 240)))
        scores = np.zeros((200, 220))
        scores[17, 23] = 0.95
        objects = threshold_and_cluster(scores, img, anchor)
        east, north = img.pixel_to_map(20.0, 26.0)
        assert len(objects) == 1
        assert objects[0].member_count == 1
        assert objects[0].mean_score == approx(0.95)
        assert objects[0].position.easting_m == approx(east, abs=1e-12)
        assert objects[0].position.northing_m == approx(north, abs=1e-12)

    def test_nothing_above_threshold(self, anchor):
        img = _image(np.zeros((220, 240)))
        assert threshold_and_cluster(np.full((200, 220), 0.3), img,
                                     anchor) == ()

    def test_output_sorted_and_deterministic(self, anchor):
        img = _image(np.zeros((220, 240)))
        scores = self._blob_map([(30, 180), (90, 20), (150, 100)])
        first = threshold_and_cluster(scores, img, anchor)
        second = threshold_and_cluster(scores.copy(), img, anchor)
        assert first == second
        eastings = [o.position.easting_m for o in first]
        assert eastings == sorted(eastings)

    def test_rejects_bad_threshold(self, anchor):
        img = _image(np.zeros((220, 240)))
        with pytest.raises(ValidationError):
            threshold_and_cluster(np.zeros((200, 220)), img, anchor,
                                  threshold=1.5)

    def test_object_validation(self):
        pos = MapGrid(0.0, 0.0, ZONE)
        with pytest.raises(ValidationError):
            DetectedObject(pos, 0, 0.9)
        with pytest.raises(ValidationError):
            DetectedObject(pos, 3, 0.0)
        with pytest.raises(ValidationError):
            DetectedObject(pos, 3, 1.2)


class TestRadarCodeObjects:

    def test_scene_origin_maps_to_image_center(self):
        geom = synthetic_geometry(ORIGIN, MINIMAL_TRACKS[0])
        obj = DetectedObject(geodetic_to_map(ORIGIN), 4, 0.8)
        px = radar_code_objects([obj], ORIGIN.height_m, geom)
        assert px.shape == (1, 2)
        assert px[0, 0] == approx(2048.0, abs=0.5)
        assert px[0, 1] == approx(2048.0, abs=0.5)


class TestBrightPoints:

    def test_picks_top_percentile(self):
        arr = np.zeros((100, 100))
        arr[10, 20] = 5.0
        arr[40, 70] = 7.0
        pts = bright_points(arr, percentile=99.5)
        assert pts.shape[1] == 2
        assert [10.0, 20.0] in pts.tolist()
        assert [40.0, 70.0] in pts.tolist()

    def test_rejects_bad_raster(self):
        with pytest.raises(ValidationError):
            bright_points(np.zeros(10))


class TestIcpAlign:

    @pytest.fixture()
    def grid(self):
        rng = np.random.default_rng(21)
        base = np.array([(40.0 * i + 20.0, 40.0 * j + 20.0)
                         for i in range(8) for j in range(8)])
        return base + rng.uniform(-6.0, 6.0, base.shape)

    def test_identical_sets_align_exactly(self, grid):
        res = icp_align(grid, grid)
        assert res.angle_rad == 0.0
        assert res.translation_px.tolist() == [0.0, 0.0]
        assert res.mse_px2 == 0.0
        assert not res.diverged
        assert res.matched_fraction() == 1.0
        np.testing.assert_array_equal(res.matches, np.arange(len(grid)))

    def test_recovers_pure_translation(self, grid):
        # the recovered transform maps detections onto the reference, so
        # it is the negative of the offset applied to the detections
        detected = grid + np.array([4.2, -1.7])
        res = icp_align(detected, grid)
        assert res.translation_px[0] == approx(-4.2, abs=1e-6)
        assert res.translation_px[1] == approx(1.7, abs=1e-6)
        assert res.angle_rad == approx(0.0, abs=1e-8)
        assert res.mse_px2 < 1e-12

    def test_recovers_small_rotation(self, grid):
        theta = 0.01
        c, s = math.cos(theta), math.sin(theta)
        center = grid.mean(axis=0)
        detected = (grid - center) @ np.array([[c, -s], [s, c]]).T + center
        res = icp_align(detected, grid)
        assert res.angle_rad == approx(-theta, abs=1e-8)
        assert res.mse_px2 < 1e-10

    def test_mostly_correct_matching_under_noise_and_spurious(self, grid):
        # 2 px amplitude jitter stays inside the 3 px snap gate even at
        # the corner (sqrt(8) px), so nearly everything must match
        rng = np.random.default_rng(8)
        spurious = rng.uniform(0.0, 340.0, (len(grid) // 10, 2))
        reference = np.vstack([grid, spurious])
        detected = grid + rng.uniform(-2.0, 2.0, grid.shape) \
            + np.array([4.0, -2.0])
        res = icp_align(detected, reference)
        correct = np.count_nonzero(res.matches == np.arange(len(grid)))
        assert correct / len(grid) >= 0.90

    def test_mse_non_increasing_until_convergence(self, grid):
        rng = np.random.default_rng(9)
        detected = grid + rng.normal(0.0, 1.0, grid.shape) \
            + np.array([3.0, 2.0])
        res = icp_align(detected, grid)
        assert not res.diverged
        assert np.all(np.diff(res.mse_history) <= 1e-9)

    def test_gating_leaves_far_detections_unmatched(self, grid):
        # a false detection in the middle of a grid cell sits ~20 px from
        # every reference point: it tilts the full least-squares fit only
        # by its 1/65 weight, then fails the 3 px snap gate
        detected = np.vstack([grid, [[180.0, 180.0]]])
        res = icp_align(detected, grid)
        assert res.matches[-1] == -1
        assert res.matched_fraction() == approx(len(grid)
                                                / (len(grid) + 1))

    def test_single_point_aligns_without_rotation(self):
        res = icp_align(np.array([[5.0, 5.0]]), np.array([[8.0, 1.0]]))
        assert res.mse_px2 == approx(0.0, abs=1e-20)
        assert res.angle_rad == 0.0

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValidationError):
            icp_align(np.zeros((0, 2)), np.ones((3, 2)))
        with pytest.raises(ValidationError):
            icp_align(np.ones((3, 2)), np.ones((3, 3)))

    def test_result_arrays_read_only(self, grid):
        res = icp_align(grid, grid)
        with pytest.raises(ValueError):
            res.aligned_px[0, 0] = 1.0
