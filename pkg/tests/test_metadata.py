import numpy as np
import pytest

from direg3d.errors import EmptyDataset, ShapeMismatch
from direg3d.geometry import (
    BoundingBox,
    bbox_center_ray,
    crop_intrinsics,
    rotation_to_ray,
    square_crop_box,
)
from direg3d.metadata import (
    METADATA_DIM,
    MetadataVector,
    NormalizationStats,
    compute_metadata,
    fit_normalization,
    normalize,
)

from helpers import make_camera


class TestComputeMetadata:
    def test_centered_box_zero_distance_identity_rotation(self, camera):
        box = BoundingBox(camera.cx - 40, camera.cy - 40, camera.cx + 40, camera.cy + 40)
        meta = compute_metadata(camera, box, crop_size=128)
        assert meta.d_center == 0.0
        np.testing.assert_array_equal(meta.rotation, np.eye(3))

    def test_scale_ratio_one_when_margined_side_equals_crop(self, camera):
        side = 128 / 1.25
        box = BoundingBox(100.0, 100.0, 100.0 + side, 100.0 + side)
        meta = compute_metadata(camera, box, crop_size=128)
        assert meta.scale_ratio == pytest.approx(1.0)

    def test_blocks_match_geometry_module_bitwise(self, camera):
        rng = np.random.default_rng(41)
        for _ in range(50):
            x0, y0 = rng.uniform(50, 400, size=2)
            box = BoundingBox(x0, y0, x0 + rng.uniform(20, 120), y0 + rng.uniform(20, 80))
            meta = compute_metadata(camera, box, crop_size=64)
            square = square_crop_box(box, 1.25)
            assert np.array_equal(meta.corners, box.as_array())
            assert np.array_equal(
                meta.rotation, rotation_to_ray(bbox_center_ray(camera, box))
            )
            assert np.array_equal(
                meta.intrinsics, crop_intrinsics(camera, square, 64).matrix
            )
            assert np.array_equal(meta.distortion, np.array(camera.distortion))
            center = box.center
            assert meta.d_center == np.hypot(center[0] - camera.cx, center[1] - camera.cy)

    def test_deterministic(self, camera, box):
        a = compute_metadata(camera, box, 128)
        b = compute_metadata(camera, box, 128)
        assert np.array_equal(a.raw, b.raw)

    def test_layout_length(self, camera, box):
        assert compute_metadata(camera, box, 128).raw.shape == (METADATA_DIM,)

    def test_rejects_wrong_length(self):
        with pytest.raises(ShapeMismatch):
            MetadataVector(np.zeros(27))


class TestFitNormalization:
    def test_single_vector_min_equals_max(self, camera, box):
        meta = compute_metadata(camera, box, 128)
        stats = fit_normalization([meta])
        assert np.array_equal(stats.minimum, meta.raw)
        assert np.array_equal(stats.maximum, meta.raw)

    def test_two_vectors_brute_force(self):
        rng = np.random.default_rng(43)
        a, b = rng.normal(size=(2, METADATA_DIM))
        stats = fit_normalization([MetadataVector(a), MetadataVector(b)])
        for i in range(METADATA_DIM):
            assert stats.minimum[i] == min(a[i], b[i])
            assert stats.maximum[i] == max(a[i], b[i])

    def test_constant_dimension_flagged(self):
        a = np.zeros(METADATA_DIM)
        b = np.zeros(METADATA_DIM)
        b[0] = 5.0
        stats = fit_normalization([MetadataVector(a), MetadataVector(b)])
        assert not stats.constant_dims[0]
        assert stats.constant_dims[1:].all()

    def test_empty_dataset_raises(self):
        with pytest.raises(EmptyDataset):
            fit_normalization([])


class TestNormalize:
    @pytest.fixture
    def stats(self):
        lo = np.full(METADATA_DIM, -2.0)
        hi = np.full(METADATA_DIM, 6.0)
        hi[3] = -2.0  # constant dim
        return NormalizationStats(lo, hi)

    def test_endpoints(self, stats):
        out = normalize(MetadataVector(stats.minimum.copy()), stats)
        assert out[0] == -1.0
        out = normalize(MetadataVector(stats.maximum.copy()), stats)
        assert out[0] == 1.0

    def test_midpoint_is_zero(self, stats):
        mid = 0.5 * (stats.minimum + stats.maximum)
        out = normalize(MetadataVector(mid), stats)
        assert out[0] == pytest.approx(0.0)

    def test_clamps_out_of_range(self, stats):
        v = np.full(METADATA_DIM, 100.0)
        out = normalize(MetadataVector(v), stats)
        assert out[0] == 1.0
        v = np.full(METADATA_DIM, -100.0)
        out = normalize(MetadataVector(v), stats)
        assert out[0] == -1.0

    def test_constant_dim_maps_to_zero(self, stats):
        v = np.full(METADATA_DIM, 3.0)
        out = normalize(MetadataVector(v), stats)
        assert out[3] == 0.0

    def test_always_in_unit_interval(self, stats):
        rng = np.random.default_rng(47)
        for _ in range(200):
            v = rng.normal(scale=50.0, size=METADATA_DIM)
            out = normalize(MetadataVector(v), stats)
            assert (out >= -1.0).all() and (out <= 1.0).all()

    def test_monotone_per_dimension(self, stats):
        rng = np.random.default_rng(53)
        for _ in range(100):
            a = rng.normal(scale=10.0, size=METADATA_DIM)
            b = a + np.abs(rng.normal(scale=5.0, size=METADATA_DIM))
            out_a = normalize(MetadataVector(a), stats)
            out_b = normalize(MetadataVector(b), stats)
            assert (out_b >= out_a - 1e-15).all()
