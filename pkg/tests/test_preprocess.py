import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from forestseg.core import LabeledCloud, SemanticLabel
from forestseg.preprocess import (PreprocessConfig, filter_low_density_tiles, sample_boxes,
                                  tile_cloud, voxel_downsample)


def cloud_from(points, semantic=None):
    return LabeledCloud(np.asarray(points, dtype=np.float64), semantic=semantic)


class TestTileCloud:
    def test_single_tile(self, rng):
        tiles = tile_cloud(cloud_from(rng.random((20, 3)) * 0.9), tile_size=1.0)
        assert len(tiles) == 1
        assert len(tiles[0].indices) == 20
        assert tiles[0].density == pytest.approx(20.0)

    def test_four_corners_hand_quantized(self):
        pts = [[0.1, 0.1, 0], [1.5, 0.2, 0], [0.3, 1.9, 0], [1.8, 1.7, 0]]
        tiles = tile_cloud(cloud_from(pts), tile_size=1.0)
        assert len(tiles) == 4
        assert all(len(t.indices) == 1 for t in tiles)

    def test_empty_cloud(self):
        assert tile_cloud(cloud_from(np.empty((0, 3))), 1.0) == []

    def test_bad_tile_size(self):
        with pytest.raises(ValueError, match="positive"):
            tile_cloud(cloud_from([[0, 0, 0]]), -1.0)

    def test_every_point_in_exactly_one_tile(self, rng):
        cloud = cloud_from(rng.random((400, 3)) * 7)
        tiles = tile_cloud(cloud, 1.5)
        seen = np.concatenate([t.indices for t in tiles])
        assert sorted(seen.tolist()) == list(range(400))


class TestFilterLowDensityTiles:
    def make(self):
        dense = np.random.default_rng(0).random((100, 3)) * [1, 1, 5]          # 100 pts/m^2
        sparse = np.random.default_rng(1).random((1, 3)) * [1, 1, 5] + [3, 3, 0]  # 1 pt/m^2
        return cloud_from(np.vstack([dense, sparse]))

    def test_zero_threshold_keeps_all(self):
        cloud = self.make()
        tiles = tile_cloud(cloud, 1.0)
        assert len(filter_low_density_tiles(cloud, tiles, 0.0)) == len(cloud)

    def test_direct_density_comparison(self):
        cloud = self.make()
        tiles = tile_cloud(cloud, 1.0)
        kept = filter_low_density_tiles(cloud, tiles, 10.0)
        assert len(kept) == 100

    def test_saturating_threshold(self):
        cloud = self.make()
        tiles = tile_cloud(cloud, 1.0)
        assert len(filter_low_density_tiles(cloud, tiles, 1e9)) == 0

    @given(st.floats(min_value=0, max_value=50), st.floats(min_value=0, max_value=50))
    def test_monotone_in_threshold(self, t1, t2):
        lo, hi = min(t1, t2), max(t1, t2)
        rng = np.random.default_rng(7)
        cloud = cloud_from(rng.random((300, 3)) * [5, 5, 2])
        tiles = tile_cloud(cloud, 1.0)
        kept_lo = filter_low_density_tiles(cloud, tiles, lo)
        kept_hi = filter_low_density_tiles(cloud, tiles, hi)
        assert len(kept_hi) <= len(kept_lo)
        # and the high-threshold survivors are a subset of the low-threshold ones
        lo_set = {tuple(p) for p in kept_lo.xyz}
        assert all(tuple(p) in lo_set for p in kept_hi.xyz)


class TestVoxelDownsample:
    def test_single_voxel_collapses_to_member(self, rng):
        pts = rng.random((8, 3)) * 0.009 + 3.0
        cloud = cloud_from(pts)
        out = voxel_downsample(cloud, 0.05, seed=2)
        assert len(out) == 1
        assert any(np.array_equal(out.xyz[0], p) for p in pts)

    def test_spaced_points_unchanged(self):
        pts = np.array([[0.05, 0.05, 0.05], [0.35, 0.05, 0.05], [0.05, 0.65, 0.05]])
        out = voxel_downsample(cloud_from(pts), 0.1, seed=0)
        assert len(out) == 3

    def test_count_matches_quantization_oracle(self, rng):
        pts = rng.random((10_000, 3))
        out = voxel_downsample(cloud_from(pts), 0.1, seed=5)
        expected = {tuple(np.floor(p / 0.1).astype(int)) for p in pts}
        assert len(out) == len(expected)

    def test_output_subset_and_idempotent(self, rng):
        cloud = cloud_from(rng.random((2000, 3)) * 2)
        once = voxel_downsample(cloud, 0.15, seed=9)
        original = {tuple(p) for p in cloud.xyz}
        assert all(tuple(p) in original for p in once.xyz)
        twice = voxel_downsample(once, 0.15, seed=9)
        assert np.array_equal(once.xyz, twice.xyz)

    def test_deterministic_and_seed_sensitive(self, rng):
        cloud = cloud_from(rng.random((500, 3)) * 0.3)
        a = voxel_downsample(cloud, 0.1, seed=1)
        b = voxel_downsample(cloud, 0.1, seed=1)
        assert np.array_equal(a.xyz, b.xyz)

    def test_labels_carried_through(self, rng):
        pts = rng.random((100, 3))
        sem = np.full(100, SemanticLabel.STEM, dtype=np.int64)
        out = voxel_downsample(LabeledCloud(pts, semantic=sem), 0.2, seed=0)
        assert out.semantic is not None
        assert np.all(out.semantic == SemanticLabel.STEM)

    def test_bad_spacing(self):
        with pytest.raises(ValueError, match="positive"):
            voxel_downsample(cloud_from([[0, 0, 0]]), 0.0)


class TestSampleBoxes:
    def test_single_box_at_cloud_minimum(self, rng):
        pts = rng.random((1500, 3)) * [5, 5, 7] + [10, 20, 30]
        cfg = PreprocessConfig()
        boxes = sample_boxes(cloud_from(pts), cfg, seed=0)
        assert len(boxes) == 1
        assert np.allclose(boxes[0].offset, pts.min(axis=0))
        assert len(boxes[0].indices) == 1500

    def test_min_points_drop_scaled(self, rng):
        # threshold 10, box holds 9 points and no other coverage
        pts = rng.random((9, 3)) * [5, 5, 7]
        cfg = PreprocessConfig(min_points_per_box=10, max_points_per_box=100)
        assert sample_boxes(cloud_from(pts), cfg, seed=0) == []

    def test_stride_arithmetic_x_axis(self, rng):
        # 12 x 6 x 8 m cloud, box [6,6,8], overlap 0.5 -> x origins at 0, 3, 6
        pts = rng.random((5000, 3)) * [12, 6, 8]
        pts = np.vstack([pts, [[0, 0, 0]], [[12, 6, 8]]])  # pin the bounding box
        cfg = PreprocessConfig(min_points_per_box=1)
        boxes = sample_boxes(cloud_from(pts), cfg, seed=0)
        x_origins = sorted({round(b.offset[0], 6) for b in boxes})
        assert x_origins == [0.0, 3.0, 6.0]

    def test_members_inside_and_restore_exact(self, rng):
        pts = rng.random((2000, 3)) * [7, 7, 9] + [3.123456, -2.5, 0.7]
        cfg = PreprocessConfig(min_points_per_box=1)
        cloud = cloud_from(pts)
        for box in sample_boxes(cloud, cfg, seed=3):
            assert np.all(box.xyz >= -1e-12)
            assert np.all(box.xyz <= np.asarray(box.extent) * (1 + 1e-12) + 1e-12)
            assert np.array_equal(box.restore(), cloud.xyz[box.indices])

    def test_max_points_subsample_deterministic(self, rng):
        pts = rng.random((3000, 3)) * [5, 5, 7]
        cfg = PreprocessConfig(min_points_per_box=10, max_points_per_box=500)
        a = sample_boxes(cloud_from(pts), cfg, seed=4)
        b = sample_boxes(cloud_from(pts), cfg, seed=4)
        assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))
        assert all(len(x.indices) == 500 for x in a)

    def test_degenerate_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            PreprocessConfig(sample_box_overlap=(1.0, 0.5, 0.5))
