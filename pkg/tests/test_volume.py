import numpy as np
import pytest

from voxfuse.errors import AllocationError, ConfigError
from voxfuse.volume import VolumeConfig, new_volume, snapshot_stats


def small_config(**overrides):
    base = dict(dims=(8, 8, 8), voxel_size=0.01, origin=(0, 0, 0), truncation=0.05)
    base.update(overrides)
    return VolumeConfig(**base)


class TestVolumeConfig:
    def test_truncation_below_voxel_size_rejected(self):
        with pytest.raises(ConfigError):
            VolumeConfig(dims=(1, 1, 1), voxel_size=0.01, truncation=0.005)

    def test_zero_dims_rejected(self):
        with pytest.raises(ConfigError):
            small_config(dims=(0, 8, 8))

    def test_unknown_precision_rejected(self):
        with pytest.raises(ConfigError):
            small_config(storage_precision="double")

    def test_required_bytes_half(self):
        cfg = VolumeConfig(dims=(512, 512, 256), voxel_size=0.01, truncation=0.05,
                           storage_precision="half")
        assert cfg.required_bytes == 512 * 512 * 256 * (2 + 2 + 1 + 2)


class TestNewVolume:
    def test_everything_starts_at_zero(self):
        vol = new_volume(small_config())
        assert vol.weight.size == 8 * 8 * 8
        for grid in (vol.tsdf, vol.weight, vol.label, vol.score):
            assert np.all(np.asarray(grid) == 0)

    def test_half_precision_dtype(self):
        vol = new_volume(small_config(storage_precision="half"))
        assert vol.tsdf.dtype == np.float16
        assert vol.label.dtype == np.uint8

    def test_allocation_refused_reports_required_bytes(self):
        cfg = VolumeConfig(dims=(512, 512, 256), voxel_size=0.01, truncation=0.05,
                           storage_precision="half", memory_budget_bytes=1_000_000)
        with pytest.raises(AllocationError) as err:
            new_volume(cfg)
        assert err.value.required_bytes >= 512 * 512 * 256 * (2 + 2 + 1 + 2)
        assert str(err.value.required_bytes) in str(err.value)


class TestWorldVoxelMapping:
    def test_origin_maps_to_zero(self):
        vol = new_volume(small_config(origin=(0.5, -0.25, 1.0)))
        assert np.allclose(vol.world_to_voxel((0.5, -0.25, 1.0)), (0, 0, 0))

    def test_integer_voxel_steps(self):
        vol = new_volume(small_config(origin=(0.5, -0.25, 1.0)))
        p = np.array([0.5, -0.25, 1.0]) + 0.01 * np.array([1, 2, 3])
        assert np.allclose(vol.world_to_voxel(p), (1, 2, 3))

    def test_round_trip(self, rng):
        vol = new_volume(small_config(origin=(-0.1, 0.2, 0.3)))
        coords = rng.uniform(-5, 20, (1000, 3))
        back = vol.world_to_voxel(vol.voxel_to_world(coords))
        assert np.allclose(back, coords, atol=1e-9)


class TestSnapshotStats:
    def test_fresh_volume(self):
        stats = snapshot_stats(new_volume(small_config()))
        assert stats.occupied_voxels == 0
        assert stats.labeled_voxels == 0
        assert stats.weight_histogram[1].sum() == 0

    def test_histogram_partitions_occupied(self, rng):
        vol = new_volume(small_config(storage_precision="single"))
        vol.weight[...] = rng.uniform(0, 40, vol.weight.shape).astype(np.float32)
        vol.weight[rng.random(vol.weight.shape) < 0.3] = 0
        stats = snapshot_stats(vol)
        assert stats.weight_histogram[1].sum() == stats.occupied_voxels
        assert stats.occupied_voxels == int(np.count_nonzero(vol.weight > 0))

    def test_labeled_counts_scored_voxels(self):
        vol = new_volume(small_config())
        vol.score[0, 0, :3] = 0.5
        vol.label[0, 0, :3] = 2
        assert snapshot_stats(vol).labeled_voxels == 3


class TestPrecisionContract:
    def test_half_round_trip_error_bound(self, rng):
        # storing to half changes a normal value by at most 2^-11 relative
        vals = rng.uniform(-0.05, 0.05, 10000).astype(np.float32)
        vals = vals[np.abs(vals) >= 2 ** -14]  # half-precision normal range
        stored = vals.astype(np.float16).astype(np.float32)
        rel = np.abs(stored - vals) / np.abs(vals)
        # half has 10 mantissa bits: rounding error <= 2^-11 relative
        assert np.all(rel <= 2 ** -11 + 1e-12)

    def test_validate_catches_violations(self):
        vol = new_volume(small_config(storage_precision="single"))
        vol.validate()
        vol.label[0, 0, 0] = 3  # label without score
        with pytest.raises(AssertionError):
            vol.validate()
