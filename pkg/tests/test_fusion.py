import numpy as np
import pytest

from voxfuse.errors import ConfigError, PredictorFaultError
from voxfuse.frames import DepthFrame
from voxfuse.fusion import (
    ClassicPredictor,
    FusionConfig,
    FusionInput,
    filter_outliers,
    fuse_frame,
    integrate,
)
from voxfuse.geometry import Intrinsics, Pose
from voxfuse.synth import AnalyticScene, Sphere, render_depth, trajectory
from voxfuse.volume import VolumeConfig, new_volume, snapshot_stats

from test_window import window_at_coords


def make_volume(dims=(16, 16, 16), precision="single", origin=(0, 0, 0),
                voxel=0.01, truncation=0.05):
    cfg = VolumeConfig(dims=dims, voxel_size=voxel, origin=origin,
                       truncation=truncation, storage_precision=precision)
    return new_volume(cfg)


def fusion_input_for(depth, window_size=9, valid=None):
    h, w = depth.shape
    shape = (h, w, window_size)
    if valid is None:
        valid = depth > 0
    return FusionInput(depth=depth, semantic=None,
                       tsdf_window=np.zeros(shape, np.float32),
                       weight_window=np.zeros(shape, np.float32), valid=valid)


class TestClassicPredictor:
    def test_center_sample_zero_update_full_weight(self):
        pred = ClassicPredictor(truncation=0.05, sample_spacing=0.01)
        depth = np.full((2, 2), 1.0, np.float32)
        v, w = pred.predict(fusion_input_for(depth))
        assert np.all(v[:, :, 4] == 0)
        assert np.all(w[:, :, 4] == 1)

    def test_sample_one_voxel_in_front_is_positive(self):
        pred = ClassicPredictor(truncation=0.05, sample_spacing=0.01)
        v, w = pred.predict(fusion_input_for(np.full((1, 1), 1.0, np.float32)))
        # sample index 3 is one step closer to the camera than the surface
        assert v[0, 0, 3] == pytest.approx(0.01)
        assert w[0, 0, 3] == 1

    def test_clamps_to_truncation(self):
        pred = ClassicPredictor(truncation=0.03, sample_spacing=0.02)
        v, _ = pred.predict(fusion_input_for(np.full((1, 1), 1.0, np.float32)))
        assert v[0, 0, 0] == pytest.approx(0.03)  # 4 * 0.02 clamped
        assert np.max(np.abs(v)) <= 0.03

    def test_far_behind_surface_gets_zero_weight(self):
        pred = ClassicPredictor(truncation=0.05, sample_spacing=0.02)
        _, w = pred.predict(fusion_input_for(np.full((1, 1), 1.0, np.float32)))
        # samples 8 and 7 are 8 cm and 6 cm behind the surface
        assert w[0, 0, 8] == 0 and w[0, 0, 7] == 0
        assert w[0, 0, 6] == 1  # 4 cm behind, inside the band

    def test_invalid_rays_zero_weight(self):
        pred = ClassicPredictor(truncation=0.05, sample_spacing=0.01)
        depth = np.zeros((2, 2), np.float32)
        _, w = pred.predict(fusion_input_for(depth))
        assert np.all(w == 0)


class TestIntegrate:
    def test_first_contribution_sets_value(self):
        vol = make_volume(precision="single")
        window = window_at_coords(np.array([[4.0, 5.0, 6.0]]))
        acc = integrate(vol, window, np.full((1, 1, 1), 0.03, np.float32),
                        np.ones((1, 1, 1), np.float32))
        assert acc.touched == 1
        assert vol.tsdf[4, 5, 6] == pytest.approx(0.03, abs=1e-7)
        assert vol.weight[4, 5, 6] == pytest.approx(1.0)

    def test_running_weighted_mean(self):
        vol = make_volume(precision="single")
        window = window_at_coords(np.array([[4.0, 5.0, 6.0]]))
        integrate(vol, window, np.full((1, 1, 1), 0.02, np.float32),
                  np.ones((1, 1, 1), np.float32))
        integrate(vol, window, np.full((1, 1, 1), 0.04, np.float32),
                  np.ones((1, 1, 1), np.float32))
        assert vol.tsdf[4, 5, 6] == pytest.approx(0.03, abs=1e-7)
        assert vol.weight[4, 5, 6] == pytest.approx(2.0)

    def test_zero_weight_leaves_voxel_untouched(self):
        vol = make_volume(precision="single")
        vol.tsdf[4, 5, 6] = 0.01
        window = window_at_coords(np.array([[4.0, 5.0, 6.0]]))
        acc = integrate(vol, window, np.full((1, 1, 1), 0.05, np.float32),
                        np.zeros((1, 1, 1), np.float32))
        assert acc.touched == 0
        assert vol.tsdf[4, 5, 6] == pytest.approx(0.01)

    def test_result_clamped_to_truncation(self):
        vol = make_volume(precision="single")
        window = window_at_coords(np.array([[4.0, 5.0, 6.0]]))
        integrate(vol, window, np.full((1, 1, 1), 0.2, np.float32),
                  np.ones((1, 1, 1), np.float32))
        assert vol.tsdf[4, 5, 6] == pytest.approx(0.05)

    def test_weight_monotone_nondecreasing(self, rng):
        vol = make_volume(precision="single")
        coords = rng.integers(1, 15, (40, 3)).astype(np.float64)
        prev = vol.weight.copy()
        for _ in range(10):
            window = window_at_coords(coords, valid_shape=(1, 40))
            upd = rng.uniform(-0.05, 0.05, (1, 40, 1)).astype(np.float32)
            w = rng.uniform(0, 1, (1, 40, 1)).astype(np.float32)
            integrate(vol, window, upd, w)
            assert np.all(vol.weight.astype(np.float32) >= prev.astype(np.float32) - 1e-7)
            prev = vol.weight.copy()

    @pytest.mark.parametrize("precision,tol", [("half", 1e-3), ("single", 1e-6)])
    def test_streaming_equals_batch_weighted_mean(self, rng, precision, tol):
        # incremental application of the update equations must match the
        # closed-form weighted mean of all contributions
        dims = (10, 10, 10)
        vol = make_volume(dims=dims, precision=precision)
        n_vox = 1000
        coords = np.stack(np.meshgrid(*[np.arange(10)] * 3, indexing="ij"),
                          axis=-1).reshape(-1, 3).astype(np.float64)
        steps = 100
        values = rng.uniform(-0.05, 0.05, (steps, n_vox)).astype(np.float32)
        weights = rng.uniform(0, 1, (steps, n_vox)).astype(np.float32)
        for t in range(steps):
            window = window_at_coords(coords, valid_shape=(1, n_vox))
            integrate(vol, window, values[t].reshape(1, n_vox, 1),
                      weights[t].reshape(1, n_vox, 1))
        w64 = weights.astype(np.float64)
        batch = (w64 * values).sum(axis=0) / np.maximum(w64.sum(axis=0), 1e-300)
        batch = np.clip(batch, -0.05, 0.05)
        fused = vol.tsdf.reshape(-1).astype(np.float64)[
            (coords[:, 0].astype(int) * 10 + coords[:, 1].astype(int)) * 10
            + coords[:, 2].astype(int)]
        assert np.max(np.abs(fused - batch)) < tol

    def test_max_weight_cap(self):
        cfg = VolumeConfig(dims=(8, 8, 8), voxel_size=0.01, truncation=0.05,
                           storage_precision="single", max_weight=3.0)
        vol = new_volume(cfg)
        window = window_at_coords(np.array([[2.0, 2.0, 2.0]]))
        for _ in range(10):
            integrate(vol, window, np.zeros((1, 1, 1), np.float32),
                      np.ones((1, 1, 1), np.float32))
        assert vol.weight[2, 2, 2] == pytest.approx(3.0)


def orbit_sphere_setup(frames=12, size=128, voxel=0.01):
    scene = AnalyticScene([Sphere(center=(0, 0, 0), radius=0.5, class_id=1)])
    intr = Intrinsics.from_fov(size, size, 55.0)
    poses = trajectory("orbit", center=(0, 0, 0), radius=1.4, frames=frames,
                       elevation_deg=30.0)
    cfg = VolumeConfig(dims=(122, 122, 122), voxel_size=voxel,
                       origin=(-0.605, -0.605, -0.605), truncation=0.05,
                       storage_precision="single")
    return scene, intr, poses, cfg


class TestFuseFrame:
    def test_all_zero_depth_changes_nothing(self):
        vol = make_volume(dims=(32, 32, 32))
        intr = Intrinsics(fx=30, fy=30, cx=15.5, cy=15.5, width=32, height=32)
        frame = DepthFrame(np.zeros((32, 32), np.float32))
        pred = ClassicPredictor(0.05, vol.config.voxel_size)
        report = fuse_frame(vol, frame, None, intr, Pose.identity(), pred,
                            FusionConfig(window_size=9))
        assert report.rays_valid == 0
        assert report.voxels_touched == 0
        assert np.all(vol.weight == 0)

    def test_plane_zero_crossing_at_depth(self):
        # a fronto-parallel plane at 1 m: the fused field crosses zero within
        # half a voxel of z = 1 along each central ray
        vol = make_volume(dims=(64, 64, 32), origin=(-0.32, -0.32, 0.85),
                          precision="single")
        intr = Intrinsics(fx=60, fy=60, cx=31.5, cy=31.5, width=64, height=64)
        frame = DepthFrame(np.ones((64, 64), np.float32))
        pred = ClassicPredictor(0.05, vol.config.voxel_size)
        fuse_frame(vol, frame, None, intr, Pose.identity(), pred, FusionConfig())
        assert snapshot_stats(vol).occupied_voxels > 0
        # walk the z column of voxels near the image center
        for ix, iy in [(31, 31), (28, 35), (35, 28)]:
            col = vol.tsdf[ix, iy].astype(np.float64)
            wcol = vol.weight[ix, iy].astype(np.float64)
            ks = np.nonzero((col[:-1] > 0) & (col[1:] <= 0)
                            & (wcol[:-1] > 0) & (wcol[1:] > 0))[0]
            assert ks.size >= 1
            k = ks[0]
            frac = col[k] / (col[k] - col[k + 1])
            z_cross = 0.85 + (k + frac) * 0.01
            assert abs(z_cross - 1.0) <= 0.005

    def test_fusing_same_frame_twice_is_fixed_point(self):
        scene, intr, poses, cfg = orbit_sphere_setup(frames=4, size=64)
        vol = new_volume(cfg)
        depth, _ = render_depth(scene, intr, poses[0])
        pred = ClassicPredictor(cfg.truncation, cfg.voxel_size)
        fuse_frame(vol, depth, None, intr, poses[0], pred, FusionConfig())
        v1 = vol.tsdf.copy()
        w1 = vol.weight.copy()
        fuse_frame(vol, depth, None, intr, poses[0], pred, FusionConfig())
        assert np.allclose(vol.tsdf, v1, atol=1e-6)
        assert np.allclose(vol.weight, 2 * w1.astype(np.float64), rtol=1e-6)

    def test_predictor_fault_leaves_volume_unchanged(self):
        class BrokenPredictor:
            def predict(self, fusion_input):
                t = fusion_input.window_size
                h, w = fusion_input.depth.shape
                bad = np.full((h, w, t), np.nan, np.float32)
                return bad, np.ones((h, w, t), np.float32)

        vol = make_volume(dims=(32, 32, 32), origin=(-0.16, -0.16, 0.0))
        intr = Intrinsics(fx=30, fy=30, cx=15.5, cy=15.5, width=32, height=32)
        frame = DepthFrame(np.full((32, 32), 0.16, np.float32))
        with pytest.raises(PredictorFaultError):
            fuse_frame(vol, frame, None, intr, Pose.identity(), BrokenPredictor(),
                       FusionConfig())
        assert np.all(vol.weight == 0)

    def test_invariants_hold_over_random_frames(self, rng):
        vol = make_volume(dims=(24, 24, 24), origin=(-0.12, -0.12, 0.0),
                          precision="half")
        intr = Intrinsics(fx=16, fy=16, cx=7.5, cy=7.5, width=16, height=16)
        pred = ClassicPredictor(0.05, vol.config.voxel_size)
        for _ in range(100):
            depth = rng.uniform(0.02, 0.3, (16, 16)).astype(np.float32)
            depth[rng.random((16, 16)) < 0.2] = 0
            pose = Pose.identity()
            fuse_frame(vol, DepthFrame(depth), None, intr, pose, pred, FusionConfig())
            vol.validate()

    def test_order_independence_with_representable_weights(self):
        # at voxel-center samples the splat weights are exact integers, so
        # any integration order produces bit-identical weights
        coords = np.array([[3.0, 3.0, 3.0], [5.0, 5.0, 5.0], [7.0, 7.0, 7.0]])
        contributions = [(0.01, 1.0), (0.03, 1.0), (-0.02, 1.0), (0.05, 1.0)]

        def run(order):
            vol = make_volume(dims=(10, 10, 10), precision="half")
            for i in order:
                v, w = contributions[i]
                window = window_at_coords(coords, valid_shape=(1, 3))
                integrate(vol, window, np.full((1, 3, 1), v, np.float32),
                          np.full((1, 3, 1), w, np.float32))
            return vol

        a = run([0, 1, 2, 3])
        b = run([3, 1, 0, 2])
        assert np.array_equal(a.weight, b.weight)
        assert np.allclose(a.tsdf.astype(np.float64), b.tsdf.astype(np.float64),
                           atol=1e-3)

    def test_frame_order_independence_full_pipeline(self):
        scene, intr, poses, cfg = orbit_sphere_setup(frames=6, size=64)
        frames = [render_depth(scene, intr, p)[0] for p in poses]
        pred = ClassicPredictor(cfg.truncation, cfg.voxel_size)

        def run(order):
            vol = new_volume(cfg)
            for i in order:
                fuse_frame(vol, frames[i], None, intr, poses[i], pred, FusionConfig())
            return vol

        a = run([0, 1, 2, 3, 4, 5])
        b = run([5, 3, 1, 0, 4, 2])
        # sums are mathematically order-free; only storage rounding differs
        assert np.allclose(a.weight.astype(np.float64),
                           b.weight.astype(np.float64), rtol=1e-6, atol=1e-6)
        assert np.allclose(a.tsdf.astype(np.float64),
                           b.tsdf.astype(np.float64), atol=1e-3)


class TestDenseOracle:
    def test_classic_fusion_matches_dense_volumetric_oracle(self):
        # Independent oracle: loop over voxels and project each one into
        # every frame, gathering the trilinear kernel mass and clamped
        # signed-distance value of each nearby ray sample, then take one
        # global weighted mean. This is the per-voxel (gather) formulation
        # of the same estimator the per-ray splat pipeline computes, built
        # from first principles without the window/splat machinery.
        scene, intr, poses, cfg = orbit_sphere_setup(frames=8, size=96)
        frames = [render_depth(scene, intr, p)[0] for p in poses]
        pred = ClassicPredictor(cfg.truncation, cfg.voxel_size)
        vol = new_volume(cfg)
        for depth, pose in zip(frames, poses):
            fuse_frame(vol, depth, None, intr, pose, pred, FusionConfig())

        dims = cfg.dims
        h = cfg.voxel_size
        tau = cfg.truncation
        t = 9
        half = (t - 1) // 2
        reach = half * h

        grid = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"),
                        axis=-1).reshape(-1, 3)
        centers = grid * h + np.array(cfg.origin)
        fused_w = vol.weight.reshape(-1).astype(np.float64)

        # splatted mass lands within one voxel (L-inf) of a sample, and all
        # samples lie within the window reach of the surface
        surface_dist = np.abs(scene.sdf(centers))
        band = surface_dist <= reach + 2.0 * h
        assert np.all(fused_w[~band] == 0)

        vox = centers[band]
        acc_v = np.zeros(len(vox))
        acc_w = np.zeros(len(vox))
        ks = np.arange(t)
        sample_value = np.clip((half - ks) * h, -tau, tau)
        sample_weight = ((half - ks) * h >= -tau).astype(np.float64)

        for depth, pose in zip(frames, poses):
            # per-pixel ray machinery, written out from first principles
            u_px = np.arange(intr.width)
            v_px = np.arange(intr.height)
            gx = (u_px - intr.cx) / intr.fx
            gy = (v_px - intr.cy) / intr.fy
            dir_cam = np.stack([np.broadcast_to(gx, (intr.height, intr.width)),
                                np.broadcast_to(gy[:, None], (intr.height, intr.width)),
                                np.ones((intr.height, intr.width))], axis=-1)
            norms = np.linalg.norm(dir_cam, axis=-1)
            d = depth.depth.astype(np.float64)
            surf_w = (dir_cam * d[..., None]) @ pose.rotation.T + pose.translation
            unit_w = (dir_cam / norms[..., None]) @ pose.rotation.T
            # (H, W, T, 3) sample positions and per-ray validity
            samples = surf_w[:, :, None, :] + unit_w[:, :, None, :] \
                * ((ks - half) * h)[None, None, :, None]
            coords = (samples - np.array(cfg.origin)) / h
            ray_valid = (d > 0) & np.all(
                (coords >= 0) & (coords <= np.array(dims, float) - 1), axis=(2, 3))

            cam = (vox - pose.translation) @ pose.rotation
            z = cam[:, 2]
            front = z > 1e-6
            uf = np.full(len(vox), -10.0)
            vf = np.full(len(vox), -10.0)
            uf[front] = intr.fx * cam[front, 0] / z[front] + intr.cx
            vf[front] = intr.fy * cam[front, 1] / z[front] + intr.cy
            u0 = np.floor(uf).astype(int)
            v0 = np.floor(vf).astype(int)

            for du in (-1, 0, 1, 2):
                for dv in (-1, 0, 1, 2):
                    pu = u0 + du
                    pv = v0 + dv
                    ok = front & (pu >= 0) & (pu < intr.width) & (pv >= 0) \
                        & (pv < intr.height)
                    sel = np.nonzero(ok)[0]
                    if sel.size == 0:
                        continue
                    sel = sel[ray_valid[pv[sel], pu[sel]]]
                    if sel.size == 0:
                        continue
                    for k in range(t):
                        delta = np.abs(vox[sel] - samples[pv[sel], pu[sel], k]) / h
                        mass = np.prod(np.maximum(0.0, 1.0 - delta), axis=1) \
                            * sample_weight[k]
                        nz = mass > 0
                        np.add.at(acc_w, sel[nz], mass[nz])
                        np.add.at(acc_v, sel[nz], mass[nz] * sample_value[k])

        oracle_v = np.where(acc_w > 0, acc_v / np.maximum(acc_w, 1e-300), 0.0)
        fused_band_v = vol.tsdf.reshape(-1).astype(np.float64)[band]
        fused_band_w = fused_w[band]
        both = (acc_w > 1e-12) & (fused_band_w > 0)
        assert both.sum() > 50_000
        rms = np.sqrt(np.mean((fused_band_v[both] - oracle_v[both]) ** 2))
        assert rms <= 0.1 * cfg.voxel_size


class TestFilterOutliers:
    def test_threshold_zero_removes_nothing(self, rng):
        vol = make_volume(precision="single")
        vol.weight[...] = rng.uniform(0, 5, vol.weight.shape).astype(np.float32)
        out = filter_outliers(vol, 0.0)
        assert np.array_equal(out.weight, vol.weight)

    def test_copy_mode_preserves_original(self):
        vol = make_volume(precision="single")
        vol.weight[2, 2, 2] = 1.0
        out = filter_outliers(vol, 2.0)
        assert vol.weight[2, 2, 2] == 1.0
        assert out.weight[2, 2, 2] == 0.0

    def test_in_place_mode(self):
        vol = make_volume(precision="single")
        vol.weight[2, 2, 2] = 1.0
        vol.weight[3, 3, 3] = 5.0
        filter_outliers(vol, 2.0, copy=False)
        assert vol.weight[2, 2, 2] == 0.0
        assert vol.weight[3, 3, 3] == 5.0

    def test_negative_threshold_rejected(self):
        with pytest.raises(ConfigError):
            filter_outliers(make_volume(), -1.0)
