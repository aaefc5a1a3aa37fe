import numpy as np
import pytest

from voxfuse.errors import ConfigError
from voxfuse.frames import LabelFrame
from voxfuse.semantics import lift_labels, update_labels
from voxfuse.volume import VolumeConfig, new_volume

from test_window import window_at_coords


def make_volume(dims=(12, 12, 12), precision="single"):
    cfg = VolumeConfig(dims=dims, voxel_size=0.01, truncation=0.05,
                       storage_precision=precision)
    return new_volume(cfg)


def frame(labels, scores):
    return LabelFrame(np.asarray(labels, np.uint8), np.asarray(scores, np.float32))


class TestLiftLabels:
    def test_every_sample_carries_its_rays_pixel_label(self):
        window = window_at_coords(np.tile([[2.0, 2.0, 2.0]], (9, 1)), valid_shape=(1, 1))
        lf = frame([[7]], [[0.9]])
        labels, scores = lift_labels(lf, window)
        assert labels.shape == (1, 1, 9)
        assert np.all(labels == 7)
        assert np.allclose(scores, np.float32(0.9))

    def test_invalid_ray_gets_zeroes(self):
        window = window_at_coords(np.tile([[2.0, 2.0, 2.0]], (9, 1)), valid_shape=(1, 1))
        window.valid[...] = False
        labels, scores = lift_labels(frame([[7]], [[0.9]]), window)
        assert np.all(labels == 0)
        assert np.all(scores == 0)

    def test_exhaustive_random_frame(self, rng):
        h, w, t = 6, 5, 7
        coords = rng.uniform(1, 10, (h * w * t, 3))
        window = window_at_coords(coords, valid_shape=(h, w))
        window.valid[...] = rng.random((h, w)) < 0.7
        lab = rng.integers(0, 9, (h, w)).astype(np.uint8)
        sco = rng.uniform(0.01, 1, (h, w)).astype(np.float32)
        lifted_l, lifted_s = lift_labels(frame(lab, sco), window)
        lf = frame(lab, sco)  # scores of label-0 pixels forced to 0
        for i in range(h):
            for j in range(w):
                if window.valid[i, j]:
                    assert np.all(lifted_l[i, j] == lf.labels[i, j])
                    assert np.all(lifted_s[i, j] == lf.scores[i, j])
                else:
                    assert np.all(lifted_l[i, j] == 0)
                    assert np.all(lifted_s[i, j] == 0)

    def test_shape_mismatch_rejected(self):
        window = window_at_coords(np.tile([[2.0, 2.0, 2.0]], (9, 1)), valid_shape=(1, 1))
        with pytest.raises(ConfigError):
            lift_labels(frame([[1], [2]], [[1.0], [1.0]]), window)


def apply_once(volume, coord, label, score):
    window = window_at_coords(np.asarray(coord, np.float64)[None, :])
    labels = np.full((1, 1, 1), label, np.uint8)
    scores = np.full((1, 1, 1), score, np.float32)
    update_labels(volume, window, labels, scores)


class TestUpdateScheme:
    def test_higher_score_replaces(self):
        vol = make_volume()
        apply_once(vol, (3, 3, 3), 3, 0.5)
        apply_once(vol, (3, 3, 3), 7, 0.9)
        assert vol.label[3, 3, 3] == 7
        assert vol.score[3, 3, 3] == pytest.approx(0.9)

    def test_lower_score_keeps_previous(self):
        vol = make_volume()
        apply_once(vol, (3, 3, 3), 3, 0.9)
        apply_once(vol, (3, 3, 3), 7, 0.5)
        assert vol.label[3, 3, 3] == 3
        assert vol.score[3, 3, 3] == pytest.approx(0.9)

    def test_equal_score_incoming_label_wins(self):
        # the replacement test uses >=, so a tie rewrites the label
        vol = make_volume()
        apply_once(vol, (3, 3, 3), 3, 0.5)
        apply_once(vol, (3, 3, 3), 7, 0.5)
        assert vol.label[3, 3, 3] == 7
        assert vol.score[3, 3, 3] == pytest.approx(0.5)

    def test_idempotent(self):
        vol = make_volume()
        apply_once(vol, (3, 3, 3), 5, 0.7)
        lab = vol.label.copy()
        sco = vol.score.copy()
        apply_once(vol, (3, 3, 3), 5, 0.7)
        assert np.array_equal(vol.label, lab)
        assert np.array_equal(vol.score, sco)

    def test_zero_score_contribution_is_dropped(self):
        vol = make_volume()
        apply_once(vol, (3, 3, 3), 5, 0.0)
        assert vol.label[3, 3, 3] == 0
        assert vol.score[3, 3, 3] == 0
        vol.validate()

    def test_same_frame_collision_highest_score_wins(self):
        vol = make_volume()
        # two samples of one frame land on the same voxel
        window = window_at_coords(np.array([[3.0, 3.0, 3.0], [3.0, 3.0, 3.0]]),
                                  valid_shape=(1, 2))
        labels = np.array([[[4], [9]]], np.uint8)
        scores = np.array([[[0.6], [0.8]]], np.float32)
        update_labels(vol, window, labels, scores)
        assert vol.label[3, 3, 3] == 9
        assert vol.score[3, 3, 3] == pytest.approx(0.8)

    def test_same_frame_tie_lowest_ray_wins(self):
        vol = make_volume()
        window = window_at_coords(np.array([[3.0, 3.0, 3.0], [3.0, 3.0, 3.0]]),
                                  valid_shape=(1, 2))
        labels = np.array([[[4], [9]]], np.uint8)
        scores = np.array([[[0.8], [0.8]]], np.float32)
        update_labels(vol, window, labels, scores)
        assert vol.label[3, 3, 3] == 4

    def test_score_monotonicity_random_sequences(self, rng):
        vol = make_volume()
        prev = vol.score.copy()
        for _ in range(200):
            coord = rng.integers(1, 11, 3).astype(np.float64)
            apply_once(vol, coord, int(rng.integers(1, 9)), float(rng.uniform(0, 1)))
            now = vol.score.copy()
            assert np.all(now.astype(np.float32) >= prev.astype(np.float32))
            prev = now

    def test_order_determinism(self, rng):
        # shuffling the rays of one frame never changes the result
        n = 40
        coords = rng.integers(1, 11, (n, 3)).astype(np.float64)
        labels = rng.integers(1, 9, n).astype(np.uint8)
        scores = rng.uniform(0.05, 1, n).astype(np.float32)

        def run(order):
            vol = make_volume()
            window = window_at_coords(coords[order], valid_shape=(1, n))
            update_labels(vol, window, labels[order].reshape(1, n, 1),
                          scores[order].reshape(1, n, 1))
            return vol

        base = run(np.arange(n))
        for _ in range(5):
            # note: reordering rays changes ray indices, so ties may break
            # differently; keep scores distinct to test pure order effects
            shuffled = run(rng.permutation(n))
            assert np.array_equal(base.label, shuffled.label)
            assert np.array_equal(base.score, shuffled.score)

    def test_kernel_path_matches_numpy_fallback(self, rng):
        # winners per voxel agree between the compiled kernel and the
        # numpy reduction; rays carry one (label, score) pair as lift_labels
        # guarantees
        import voxfuse._kernels as K

        for _ in range(30):
            n_rays = int(rng.integers(1, 60))
            per_ray = int(rng.integers(1, 6))
            n = n_rays * per_ray
            box = rng.integers(3, 8, 3)
            box_yz, box_z = int(box[1] * box[2]), int(box[2])
            box_n = int(box[0]) * box_yz
            base_local = ((rng.integers(0, box[0] - 1, n) * box[1]
                           + rng.integers(0, box[1] - 1, n)) * box[2]
                          + rng.integers(0, box[2] - 1, n))
            frac = rng.random((n, 3))
            frac[rng.random((n, 3)) < 0.2] = 0.0
            ray_scores = rng.choice([0.0, 0.25, 0.5, 1.0], n_rays).astype(np.float32)
            ray_labels = rng.integers(1, 9, n_rays).astype(np.uint8)
            rays = np.repeat(np.arange(n_rays), per_ray)
            scores = ray_scores[rays]
            labels = ray_labels[rays]

            fast = K.label_winners(base_local, frac, scores, labels, rays,
                                   box_yz, box_z, box_n)
            saved = K.HAS_NUMBA
            K.HAS_NUMBA = False
            try:
                slow = K.label_winners(base_local, frac, scores, labels, rays,
                                       box_yz, box_z, box_n)
            finally:
                K.HAS_NUMBA = saved
            fast_map = dict(zip(fast[0].tolist(), zip(fast[1].tolist(),
                                                      fast[2].tolist())))
            slow_map = dict(zip(slow[0].tolist(), zip(slow[1].tolist(),
                                                      slow[2].tolist())))
            assert fast_map == slow_map

    def test_label_provenance(self, rng):
        # every labeled voxel's label was contributed by some update
        vol = make_volume()
        seen = set()
        for _ in range(100):
            coord = rng.integers(1, 11, 3).astype(np.float64)
            lab = int(rng.integers(1, 9))
            apply_once(vol, coord, lab, float(rng.uniform(0.1, 1)))
            seen.add((tuple(int(c) for c in coord), lab))
        labeled = np.argwhere(vol.score.astype(np.float32) > 0)
        for ijk in labeled:
            lab = int(vol.label[tuple(ijk)])
            assert any(v == tuple(ijk) and l == lab for v, l in seen)
