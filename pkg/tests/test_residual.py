import numpy as np
import pytest

from lidarmos.dataio import Pose
from lidarmos.projection import BevImage, RangeImage, profile
from lidarmos.residual import (InsufficientHistoryError, ResidualError,
                               build_residual_stack, residual_bev,
                               residual_rv)
from lidarmos.synth import Box, SyntheticSceneSpec, synth_sequence

DESK = profile("desk")


def range_image(values):
    values = np.asarray(values, np.float32)[None]
    valid = values[0] >= 0
    return RangeImage(values, valid, np.where(valid, 0, -1).astype(np.int32),
                      np.zeros(1, np.int32), np.zeros(1, np.int32),
                      np.ones(1, bool))


def bev_image(values, valid=None):
    values = np.asarray(values, np.float32)[None]
    if valid is None:
        valid = np.ones(values[0].shape, bool)
    return BevImage(values, valid, np.full(values[0].shape, -1, np.int32),
                    valid.astype(np.int32), None, None)


class TestResidualRv:
    def test_direct_evaluation(self):
        out = residual_rv(range_image([[10.0]]), range_image([[12.0]]))
        assert np.isclose(out[0, 0], 0.2)

    def test_identical_frames_zero(self, rng):
        vals = rng.uniform(1, 20, (4, 6)).astype(np.float32)
        img = range_image(vals)
        assert (residual_rv(img, img) == 0).all()

    def test_invalid_reference_zero(self):
        out = residual_rv(range_image([[-1.0]]), range_image([[12.0]]))
        assert out[0, 0] == 0.0

    def test_invalid_past_zero(self):
        out = residual_rv(range_image([[10.0]]), range_image([[-1.0]]))
        assert out[0, 0] == 0.0

    def test_denominator_guard(self):
        out = residual_rv(range_image([[0.005]]), range_image([[1.0]]))
        assert out[0, 0] == 0.0

    def test_extent_mismatch(self):
        with pytest.raises(ResidualError, match="extent"):
            residual_rv(range_image([[1.0]]), range_image([[1.0, 2.0]]))

    def test_swap_changes_only_denominator(self):
        a = range_image([[10.0]])
        b = range_image([[12.0]])
        assert np.isclose(residual_rv(a, b)[0, 0], 2.0 / 10.0)
        assert np.isclose(residual_rv(b, a)[0, 0], 2.0 / 12.0)


class TestResidualBev:
    def test_direct_evaluation(self):
        out = residual_bev(bev_image([[1.5]]), bev_image([[0.3]]))
        assert np.isclose(out[0, 0], 1.2)

    def test_identical_zero(self, rng):
        img = bev_image(rng.uniform(0, 3, (5, 5)))
        assert (residual_bev(img, img) == 0).all()

    def test_invalid_cell_zero(self):
        a = bev_image([[1.5]], valid=np.array([[False]]))
        b = bev_image([[0.3]])
        assert residual_bev(a, b)[0, 0] == 0.0
        assert residual_bev(b, a)[0, 0] == 0.0

    def test_symmetric_in_swap(self, rng):
        a = bev_image(rng.uniform(0, 3, (5, 5)))
        b = bev_image(rng.uniform(0, 3, (5, 5)))
        assert np.array_equal(residual_bev(a, b), residual_bev(b, a))


def static_scene(frames, seed=1):
    return SyntheticSceneSpec(
        frames=frames, seed=seed,
        static_boxes=[Box([10, 2, -0.9], [2, 2, 1.2]),
                      Box([6, -6, -0.75], [2.5, 1.5, 1.5]),
                      Box([-8, 4, -0.8], [2, 2, 1.4])],
        ego_velocity=[1.0, 0, 0])


class TestBuildStack:
    def test_static_scene_quiet(self):
        frames = synth_sequence(static_scene(8))
        stack = build_residual_stack([f.cloud for f in frames],
                                     [f.pose for f in frames], DESK)
        assert stack.rv.shape == (4, 32, 512)
        assert stack.bev.shape == (4, 128, 128)
        assert stack.channel_valid.all()
        for ch in range(4):
            assert np.percentile(stack.rv[ch][stack.rv_defined[ch]], 95) < 0.05
            assert np.percentile(stack.bev[ch][stack.bev_defined[ch]], 95) < 0.1

    def test_moving_box_detectable(self):
        spec = SyntheticSceneSpec(
            frames=8, seed=2,
            dynamic_boxes=[Box([10, 0, -0.9], [1.6, 1.2, 1.2], [0, 2.0, 0])])
        frames = synth_sequence(spec)
        stack = build_residual_stack([f.cloud for f in frames],
                                     [f.pose for f in frames], DESK)
        assert stack.bev.max() > 0.5

    def test_duplicated_frame_all_zero(self):
        frame = synth_sequence(static_scene(2))[0]
        stack = build_residual_stack([frame.cloud, frame.cloud],
                                     [frame.pose, frame.pose], DESK, window=1)
        assert (stack.rv == 0).all()
        assert (stack.bev == 0).all()

    def test_nonnegative(self):
        frames = synth_sequence(static_scene(8, seed=3))
        stack = build_residual_stack([f.cloud for f in frames],
                                     [f.pose for f in frames], DESK)
        assert (stack.rv >= 0).all()
        assert (stack.bev >= 0).all()

    def test_insufficient_history_raises(self):
        frames = synth_sequence(static_scene(3))
        with pytest.raises(InsufficientHistoryError):
            build_residual_stack([f.cloud for f in frames],
                                 [f.pose for f in frames], DESK, window=4)

    def test_zero_pad_flags_channels(self):
        frames = synth_sequence(static_scene(3))
        stack = build_residual_stack([f.cloud for f in frames],
                                     [f.pose for f in frames], DESK, window=4,
                                     allow_short=True)
        assert stack.channel_valid.tolist() == [True, True, False, False]
        assert (stack.rv[2:] == 0).all()
        assert (stack.bev[2:] == 0).all()

    def test_pose_count_mismatch(self):
        frames = synth_sequence(static_scene(3))
        with pytest.raises(ResidualError, match="one pose"):
            build_residual_stack([f.cloud for f in frames],
                                 [f.pose for f in frames][:2], DESK)

    def test_compensation_uses_poses(self):
        # a static world seen from a moving ego: without compensation the
        # BEV footprints would shift by 1 m per frame; residuals stay small
        frames = synth_sequence(static_scene(6, seed=5))
        clouds = [f.cloud for f in frames]
        poses = [f.pose for f in frames]
        stack = build_residual_stack(clouds, poses, DESK)
        good = stack.bev[stack.bev_defined].mean()
        # deliberately wrong poses: pretend the ego never moved
        bad_stack = build_residual_stack(clouds, [Pose.identity()] * 6, DESK)
        bad = bad_stack.bev[bad_stack.bev_defined].mean()
        assert good < bad


class TestDeterminism:
    def test_same_inputs_same_stack(self):
        frames = synth_sequence(static_scene(6))
        clouds = [f.cloud for f in frames]
        poses = [f.pose for f in frames]
        a = build_residual_stack(clouds, poses, DESK)
        b = build_residual_stack(clouds, poses, DESK)
        assert np.array_equal(a.rv, b.rv)
        assert np.array_equal(a.bev, b.bev)
