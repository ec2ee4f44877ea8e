import math

import numpy as np
import pytest

from kf_minset.descriptors import DescriptorFieldParams, cosine_similarity
from kf_minset.geometry import translation_distance
from kf_minset.synthworld import TrajectorySpec, WorldConfig, generate, gt_loop_pairs


def brute_pairs(X, radius, gap):
    return {(i, j) for i in range(len(X)) for j in range(i + gap, len(X))
            if np.linalg.norm(X[i] - X[j]) < radius}


class TestGenerate:
    def test_noise_free_odometry(self):
        ds = generate(WorldConfig(odom_sigma_t=0.0, odom_sigma_r=0.0))
        assert all(a is b or (np.array_equal(a.t, b.t) and np.array_equal(a.q, b.q))
                   for a, b in zip(ds.gt_poses, ds.odom_poses))
        assert ds.no_drift

    def test_circle_two_laps(self, circle_world):
        ds = circle_world
        assert abs(len(ds) - 2 * math.pi * 50 * 2) <= 1
        assert len(ds.gt_poses) == len(ds.odom_poses) == len(ds.keyframes)
        assert np.array_equal(ds.odom_poses[0].t, ds.gt_poses[0].t)
        partners = {i for p in ds.gt_loop_pairs for i in p}
        assert partners == set(range(len(ds)))

    def test_deterministic(self):
        a, b = generate(WorldConfig(seed=4)), generate(WorldConfig(seed=4))
        for x, y in zip(a.keyframes, b.keyframes):
            assert np.array_equal(x.descriptor, y.descriptor)
            assert np.array_equal(x.pose.t, y.pose.t) and np.array_equal(x.pose.q, y.pose.q)
            assert (x.spaciousness, x.entropy_proxy) == (y.spaciousness, y.entropy_proxy)
        assert a.gt_loop_pairs == b.gt_loop_pairs

    def test_seeds_differ(self):
        a, b = generate(WorldConfig(seed=1)), generate(WorldConfig(seed=2))
        assert not np.array_equal(a.odom_poses[-1].t, b.odom_poses[-1].t)

    def test_planar(self, circle_world):
        for p in circle_world.gt_poses[:50]:
            assert p.t[2] == 0.0 and p.q[1] == 0.0 and p.q[2] == 0.0

    def test_spacing(self, circle_world):
        X = circle_world.gt_positions
        gaps = np.linalg.norm(np.diff(X, axis=0), axis=1)
        assert np.allclose(gaps, 1.0, atol=1e-3)

    @pytest.mark.parametrize("kind", ["figure_eight", "grid_walk", "line"])
    def test_other_kinds(self, kind):
        ds = generate(WorldConfig(seed=3, trajectory=TrajectorySpec(kind=kind)))
        assert len(ds) > 50
        gaps = np.linalg.norm(np.diff(ds.gt_positions, axis=0), axis=1)
        assert np.all(gaps < 1.0 + 1e-6)
        assert all(k.spaciousness > 0 for k in ds.keyframes)

    def test_drift_grows(self):
        lengths = (100.0, 200.0, 400.0)
        means = []
        for L in lengths:
            errs = []
            for s in range(50):
                ds = generate(WorldConfig(seed=s, trajectory=TrajectorySpec(kind="line", length=L)))
                errs.append(translation_distance(ds.gt_poses[-1], ds.odom_poses[-1]))
            means.append(np.mean(errs))
        assert means[0] < means[1] < means[2]

    def test_close_pairs_are_similar(self, circle_world):
        ds = circle_world
        sims = [cosine_similarity(ds.keyframes[i].descriptor, ds.keyframes[j].descriptor)
                for i, j in ds.gt_loop_pairs]
        assert min(sims) > 0.95

    def test_invalid(self):
        with pytest.raises(ValueError):
            WorldConfig(keyframe_spacing=0)
        with pytest.raises(ValueError):
            TrajectorySpec(kind="spiral")


class TestLoopPairs:
    def test_matches_brute_force(self, circle_world):
        X = circle_world.gt_positions
        assert circle_world.gt_loop_pairs == brute_pairs(X, 1.0, 50)

    def test_line_empty(self):
        ds = generate(WorldConfig(trajectory=TrajectorySpec(kind="line")))
        assert ds.gt_loop_pairs == set()

    def test_coincident_laps(self):
        X = np.tile(np.column_stack([np.arange(60.0), np.zeros(60), np.zeros(60)]), (2, 1))
        pairs = gt_loop_pairs(X, 0.5, 50)
        assert {(i, i + 60) for i in range(60)} <= pairs
        assert pairs == brute_pairs(X, 0.5, 50)

    def test_zero_radius(self, circle_world):
        assert gt_loop_pairs(circle_world.gt_positions, 0.0, 50) == set()

    def test_accepts_dataset(self, circle_world):
        assert gt_loop_pairs(circle_world) == circle_world.gt_loop_pairs

    def test_field_uses_run_seed(self):
        from kf_minset.descriptors import field_eval

        ds = generate(WorldConfig(seed=7, field=DescriptorFieldParams(seed=7)))
        assert np.allclose(ds.keyframes[3].descriptor, field_eval(DescriptorFieldParams(seed=7), ds.gt_poses[3].t))
