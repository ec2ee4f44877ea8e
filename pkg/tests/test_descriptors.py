import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kf_minset.descriptors import (DescriptorFieldParams, cosine_similarity, euclidean_distance, field_eval,
                                   field_eval_many, histogram_entropy)
from kf_minset.errors import DimensionMismatch, ZeroVector

vec = st.lists(st.floats(-100, 100, allow_nan=False), min_size=4, max_size=4).map(np.array)


class TestCosine:
    def test_identical(self):
        assert cosine_similarity([1, 0, 0], [1, 0, 0]) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_diagonal(self):
        assert abs(cosine_similarity([1, 1], [1, 0]) - 0.70710678) < 1e-8

    def test_clamped_at_zero(self):
        assert cosine_similarity([1, 0], [-1, 0]) == 0.0

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            cosine_similarity([0, 0], [1, 0])
        with pytest.raises(ZeroVector):
            cosine_similarity([1, 0], [1e-13, 0])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine_similarity([1, 0], [1, 0, 0])

    @settings(max_examples=200)
    @given(vec, vec, st.floats(1e-3, 1e3))
    def test_symmetric_bounded_scale_invariant(self, a, b, s):
        if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
            return
        c = cosine_similarity(a, b)
        assert 0.0 <= c <= 1.0
        assert c == cosine_similarity(b, a)
        assert abs(cosine_similarity(a, s * a) - 1.0) < 1e-12
        assert abs(cosine_similarity(s * a, b) - c) < 1e-12


class TestEuclidean:
    def test_self(self, rng):
        d = rng.normal(size=16)
        assert euclidean_distance(d, d) == 0.0

    def test_pythagoras(self):
        assert euclidean_distance([0, 0], [3, 4]) == 5.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            euclidean_distance([1, 0], [1])

    def test_metric_on_random_triples(self, rng):
        for _ in range(500):
            a, b, c = rng.normal(size=(3, 32))
            assert euclidean_distance(a, b) == euclidean_distance(b, a)
            assert euclidean_distance(a, c) <= euclidean_distance(a, b) + euclidean_distance(b, c) + 1e-12


class TestField:
    def test_deterministic(self):
        p = DescriptorFieldParams(seed=3)
        a = field_eval(p, [1.0, 2.0, 0.0])
        b = field_eval(p, [1.0, 2.0, 0.0])
        assert np.array_equal(a, b)
        assert a.shape == (256,)
        assert abs(np.linalg.norm(a) - 1.0) < 1e-12

    def test_seeds_differ(self):
        a = field_eval(DescriptorFieldParams(seed=1), [0, 0, 0])
        b = field_eval(DescriptorFieldParams(seed=2), [0, 0, 0])
        assert not np.allclose(a, b)

    def test_smooth_at_one_millimeter(self, rng):
        p = DescriptorFieldParams(seed=5, length_scale=10.0)
        for _ in range(100):
            x = rng.uniform(-200, 200, 3)
            d = rng.normal(size=3)
            y = x + 1e-3 * d / np.linalg.norm(d)
            assert cosine_similarity(field_eval(p, x), field_eval(p, y)) > 0.999

    def test_lipschitz_bound(self, rng):
        # |cos(w.p + b) - cos(w.q + b)| <= |w| |p - q| per component, then normalization
        p = DescriptorFieldParams(seed=9, length_scale=5.0)
        x = rng.uniform(-50, 50, (200, 3))
        y = x + rng.normal(0, 0.5, x.shape)
        dx = np.linalg.norm(field_eval_many(p, x) - field_eval_many(p, y), axis=1)
        ratio = dx / np.linalg.norm(x - y, axis=1)
        assert ratio.max() < 10.0 / p.length_scale

    def test_similarity_decays_with_distance(self, rng):
        p = DescriptorFieldParams(seed=11, length_scale=10.0)
        x = rng.uniform(-100, 100, (300, 3))
        near = np.mean([cosine_similarity(field_eval(p, a), field_eval(p, a + [1, 0, 0])) for a in x])
        far = np.mean([cosine_similarity(field_eval(p, a), field_eval(p, a + [60, 0, 0])) for a in x])
        assert near > 0.9 > far

    def test_position_only(self, rng):
        # the field takes only a position, so poses differing in yaw at the same spot agree exactly
        from kf_minset.geometry import Pose

        p = DescriptorFieldParams(seed=1)
        for _ in range(1000):
            t = rng.uniform(-100, 100, 3)
            a = Pose.from_yaw(rng.uniform(-3, 3), t)
            b = Pose.from_yaw(rng.uniform(-3, 3), t)
            assert field_eval(p, a.t).tobytes() == field_eval(p, b.t).tobytes()

    def test_many_matches_single(self, rng):
        p = DescriptorFieldParams(seed=4)
        x = rng.uniform(-10, 10, (20, 3))
        many = field_eval_many(p, x)
        for i in range(20):
            assert np.allclose(many[i], field_eval(p, x[i]), atol=1e-15)

    def test_noise_only_with_generator(self):
        p = DescriptorFieldParams(seed=4, noise_sigma=0.01)
        clean = field_eval(p, [0, 0, 0])
        assert np.array_equal(clean, field_eval(p, [0, 0, 0]))
        noisy = field_eval(p, [0, 0, 0], np.random.default_rng(0))
        diff = noisy - clean
        assert 0.005 < diff.std() < 0.015

    @pytest.mark.parametrize("kw", [dict(length_scale=0), dict(noise_sigma=-1), dict(dim=256, num_frequencies=100)])
    def test_invalid_params(self, kw):
        with pytest.raises(ValueError):
            DescriptorFieldParams(**kw)


def test_histogram_entropy():
    assert histogram_entropy(np.zeros(10)) == 0.0
    # values spread evenly over 16 bins give log(16)
    assert abs(histogram_entropy(np.arange(16) + 0.5, bins=16) - math.log(16)) < 1e-12
