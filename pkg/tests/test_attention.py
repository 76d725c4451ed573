import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaittake.attention import ClipBatch, TAParams, clip_split, init_attention, ta_aggregate, ta_apply, ta_weights
from gaittake.gradcheck import grad_check
from gaittake.tensor import Tensor


def ta_params(rng, dim, hidden=4, zero_second=False):
    arrays = init_attention("ta", dim, hidden, rng)
    if not zero_second:
        arrays["ta.conv2.weight"] = rng.standard_normal((hidden, 1))
        arrays["ta.conv2.bias"] = rng.standard_normal(1)
        arrays["ta.conv1.bias"] = rng.standard_normal(hidden)
    return TAParams.from_params({k: Tensor(v) for k, v in arrays.items()}, "ta")


class TestClipSplit:
    def test_exact(self):
        cb = clip_split(Tensor(np.zeros((30, 5))), 10)
        assert (cb.n_clips, cb.clip_length, cb.dropped) == (3, 10, 0)

    def test_floor(self):
        cb = clip_split(Tensor(np.zeros((35, 5))), 10)
        assert (cb.n_clips, cb.dropped) == (3, 5)

    def test_concatenation_restores_prefix(self):
        x = np.random.default_rng(0).standard_normal((35, 4))
        cb = clip_split(Tensor(x), 10)
        np.testing.assert_array_equal(cb.clips.data.reshape(-1, 4), x[:30])

    def test_too_short_names_both_values(self):
        with pytest.raises(ValueError, match=r"T=7.*L=10"):
            clip_split(Tensor(np.zeros((7, 3))), 10)

    def test_zero_length(self):
        with pytest.raises(ValueError):
            clip_split(Tensor(np.zeros((7, 3))), 0)

    def test_batched(self):
        cb = clip_split(Tensor(np.zeros((2, 23, 3))), 5)
        assert cb.clips.shape == (2, 4, 5, 3) and cb.dropped == 3

    @settings(max_examples=60, deadline=None)
    @given(t=st.integers(1, 64), data=st.data())
    def test_invariants(self, t, data):
        L = data.draw(st.integers(1, t))
        cb = clip_split(Tensor(np.zeros((t, 2))), L)
        s = cb.n_clips
        assert s == t // L and s >= 1
        assert s * L <= t < (s + 1) * L
        assert cb.dropped == t - s * L


class TestWeights:
    def test_zero_second_layer_uniform(self):
        rng = np.random.default_rng(0)
        p = ta_params(rng, 6, zero_second=True)
        w = ta_weights(Tensor(rng.standard_normal((5, 6))), p).data
        assert w.shape == (1, 5)
        np.testing.assert_array_equal(w, np.full((1, 5), 0.2))

    def test_singleton(self):
        rng = np.random.default_rng(1)
        w = ta_weights(Tensor(rng.standard_normal((1, 6))), ta_params(rng, 6)).data
        assert w.tolist() == [[1.0]]

    @settings(max_examples=50, deadline=None)
    @given(L=st.integers(1, 12), seed=st.integers(0, 10_000), scale=st.floats(0.1, 50.0))
    def test_probability_vector(self, L, seed, scale):
        rng = np.random.default_rng(seed)
        w = ta_weights(Tensor(scale * rng.standard_normal((L, 5))), ta_params(rng, 5)).data
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) <= 1e-12

    def test_batched_weights_sum(self):
        rng = np.random.default_rng(2)
        w = ta_weights(Tensor(rng.standard_normal((3, 4, 6, 5))), ta_params(rng, 5)).data
        assert w.shape == (3, 4, 6)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


class TestApply:
    def test_uniform_is_mean(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        out = ta_apply(Tensor(x), Tensor(np.full((1, 4), 0.25))).data
        np.testing.assert_allclose(out, x.mean(0, keepdims=True), atol=1e-15)

    def test_one_hot(self):
        x = np.random.default_rng(1).standard_normal((4, 3))
        out = ta_apply(Tensor(x), Tensor(np.array([[0.0, 0.0, 1.0, 0.0]]))).data
        np.testing.assert_array_equal(out, x[2:3])

    def test_random_against_dot_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            L, D = rng.integers(1, 9), rng.integers(1, 9)
            x, w = rng.standard_normal((L, D)), rng.dirichlet(np.ones(L))
            expect = np.array([[sum(w[i] * x[i, d] for i in range(L)) for d in range(D)]])
            np.testing.assert_allclose(ta_apply(Tensor(x), Tensor(w[None])).data, expect, rtol=0, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ta_apply(Tensor(np.zeros((4, 3))), Tensor(np.ones((1, 3)) / 3))


class TestAggregate:
    def test_zero_init_is_clip_mean(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((30, 7))
        out = ta_aggregate(clip_split(Tensor(x), 10), ta_params(rng, 7, zero_second=True)).data
        expect = x.reshape(3, 10, 7).mean(1)
        assert np.max(np.abs(out - expect)) <= 1e-15

    def test_single_clip_is_apply(self):
        rng = np.random.default_rng(4)
        x, p = Tensor(rng.standard_normal((6, 5))), ta_params(rng, 5)
        agg = ta_aggregate(clip_split(x, 6), p).data
        np.testing.assert_array_equal(agg, ta_apply(x, ta_weights(x, p)).data)

    def test_identical_clips_identical_rows(self):
        rng = np.random.default_rng(5)
        clip = rng.standard_normal((4, 5))
        out = ta_aggregate(clip_split(Tensor(np.tile(clip, (3, 1))), 4), ta_params(rng, 5)).data
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(out[0], out[2])

    def test_clip_permutation_equivariant(self):
        rng = np.random.default_rng(6)
        x, p = rng.standard_normal((3, 4, 5)), ta_params(rng, 5)
        a = ta_aggregate(ClipBatch(Tensor(x), 0), p).data
        b = ta_aggregate(ClipBatch(Tensor(x[[2, 0, 1]]), 0), p).data
        np.testing.assert_array_equal(b, a[[2, 0, 1]])

    def test_uniform_invariant_to_order_within_clip(self):
        rng = np.random.default_rng(7)
        x, p = rng.standard_normal((1, 6, 4)), ta_params(rng, 4, zero_second=True)
        a = ta_aggregate(ClipBatch(Tensor(x), 0), p).data
        b = ta_aggregate(ClipBatch(Tensor(x[:, ::-1].copy()), 0), p).data
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_shape(self):
        rng = np.random.default_rng(8)
        assert ta_aggregate(clip_split(Tensor(rng.standard_normal((23, 5))), 4), ta_params(rng, 5)).shape == (5, 5)

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        arrays = init_attention("ta", 4, 3, rng)
        arrays["ta.conv2.weight"] = rng.standard_normal((3, 1))
        leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        proj = rng.standard_normal((2, 4))

        def f(x, *ps):
            params = TAParams(*ps)
            return (ta_aggregate(ClipBatch(x, 0), params) * Tensor(proj)).sum()

        assert grad_check(f, [x] + list(leaves.values())) < 1e-5
