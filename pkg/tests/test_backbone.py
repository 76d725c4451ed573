import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaittake import ops
from gaittake.backbone import (
    backbone_forward,
    downsample_frames,
    glconv_a,
    glconv_b,
    global_branch,
    init_backbone,
    local_branch,
    spatial_gem,
)
from gaittake.config import BackboneConfig, ConfigError, ModelConfig, RunConfig
from gaittake.tensor import Tensor

from oracles import conv3d_direct, gem_direct


def T(a):
    return Tensor(np.asarray(a, dtype=float))


def block_params(rng, c_out, c_in, k=(3, 3, 3), prefix="b"):
    return {
        f"{prefix}.global.weight": T(rng.standard_normal((c_out, c_in) + k)),
        f"{prefix}.global.bias": T(rng.standard_normal(c_out)),
        f"{prefix}.local.weight": T(rng.standard_normal((c_out, c_in) + k)),
        f"{prefix}.local.bias": T(rng.standard_normal(c_out)),
    }


class TestGlobalBranch:
    def test_zero_input_zero_output(self):
        out = global_branch(T(np.zeros((2, 3, 4, 4))), T(np.ones((3, 2, 3, 3, 3))), T(np.zeros(3)))
        assert not out.data.any()

    def test_shape_preserved(self):
        # small channel counts, the spatial/temporal bookkeeping is the point
        out = global_branch(T(np.zeros((4, 30, 16, 11))), T(np.zeros((6, 4, 3, 3, 3))), T(np.zeros(6)))
        assert out.shape == (6, 30, 16, 11)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 2, 3, 3, 3)), rng.standard_normal(2)
        out = global_branch(T(x), T(w), T(b))
        np.testing.assert_allclose(out.data, conv3d_direct(x, w, b, (1, 1, 1), (1, 1, 1)), atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            global_branch(T(np.zeros((2, 3, 4, 4))), T(np.zeros((3, 5, 3, 3, 3))), T(np.zeros(3)))


class TestLocalBranch:
    def test_m1_equals_global(self):
        rng = np.random.default_rng(1)
        x, w, b = T(rng.standard_normal((2, 3, 8, 5))), T(rng.standard_normal((3, 2, 3, 3, 3))), T(rng.standard_normal(3))
        np.testing.assert_array_equal(local_branch(x, w, b, 1).data, global_branch(x, w, b).data)

    @pytest.mark.parametrize("m", [2, 4])
    def test_strips_are_independent_global_convs(self, m):
        rng = np.random.default_rng(m)
        x = rng.standard_normal((2, 3, 16, 5))
        w, b = T(rng.standard_normal((3, 2, 3, 3, 3))), T(rng.standard_normal(3))
        out = local_branch(T(x), w, b, m).data
        hs = 16 // m
        for i in range(m):
            strip = global_branch(T(x[:, :, i * hs : (i + 1) * hs]), w, b).data
            np.testing.assert_array_equal(out[:, :, i * hs : (i + 1) * hs], strip)

    def test_m4_on_16_rows(self):
        out = local_branch(T(np.ones((1, 2, 16, 3))), T(np.ones((1, 1, 3, 3, 3))), T(np.zeros(1)), 4)
        assert out.shape == (1, 2, 16, 3)
        # the row just below each strip boundary sees the zero padding of its own strip
        np.testing.assert_array_equal(out.data[0, 0, 3], out.data[0, 0, 4])

    def test_no_leak_across_strips(self):
        x = np.zeros((1, 1, 8, 3))
        x[0, 0, 0:4] = 1.0  # only the top strip is non-zero
        out = local_branch(T(x), T(np.ones((1, 1, 1, 3, 3))), T(np.zeros(1)), 2)
        assert not out.data[0, 0, 4:].any()

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 2, 2, 8, 4))
        w, b = T(rng.standard_normal((2, 2, 3, 3, 3))), T(rng.standard_normal(2))
        batched = local_branch(T(x), w, b, 2).data
        for i in range(3):
            np.testing.assert_array_equal(batched[i], local_branch(T(x[i]), w, b, 2).data)

    def test_indivisible_height(self):
        with pytest.raises(ValueError, match="divisible"):
            local_branch(T(np.zeros((1, 2, 6, 3))), T(np.zeros((1, 1, 3, 3, 3))), T(np.zeros(1)), 4)


class TestGLConv:
    def test_a_zero_local_is_global(self):
        rng = np.random.default_rng(2)
        x = T(rng.standard_normal((2, 3, 8, 5)))
        p = block_params(rng, 3, 2)
        p["b.local.weight"] = T(np.zeros((3, 2, 3, 3, 3)))
        p["b.local.bias"] = T(np.zeros(3))
        np.testing.assert_array_equal(glconv_a(x, p, "b", 4).data, global_branch(x, p["b.global.weight"], p["b.global.bias"]).data)

    def test_a_zero_global_is_local(self):
        rng = np.random.default_rng(3)
        x = T(rng.standard_normal((2, 3, 8, 5)))
        p = block_params(rng, 3, 2)
        p["b.global.weight"] = T(np.zeros((3, 2, 3, 3, 3)))
        p["b.global.bias"] = T(np.zeros(3))
        np.testing.assert_array_equal(
            glconv_a(x, p, "b", 4).data, local_branch(x, p["b.local.weight"], p["b.local.bias"], 4).data
        )

    def test_a_is_sum_of_oracles(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 2, 4, 3))
        p = block_params(rng, 2, 2)
        out = glconv_a(T(x), p, "b", 2).data
        g = conv3d_direct(x, p["b.global.weight"].data, p["b.global.bias"].data, (1, 1, 1), (1, 1, 1))
        loc = np.concatenate(
            [conv3d_direct(x[:, :, i * 2 : i * 2 + 2], p["b.local.weight"].data, p["b.local.bias"].data, (1, 1, 1), (1, 1, 1))
             for i in range(2)], axis=2)
        np.testing.assert_allclose(out, g + loc, atol=1e-10)

    def test_b_halves(self):
        rng = np.random.default_rng(6)
        x = T(rng.standard_normal((2, 3, 8, 5)))
        p = block_params(rng, 3, 2)
        out = glconv_b(x, p, "b", 4).data
        np.testing.assert_array_equal(out[:, :, :8], global_branch(x, p["b.global.weight"], p["b.global.bias"]).data)
        np.testing.assert_array_equal(out[:, :, 8:], local_branch(x, p["b.local.weight"], p["b.local.bias"], 4).data)

    def test_b_doubles_height(self):
        x = T(np.zeros((3, 30, 16, 11)))
        p = block_params(np.random.default_rng(0), 4, 3)
        out = glconv_b(x, p, "b", 4)
        assert out.shape == (4, 30, 32, 11)
        assert out.size == 2 * glconv_a(x, p, "b", 4).size

    @settings(max_examples=25, deadline=None)
    @given(
        c_in=st.integers(1, 3), c_out=st.integers(1, 3), t=st.integers(1, 4),
        m=st.sampled_from([1, 2, 4]), rows=st.integers(1, 2), w=st.integers(1, 4), seed=st.integers(0, 1000),
    )
    def test_shape_contracts(self, c_in, c_out, t, m, rows, w, seed):
        h = m * rows
        rng = np.random.default_rng(seed)
        x = T(rng.standard_normal((c_in, t, h, w)))
        p = block_params(rng, c_out, c_in)
        assert glconv_a(x, p, "b", m).shape == (c_out, t, h, w)
        assert glconv_b(x, p, "b", m).shape == (c_out, t, 2 * h, w)


class TestSpatialGeM:
    def test_p1_mean(self):
        x = np.random.default_rng(0).uniform(0.1, 2.0, size=(2, 3, 4, 5))
        assert np.max(np.abs(spatial_gem(T(x), 1.0).data - x.mean(-1))) < 1e-12

    def test_probe_values(self):
        probe = T([[[[1.0, 2.0, 3.0, 4.0]]]])
        assert abs(spatial_gem(probe, 64.0).data.item() - 4.0) < 0.15
        assert abs(spatial_gem(probe, 2.0).data.item() - np.sqrt(7.5)) < 1e-12
        assert abs(spatial_gem(probe, 2.0).data.item() - gem_direct([1, 2, 3, 4], 2.0)) < 1e-12

    def test_shape(self):
        assert spatial_gem(T(np.ones((4, 3, 8, 5))), 3.0).shape == (4, 3, 8)

    def test_bounded_and_monotone(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.uniform(0.01, 5.0, size=(1, 1, 1, 6))
            vals = [spatial_gem(T(x), p).data.item() for p in (1.0, 1.5, 2.0, 3.0, 8.0, 32.0)]
            assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
            assert x.mean() - 1e-12 <= vals[0] and vals[-1] <= x.max() + 1e-12

    def test_clamps_negative(self):
        out = spatial_gem(T([[[[-1.0, -2.0]]]]), 3.0)
        assert np.isclose(out.data.item(), 1e-6)


def small_cfg(**kw):
    base = dict(partitions=2, blocks=2, stem_channels=2, block_channels=(3, 3), pool_stages=(0,),
                stem_kernel=(1, 3, 3), glconv_kernel=(1, 3, 3))
    base.update(kw)
    return ModelConfig(backbone=BackboneConfig(**base), frame_height=8, frame_width=6)


class TestBackboneForward:
    def test_default_dims(self):
        cfg = ModelConfig()
        assert cfg.stage_shapes() == [(32, 22), (16, 11), (16, 11)]
        assert cfg.final_height == 16
        assert cfg.appearance_dim == 128 * 32 == 4096

    def test_block_types(self, monkeypatch):
        import gaittake.backbone as bb

        calls = []
        orig_a, orig_b = bb.glconv_a, bb.glconv_b
        monkeypatch.setattr(bb, "glconv_a", lambda *a, **k: calls.append("A") or orig_a(*a, **k))
        monkeypatch.setattr(bb, "glconv_b", lambda *a, **k: calls.append("B") or orig_b(*a, **k))
        cfg = small_cfg(blocks=3, block_channels=(2, 2, 2))
        params = {k: T(v) for k, v in init_backbone(cfg, np.random.default_rng(0)).items()}
        backbone_forward(np.random.default_rng(1).uniform(size=(2, 8, 6)), params, cfg)
        assert calls == ["A", "A", "B"]

    @pytest.mark.parametrize("t", [1, 2, 5])
    def test_t_preserved(self, t):
        cfg = small_cfg()
        params = {k: T(v) for k, v in init_backbone(cfg, np.random.default_rng(0)).items()}
        out = backbone_forward(np.random.default_rng(1).uniform(size=(t, 8, 6)), params, cfg)
        assert out.shape == (t, cfg.appearance_dim)
        assert cfg.appearance_dim == 3 * 2 * 4

    def test_temporal_permutation_equivariance(self):
        # temporal kernel extent 1 everywhere: frames never mix before attention
        cfg = small_cfg()
        params = {k: T(v) for k, v in init_backbone(cfg, np.random.default_rng(0)).items()}
        frames = np.random.default_rng(2).uniform(size=(5, 8, 6))
        perm = np.array([3, 0, 4, 1, 2])
        a = backbone_forward(frames, params, cfg).data
        b = backbone_forward(frames[perm], params, cfg).data
        np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-14)

    def test_batched_matches_single(self):
        cfg = small_cfg(glconv_kernel=(3, 3, 3))
        params = {k: T(v) for k, v in init_backbone(cfg, np.random.default_rng(0)).items()}
        frames = np.random.default_rng(3).uniform(size=(2, 4, 8, 6))
        batched = backbone_forward(frames, params, cfg).data
        for i in range(2):
            np.testing.assert_allclose(batched[i], backbone_forward(frames[i], params, cfg).data, atol=1e-13)

    def test_learnable_spatial_p(self):
        cfg = small_cfg(learn_spatial_p=True)
        arrays = init_backbone(cfg, np.random.default_rng(0))
        assert arrays["backbone.spatial_p"].tolist() == [3.0]

    def test_downsample(self):
        x = np.arange(16.0).reshape(1, 4, 4)
        np.testing.assert_array_equal(downsample_frames(x, 2)[0], [[2.5, 4.5], [10.5, 12.5]])


class TestBackboneConfig:
    def test_indivisible_partition_rejected(self):
        cfg = RunConfig()
        cfg.backbone.partitions = 3
        with pytest.raises(ConfigError, match="divisible"):
            cfg.validate()

    def test_single_block_rejected(self):
        cfg = RunConfig()
        cfg.backbone.blocks = 1
        cfg.backbone.block_channels = (8,)
        with pytest.raises(ConfigError, match="blocks"):
            cfg.validate()

    def test_spatial_p_below_one_rejected(self):
        cfg = RunConfig()
        cfg.backbone.spatial_p = 0.5
        with pytest.raises(ConfigError):
            cfg.validate()


def test_maxpool_path_runs():
    x = T(np.random.default_rng(0).standard_normal((1, 2, 4, 4)))
    assert ops.max_pool2d(x, 2).shape == (1, 2, 2, 2)
