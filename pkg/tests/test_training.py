import filecmp

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaittake.config import BatchSpec, TripletConfig, micro_config
from gaittake.gradcheck import grad_check
from gaittake.sequences import GaitSample, KeypointSequence, SilhouetteSequence
from gaittake.tensor import Tensor
from gaittake.training import (
    CheckpointError,
    TrainingError,
    TrainState,
    checkpoint_load,
    checkpoint_save,
    crop_indices,
    read_metrics,
    sample_batch,
    train,
    train_step,
    triplet_loss,
)

from oracles import triplet_enumerate


def make_sample(rng, ident, idx, t, h=8, w=6):
    base = np.random.default_rng(int(ident)).uniform(size=(h, w)) > 0.5
    frames = np.stack([np.roll(base, k % 2, axis=1) ^ (rng.uniform(size=(h, w)) > 0.9) for k in range(t)]).astype(float)
    pts = np.zeros((t, 17, 3))
    pts[..., :2] = rng.uniform(0, w, size=(t, 17, 2))
    pts[:, 11, :2], pts[:, 12, :2] = [2.0, 6.0], [4.0, 6.0]
    pts[:, 5, :2], pts[:, 6, :2] = [2.0, 2.0], [4.0, 2.0]
    pts[..., 2] = 1.0
    sid = f"{ident}/nm-{idx:02d}/090"
    return GaitSample(SilhouetteSequence(frames, ident, 90, "NM", sid), KeypointSequence(pts))


def micro_dataset(n_ids=3, per_id=3, t=6, seed=0):
    rng = np.random.default_rng(seed)
    return [make_sample(rng, f"{i:03d}", j, t) for i in range(1, n_ids + 1) for j in range(1, per_id + 1)]


class TestSampling:
    def test_pk_count(self):
        data = [make_sample(np.random.default_rng(0), f"{i:03d}", j, 4) for i in range(8) for j in range(8)]
        batch = sample_batch(data, BatchSpec(8, 8, 4), np.random.default_rng(0))
        assert len(batch) == 64
        ids = [b[2] for b in batch]
        assert len(set(ids)) == 8 and all(ids.count(i) == 8 for i in set(ids))

    def test_full_length_crop(self):
        for seed in range(5):
            np.testing.assert_array_equal(crop_indices(30, 30, np.random.default_rng(seed)), np.arange(30))

    def test_looped_crop(self):
        idx = crop_indices(12, 30, np.random.default_rng(3))
        assert len(idx) == 30
        assert np.all(np.diff(idx) % 12 == 1)
        assert idx.max() < 12

    def test_silhouette_and_keypoint_same_window(self):
        data = micro_dataset(2, 2, t=10)
        for sil, keys, _ in sample_batch(data, BatchSpec(2, 2, 4), np.random.default_rng(1)):
            sample = next(s for s in data if s.seq_id == sil.seq_id)
            start = next(i for i in range(10) if np.array_equal(sample.silhouettes.frames[i], sil.frames[0])
                         and np.array_equal(sample.keypoints.points[i], keys.points[0]))
            np.testing.assert_array_equal(keys.points, sample.keypoints.points[start : start + 4])

    def test_too_few_identities(self):
        with pytest.raises(ValueError, match=r"2 identities"):
            sample_batch(micro_dataset(2, 3), BatchSpec(4, 2, 4), np.random.default_rng(0))

    def test_too_few_sequences(self):
        with pytest.raises(ValueError, match=r"0 with enough"):
            sample_batch(micro_dataset(3, 2), BatchSpec(2, 3, 4), np.random.default_rng(0))


class TestTriplet:
    @settings(max_examples=60, deadline=None)
    @given(P=st.integers(2, 4), K=st.integers(1, 4), C=st.integers(1, 3), d=st.integers(1, 4),
           margin=st.floats(0.0, 2.0), seed=st.integers(0, 10_000))
    def test_matches_enumeration(self, P, K, C, d, margin, seed):
        rng = np.random.default_rng(seed)
        emb = rng.standard_normal((P * K, C, d))
        ids = [str(i // K) for i in range(P * K)]
        perm = rng.permutation(P * K)
        emb, ids = emb[perm], [ids[i] for i in perm]
        got = triplet_loss(Tensor(emb), ids, margin).item()
        assert abs(got - triplet_enumerate(emb, ids, margin)) <= 1e-12

    @pytest.mark.parametrize("weighting", ["uniform", "softmax", "hard"])
    def test_all_equal_is_margin(self, weighting):
        emb = np.ones((8, 2, 3))
        ids = [str(i // 2) for i in range(8)]
        assert triplet_loss(Tensor(emb), ids, TripletConfig(0.3, weighting)).item() == 0.3

    @pytest.mark.parametrize("weighting", ["uniform", "softmax", "hard"])
    def test_separated_clusters_zero(self, weighting):
        emb = np.zeros((6, 2, 2))
        emb[3:] = 5.0
        ids = ["a"] * 3 + ["b"] * 3
        assert triplet_loss(Tensor(emb), ids, TripletConfig(0.2, weighting)).item() == 0.0

    def test_empty_positive_counted(self):
        emb = np.random.default_rng(0).standard_normal((5, 1, 2))
        ids = ["a", "a", "b", "b", "c"]
        loss, stats = triplet_loss(Tensor(emb), ids, 0.2, return_stats=True)
        assert stats.empty_positive == 1 and stats.anchors == 5
        assert abs(loss.item() - triplet_enumerate(emb, ids, 0.2)) <= 1e-12

    def test_single_identity_rejected(self):
        with pytest.raises(ValueError, match="2 identities"):
            triplet_loss(Tensor(np.zeros((3, 1, 2))), ["a", "a", "a"], 0.2)

    def test_hard_picks_extremes(self):
        emb = np.array([[[0.0]], [[1.0]], [[3.0]], [[2.0]], [[10.0]]])
        ids = ["a", "a", "a", "b", "b"]
        # anchor 0: hardest positive 3, nearest negative 2 -> 0.5 + 3 - 2 = 1.5
        loss = triplet_loss(Tensor(emb), ids, TripletConfig(0.5, "hard"))
        hinges = [max(0, 0.5 + 3 - 2), max(0, 0.5 + 2 - 1), max(0, 0.5 + 3 - 1), max(0, 0.5 + 8 - 1), max(0, 0.5 + 8 - 7)]
        assert abs(loss.item() - sum(hinges) / 5) < 1e-12

    @pytest.mark.parametrize("weighting", ["uniform", "softmax", "hard"])
    def test_gradcheck_away_from_kinks(self, weighting):
        rng = np.random.default_rng(4)
        ids = [str(i // 2) for i in range(6)]
        cfg = TripletConfig(0.5, weighting)
        for _ in range(20):
            emb = rng.standard_normal((6, 2, 3))
            d = np.linalg.norm(emb[:, None] - emb[None], axis=-1)
            if d[~np.eye(6, dtype=bool)].min() < 1e-2:
                continue
            x = Tensor(emb, requires_grad=True)
            margins = self._hinge_args(emb, ids, cfg)
            if np.min(np.abs(margins)) > 1e-3:
                assert grad_check(lambda e: triplet_loss(e, ids, cfg), [x]) < 1e-5
                return
        pytest.fail("no kink-free batch drawn")

    @staticmethod
    def _hinge_args(emb, ids, cfg):
        ids = np.asarray(ids)
        d = np.linalg.norm(emb[:, None] - emb[None], axis=-1)
        out = []
        for a in range(len(ids)):
            pos = (ids == ids[a]) & (np.arange(len(ids)) != a)
            neg = ids != ids[a]
            for c in range(emb.shape[1]):
                dp, dn = d[a, pos, c], d[a, neg, c]
                if cfg.weighting == "uniform":
                    out.append(cfg.margin + dp.mean() - dn.mean())
                elif cfg.weighting == "hard":
                    out.append(cfg.margin + dp.max() - dn.min())
                else:
                    wp, wn = np.exp(dp - dp.max()), np.exp(-dn + dn.min())
                    out.append(cfg.margin + (wp * dp).sum() / wp.sum() - (wn * dn).sum() / wn.sum())
        return np.array(out)


def micro_run_cfg(**training):
    cfg = micro_config()
    cfg.training.learning_rate = 1e-2
    for k, v in training.items():
        setattr(cfg.training, k, v)
    return cfg


def fixed_batch(cfg, seed=0):
    return sample_batch(micro_dataset(), cfg.batch, np.random.default_rng(seed))


def assert_states_equal(a, b):
    assert a.step == b.step
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
        np.testing.assert_array_equal(a.m[k], b.m[k])
        np.testing.assert_array_equal(a.v[k], b.v[k])
    assert a.rng.bit_generator.state == b.rng.bit_generator.state


class TestTrainStep:
    def test_zero_lr_leaves_params(self):
        cfg = micro_run_cfg(learning_rate=0.0)
        state = TrainState.init(cfg)
        before = {k: t.data.copy() for k, t in state.params.items()}
        state, met = train_step(state, fixed_batch(cfg), cfg)
        assert state.step == 1 and met.grad_norm > 0
        for k, t in state.params.items():
            np.testing.assert_array_equal(t.data, before[k])

    def test_overfit_monotone(self):
        cfg = micro_run_cfg(learning_rate=1e-3)
        state, batch = TrainState.init(cfg), fixed_batch(cfg)
        losses = []
        for _ in range(50):
            state, met = train_step(state, batch, cfg)
            losses.append(met.loss)
        assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_metrics_fields(self):
        cfg = micro_run_cfg()
        _, met = train_step(TrainState.init(cfg), fixed_batch(cfg), cfg)
        fields = met.csv().split(",")
        assert len(fields) == 5 and int(fields[0]) == 1
        assert 0.0 <= met.active_fraction <= 1.0

    def test_determinism(self):
        cfg = micro_run_cfg()
        data = micro_dataset()
        a = train(cfg, data, steps=10).state
        b = train(cfg, data, steps=10).state
        assert_states_equal(a, b)

    def test_nonfinite_aborts_with_block_name(self):
        cfg = micro_run_cfg()
        state = TrainState.init(cfg)
        state.params["head.fc1.weight"].data[0, 0] = np.nan
        with pytest.raises(TrainingError, match=r"step 1.*head\.fc1\.weight"):
            train_step(state, fixed_batch(cfg), cfg)


class TestCheckpoint:
    def test_roundtrip_bytes(self, tmp_path):
        cfg = micro_run_cfg()
        state = train(cfg, micro_dataset(), steps=2).state
        checkpoint_save(state, tmp_path / "a", cfg.to_ini())
        loaded = checkpoint_load(tmp_path / "a", cfg)
        assert_states_equal(state, loaded)
        checkpoint_save(loaded, tmp_path / "b", cfg.to_ini())
        for name in ("tensors.bin", "manifest.json"):
            assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)

    def test_truncated_rejected(self, tmp_path):
        cfg = micro_run_cfg()
        checkpoint_save(TrainState.init(cfg), tmp_path, "")
        raw = (tmp_path / "tensors.bin").read_bytes()
        (tmp_path / "tensors.bin").write_bytes(raw[:-9])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint_load(tmp_path)

    def test_shape_mismatch_names_entry(self, tmp_path):
        cfg = micro_run_cfg()
        checkpoint_save(TrainState.init(cfg), tmp_path, "")
        other = micro_run_cfg()
        other.head.dim = 5
        with pytest.raises(ValueError, match=r"head\.fc0\.weight"):
            checkpoint_load(tmp_path, other)

    def test_resume_bit_exact(self, tmp_path):
        cfg = micro_run_cfg(checkpoint_every=3)
        data = micro_dataset()
        unbroken = train(cfg, data, steps=8, out_dir=tmp_path / "full")
        train(cfg, data, steps=3, out_dir=tmp_path / "part")
        resumed = train(cfg, data, state=checkpoint_load(tmp_path / "part" / "checkpoints" / "latest", cfg),
                        steps=5, out_dir=tmp_path / "part")
        assert_states_equal(unbroken.state, resumed.state)
        full = read_metrics(tmp_path / "full" / "metrics.csv")
        part = read_metrics(tmp_path / "part" / "metrics.csv")
        assert [r["step"] for r in part] == list(range(1, 9))
        for a, b in zip(full, part):
            assert (a["loss"], a["active_fraction"], a["grad_norm"]) == (b["loss"], b["active_fraction"], b["grad_norm"])
        assert filecmp.cmp(tmp_path / "full/checkpoints/latest/tensors.bin",
                           tmp_path / "part/checkpoints/latest/tensors.bin", shallow=False)
