"""Full model: parameters with stable names and the end-to-end forward pass."""

from __future__ import annotations

from collections.abc import Mapping
from typing import Iterator, Optional, Sequence

import numpy as np

from . import ops
from .attention import TAParams, clip_split, init_attention, ta_aggregate
from .backbone import backbone_forward, init_backbone
from .config import ModelConfig
from .head import clip_gem, fuse_clips, heads_forward, init_heads
from .pose import init_pose, normalize_keypoints, pose_forward
from .sequences import GaitSample
from .tensor import Tensor


class ModelParams(Mapping):
    """Ordered mapping of parameter name -> leaf :class:`Tensor`.

    Names are hierarchical (``backbone.block1.local.weight``,
    ``ta.pose.conv2.bias``, ``head.fc3.weight``...) and their order is the
    canonical order used by checkpoints and gradient accumulation.
    """

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        return cls.from_arrays(cfg, init_arrays(cfg, rng))

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        expected = expected_shapes(cfg)
        check_shapes(expected, {k: np.shape(v) for k, v in arrays.items()})
        return cls({name: Tensor(arrays[name], requires_grad=True, name=name) for name in expected})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self._tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self._tensors.items()})

    @property
    def n_values(self) -> int:
        return sum(t.size for t in self._tensors.values())


def init_arrays(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = init_backbone(cfg, rng)
    d_app = cfg.appearance_dim
    out.update(init_attention("ta.appearance", d_app, cfg.attention_hidden(d_app), rng))
    if cfg.pose.enabled:
        out.update(init_pose(cfg.pose.dim, rng))
        out.update(init_attention("ta.pose", cfg.pose.dim, cfg.attention_hidden(cfg.pose.dim), rng))
    if cfg.head.learn_clip_p:
        out["head.clip_p"] = np.array([cfg.head.clip_p])
    out.update(init_heads(cfg.fused_dim, cfg.head.dim, cfg.head.heads, rng))
    return out


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    # draw from a throwaway generator: only the shapes matter
    return {k: v.shape for k, v in init_arrays(cfg, np.random.default_rng(0)).items()}


def check_shapes(expected: Mapping[str, tuple], actual: Mapping[str, tuple]) -> None:
    """Raise ``ValueError`` naming the first parameter whose name or shape differs."""
    exp_names, act_names = list(expected), list(actual)
    for i, name in enumerate(exp_names):
        if i >= len(act_names):
            raise ValueError(f"parameter {name!r} missing (expected shape {tuple(expected[name])})")
        if act_names[i] != name:
            if name not in actual:
                raise ValueError(f"parameter {name!r} missing; found {act_names[i]!r} in its place")
            raise ValueError(f"parameter order differs at {name!r}: found {act_names[i]!r}")
        if tuple(actual[name]) != tuple(expected[name]):
            raise ValueError(
                f"parameter {name!r} has shape {tuple(actual[name])}, expected {tuple(expected[name])}"
            )
    if len(act_names) > len(exp_names):
        raise ValueError(f"unexpected parameter {act_names[len(exp_names)]!r}")


def model_forward(
    silhouettes,
    keypoints,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    seq_ids: Optional[Sequence[str]] = None,
) -> Tensor:
    """Embeddings for one sequence (``C x d_e``) or a batch (``N x C x d_e``).

    ``silhouettes`` is ``(N x) T x H x W`` in [0, 1] or a :class:`GaitSample`
    (then ``keypoints`` is ignored). Batched items must share T.
    """
    if isinstance(silhouettes, GaitSample):
        sample = silhouettes
        seq_ids = [sample.seq_id]
        silhouettes = sample.silhouettes.as_float()
        keypoints = normalize_keypoints(sample.keypoints).data
    sil = np.asarray(silhouettes, dtype=np.float64)
    single = sil.ndim == 3
    if single:
        sil = sil[None]
        keypoints = np.asarray(keypoints)[None]
    n, t = sil.shape[:2]
    L = cfg.attention.clip_length
    if t < L:
        ids = ", ".join(seq_ids) if seq_ids else "<unnamed>"
        raise ValueError(f"sequence {ids}: T={t} is shorter than clip length L={L}")
    act = cfg.backbone.activation

    appearance = backbone_forward(sil, params, cfg)
    app_clips = ta_aggregate(clip_split(appearance, L), TAParams.from_params(params, "ta.appearance", act))
    if cfg.pose.enabled:
        pose_clips = pose_forward(keypoints, params, L, act)
    else:
        pose_clips = Tensor(np.zeros(app_clips.shape[:-1] + (cfg.pose.dim,)))
    fused = ops.softplus(fuse_clips(app_clips, pose_clips))
    p = params["head.clip_p"] if cfg.head.learn_clip_p else cfg.head.clip_p
    pooled = clip_gem(fused, p)
    emb = heads_forward(pooled, params, cfg.head.heads)
    return ops.reshape(emb, emb.shape[1:]) if single else emb


def stack_samples(samples: Sequence[GaitSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays (silhouettes in [0, 1], normalized keypoints) for equal-length samples."""
    lengths = {len(s) for s in samples}
    if len(lengths) != 1:
        raise ValueError(f"cannot batch sequences of different lengths {sorted(lengths)}")
    sil = np.stack([s.silhouettes.as_float() for s in samples])
    keys = np.stack([normalize_keypoints(s.keypoints).data for s in samples])
    return sil, keys


def embed_samples(
    samples: Sequence[GaitSample], params: Mapping[str, Tensor], cfg: ModelConfig, batch_size: int = 16
) -> np.ndarray:
    """Forward-only embeddings ``N x C x d_e``, batching equal-length samples in input order."""
    out = np.empty((len(samples), cfg.head.heads, cfg.head.dim))
    frozen = {k: Tensor(v.data) for k, v in params.items()}
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(len(s), []).append(i)
    for _, idx in sorted(groups.items()):
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            sil, keys = stack_samples([samples[i] for i in chunk])
            emb = model_forward(sil, keys, frozen, cfg, seq_ids=[samples[i].seq_id for i in chunk])
            out[chunk] = emb.data
    return out
