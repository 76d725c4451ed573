"""Clip-wise temporal attention over per-frame feature sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass
class ClipBatch:
    """``S x L x D`` clips (or ``N x S x L x D``) plus the count of dropped trailing frames."""

    clips: Tensor
    dropped: int

    @property
    def n_clips(self) -> int:
        return self.clips.shape[-3]

    @property
    def clip_length(self) -> int:
        return self.clips.shape[-2]


@dataclass
class TAParams:
    """Two per-frame scoring layers (kernel-1 convolutions over the clip axis)."""

    conv1_weight: Tensor
    conv1_bias: Tensor
    conv2_weight: Tensor
    conv2_bias: Tensor
    activation: str = "softplus"

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str, activation: str = "softplus") -> "TAParams":
        return cls(
            params[f"{prefix}.conv1.weight"],
            params[f"{prefix}.conv1.bias"],
            params[f"{prefix}.conv2.weight"],
            params[f"{prefix}.conv2.bias"],
            activation,
        )


def clip_split(x: Tensor, clip_length: int) -> ClipBatch:
    """Cut ``T x D`` (or ``N x T x D``) into floor(T/L) contiguous clips; trailing frames are dropped."""
    t = x.shape[-2]
    if clip_length < 1:
        raise ValueError(f"clip length must be >= 1, got {clip_length}")
    if t < clip_length:
        raise ValueError(f"sequence has T={t} frames, fewer than clip length L={clip_length}")
    s = t // clip_length
    used = s * clip_length
    kept = ops.slice_(x, -2, 0, used) if used < t else x
    shape = x.shape[:-2] + (s, clip_length, x.shape[-1])
    return ClipBatch(ops.reshape(kept, shape), t - used)


def ta_weights(clip: Tensor, params: TAParams) -> Tensor:
    """Softmax attention over the L frames of each clip.

    A single ``L x D`` clip gives a ``1 x L`` vector; batched ``... x L x D``
    input gives ``... x L``.
    """
    act = ops.ACTIVATIONS[params.activation]
    hidden = act(ops.linear(clip, params.conv1_weight, params.conv1_bias))
    logits = ops.linear(hidden, params.conv2_weight, params.conv2_bias)
    logits = ops.reshape(logits, logits.shape[:-1])
    weights = ops.softmax(logits, axis=-1)
    return ops.reshape(weights, (1, clip.shape[0])) if clip.ndim == 2 else weights


def ta_apply(clip: Tensor, weights: Tensor) -> Tensor:
    """Attention-weighted sum of frame features: ``L x D`` with ``1 x L`` -> ``1 x D``."""
    if clip.ndim == 2:
        if weights.shape not in ((1, clip.shape[0]), (clip.shape[0],)):
            raise ValueError(f"weights {weights.shape} do not match clip length {clip.shape[0]}")
        w = ops.reshape(weights, (clip.shape[0], 1))
        return ops.reshape(ops.reduce(w * clip, axis=0, kind="sum"), (1, clip.shape[1]))
    if weights.shape != clip.shape[:-1]:
        raise ValueError(f"weights {weights.shape} do not match clips {clip.shape}")
    w = ops.reshape(weights, weights.shape + (1,))
    return ops.reduce(w * clip, axis=-2, kind="sum")


def ta_aggregate(clips: ClipBatch, params: TAParams) -> Tensor:
    """Per-clip attention pooling: ``S x L x D -> S x D`` (batched: ``N x S x D``)."""
    return ta_apply(clips.clips, ta_weights(clips.clips, params))


def init_attention(prefix: str, dim: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    # zero second layer: uniform weights, i.e. plain clip averaging, at initialization
    return {
        f"{prefix}.conv1.weight": rng.standard_normal((dim, hidden)) / np.sqrt(dim),
        f"{prefix}.conv1.bias": np.zeros(hidden),
        f"{prefix}.conv2.weight": np.zeros((hidden, 1)),
        f"{prefix}.conv2.bias": np.zeros(1),
    }
