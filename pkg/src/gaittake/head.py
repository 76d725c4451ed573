"""Clip fusion, clip-axis GeM pooling and the C embedding heads."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import ops
from .tensor import Tensor


def fuse_clips(appearance: Tensor, pose: Tensor) -> Tensor:
    """Concatenate per-clip appearance and pose features along the feature axis."""
    if appearance.shape[:-1] != pose.shape[:-1]:
        raise ValueError(f"clip count mismatch: appearance {appearance.shape} vs pose {pose.shape}")
    return ops.concat([appearance, pose], axis=-1)


def clip_gem(fused: Tensor, p) -> Tensor:
    """GeM over the clip axis: ``S x F -> 1 x F`` (batched ``N x S x F -> N x F``)."""
    if fused.ndim == 2:
        return ops.reshape(ops.gem(fused, p, axis=0), (1, fused.shape[1]))
    return ops.gem(fused, p, axis=-2)


def heads_forward(pooled: Tensor, params: Mapping[str, Tensor], heads: int) -> Tensor:
    """C independent affine maps of the same pooled vector.

    A length-F vector gives ``C x d_e``; ``N x F`` rows (including the
    ``1 x F`` output of :func:`clip_gem`) give ``N x C x d_e``.
    """
    single = pooled.ndim == 1
    x = ops.reshape(pooled, (1, pooled.shape[-1])) if single else pooled
    outs = [ops.linear(x, params[f"head.fc{j}.weight"], params[f"head.fc{j}.bias"]) for j in range(heads)]
    emb = ops.stack(outs, axis=1)
    return ops.reshape(emb, emb.shape[1:]) if single else emb


def init_heads(in_dim: int, dim: int, heads: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for j in range(heads):
        out[f"head.fc{j}.weight"] = rng.standard_normal((in_dim, dim)) / np.sqrt(in_dim)
        out[f"head.fc{j}.bias"] = np.zeros(dim)
    return out
