"""Global/local 3-D convolution backbone producing per-frame appearance features.

Feature maps are ``c x T x h x w`` or batched ``N x c x T x h x w``; every
function accepts both.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import ops
from .config import ModelConfig
from .tensor import Tensor


def _same_pad(kernel_shape) -> tuple[int, int, int]:
    return tuple(k // 2 for k in kernel_shape[2:])


def global_branch(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Whole-map 3-D convolution; extents are preserved."""
    return ops.conv3d(x, weight, bias, pad=_same_pad(weight.shape))


def local_branch(x: Tensor, weight: Tensor, bias: Tensor, partitions: int) -> Tensor:
    """Apply one shared kernel to each of ``partitions`` horizontal strips independently.

    Each strip is zero-padded at its own borders, so no information crosses
    strip boundaries. Strip outputs are stacked back along the height axis.
    """
    batched = x.ndim == 5
    if not batched:
        x = ops.reshape(x, (1,) + x.shape)
    n, c, t, h, w = x.shape
    if h % partitions:
        raise ValueError(f"height {h} is not divisible into {partitions} partitions")
    hs = h // partitions
    strips = ops.reshape(x, (n, c, t, partitions, hs, w))
    strips = ops.transpose(strips, (0, 3, 1, 2, 4, 5))
    strips = ops.reshape(strips, (n * partitions, c, t, hs, w))
    out = ops.conv3d(strips, weight, bias, pad=_same_pad(weight.shape))
    c2 = out.shape[1]
    out = ops.reshape(out, (n, partitions, c2, t, hs, w))
    out = ops.transpose(out, (0, 2, 3, 1, 4, 5))
    out = ops.reshape(out, (n, c2, t, h, w))
    return out if batched else ops.reshape(out, out.shape[1:])


def glconv_a(x: Tensor, params: Mapping[str, Tensor], prefix: str, partitions: int) -> Tensor:
    """Additive fusion: global + local, shape preserved."""
    g = global_branch(x, params[f"{prefix}.global.weight"], params[f"{prefix}.global.bias"])
    loc = local_branch(x, params[f"{prefix}.local.weight"], params[f"{prefix}.local.bias"], partitions)
    return g + loc


def glconv_b(x: Tensor, params: Mapping[str, Tensor], prefix: str, partitions: int) -> Tensor:
    """Height-wise concatenation: global rows on top, local rows below (height doubles)."""
    g = global_branch(x, params[f"{prefix}.global.weight"], params[f"{prefix}.global.bias"])
    loc = local_branch(x, params[f"{prefix}.local.weight"], params[f"{prefix}.local.bias"], partitions)
    return ops.concat([g, loc], axis=-2)


def spatial_gem(x: Tensor, p) -> Tensor:
    """GeM over the width axis: ``c x T x h x w -> c x T x h``."""
    return ops.gem(x, p, axis=-1)


def downsample_frames(frames: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool frames ``(..., H, W)`` by an integer factor (non-learned preprocessing)."""
    if factor == 1:
        return frames
    h, w = frames.shape[-2] // factor, frames.shape[-1] // factor
    crop = frames[..., : h * factor, : w * factor]
    return crop.reshape(crop.shape[:-2] + (h, factor, w, factor)).mean(axis=(-3, -1))


def backbone_forward(frames, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Silhouettes ``T x H x W`` (or ``N x T x H x W``) in [0, 1] -> ``T x D_GL`` features.

    stem conv -> (n-1) GLConvA -> GLConvB -> width GeM -> per-frame flatten of
    (channel, height). An activation follows the stem and every GLConv block.
    """
    b = cfg.backbone
    arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames, dtype=np.float64)
    batched = arr.ndim == 4
    if not batched:
        arr = arr[None]
    arr = downsample_frames(arr, b.input_pool)
    act = ops.ACTIVATIONS[b.activation]
    x = Tensor(arr[:, None])
    x = act(ops.conv3d(x, params["backbone.stem.weight"], params["backbone.stem.bias"],
                       pad=_same_pad(params["backbone.stem.weight"].shape)))
    if 0 in b.pool_stages:
        x = ops.max_pool2d(x, 2)
    for i in range(1, b.blocks + 1):
        prefix = f"backbone.block{i}"
        block = glconv_b if i == b.blocks else glconv_a
        x = act(block(x, params, prefix, b.partitions))
        if i in b.pool_stages and i < b.blocks:
            x = ops.max_pool2d(x, 2)
    p = params["backbone.spatial_p"] if b.learn_spatial_p else b.spatial_p
    x = spatial_gem(x, p)  # N, c, T, h
    n, c, t, h = x.shape
    x = ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (n, t, c * h))
    return x if batched else ops.reshape(x, (t, c * h))


def init_backbone(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    b = cfg.backbone
    out: dict[str, np.ndarray] = {}
    out["backbone.stem.weight"] = _he(rng, (b.stem_channels, 1) + tuple(b.stem_kernel))
    out["backbone.stem.bias"] = np.zeros(b.stem_channels)
    c_in = b.stem_channels
    for i, c_out in enumerate(b.block_channels, start=1):
        for branch in ("global", "local"):
            out[f"backbone.block{i}.{branch}.weight"] = _he(rng, (c_out, c_in) + tuple(b.glconv_kernel))
            out[f"backbone.block{i}.{branch}.bias"] = np.zeros(c_out)
        c_in = c_out
    if b.learn_spatial_p:
        out["backbone.spatial_p"] = np.array([b.spatial_p])
    return out


def _he(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) / np.sqrt(fan_in)
