"""Keypoint branch: normalization, per-frame encoder and pose temporal attention."""

from __future__ import annotations

import logging
from typing import Mapping, Union

import numpy as np

from . import ops
from .attention import TAParams, clip_split, ta_aggregate
from .sequences import JOINT, N_JOINTS, KeypointSequence
from .tensor import Tensor

logger = logging.getLogger(__name__)

MIN_TORSO = 1e-6


def normalize_keypoints(keys: Union[KeypointSequence, np.ndarray]) -> Tensor:
    """Hip-centred, torso-length-scaled keypoints flattened to ``T x 51``.

    Frames whose torso (hip midpoint to shoulder midpoint) is shorter than
    1e-6 reuse the previous valid frame; leading degenerate frames take the
    first valid one. A sequence with no valid frame is rejected.
    """
    pts = keys.points if isinstance(keys, KeypointSequence) else np.asarray(keys, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[1:] != (N_JOINTS, 3):
        raise ValueError(f"keypoints must be T x 17 x 3, got {pts.shape}")
    xy = pts[..., :2]
    hip = 0.5 * (xy[:, JOINT["left_hip"]] + xy[:, JOINT["right_hip"]])
    shoulder = 0.5 * (xy[:, JOINT["left_shoulder"]] + xy[:, JOINT["right_shoulder"]])
    torso = np.linalg.norm(shoulder - hip, axis=-1)
    valid = torso >= MIN_TORSO
    if not valid.any():
        raise ValueError("every frame has a degenerate torso; cannot normalize keypoints")
    safe = np.where(valid, torso, 1.0)
    out = np.empty((pts.shape[0], N_JOINTS, 3))
    out[..., :2] = (xy - hip[:, None, :]) / safe[:, None, None]
    out[..., 2] = pts[..., 2]
    out = out.reshape(pts.shape[0], 3 * N_JOINTS)
    if not valid.all():
        logger.debug("replacing %d degenerate keypoint frames", int((~valid).sum()))
        last = int(np.argmax(valid))
        for t in range(pts.shape[0]):
            if valid[t]:
                last = t
            else:
                out[t] = out[last]
    return Tensor(out)


def pose_forward(keys, params: Mapping[str, Tensor], clip_length: int, activation: str = "softplus") -> Tensor:
    """Keypoints -> clip-level pose features ``S x d_p`` (batched: ``N x S x d_p``).

    ``keys`` is a :class:`KeypointSequence`, a ``T x 17 x 3`` array, an
    ``N x T x 17 x 3`` array, or already-normalized ``(N x) T x 51`` values.
    """
    if isinstance(keys, KeypointSequence):
        x = normalize_keypoints(keys)
    else:
        arr = keys.data if isinstance(keys, Tensor) else np.asarray(keys, dtype=np.float64)
        if arr.shape[-2:] == (N_JOINTS, 3):
            if arr.ndim == 4:
                arr = np.stack([normalize_keypoints(a).data for a in arr])
            else:
                arr = normalize_keypoints(arr).data
        x = Tensor(arr)
    act = ops.ACTIVATIONS[activation]
    h = act(ops.linear(x, params["pose.encoder1.weight"], params["pose.encoder1.bias"]))
    h = ops.linear(h, params["pose.encoder2.weight"], params["pose.encoder2.bias"])
    clips = clip_split(h, clip_length)
    return ta_aggregate(clips, TAParams.from_params(params, "ta.pose", activation))


def init_pose(dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d_in = 3 * N_JOINTS
    return {
        "pose.encoder1.weight": rng.standard_normal((d_in, dim)) / np.sqrt(d_in),
        "pose.encoder1.bias": np.zeros(dim),
        "pose.encoder2.weight": rng.standard_normal((dim, dim)) / np.sqrt(dim),
        "pose.encoder2.bias": np.zeros(dim),
    }
