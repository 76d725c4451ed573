"""Input validation helpers for the estimator API."""

from __future__ import annotations

from typing import Any, Optional, Sequence

import numpy as np

from .sequences import GaitSample, KeypointSequence, SilhouetteSequence


def as_sample(item: Any, index: int = 0) -> GaitSample:
    """Coerce one input to a :class:`GaitSample`.

    Accepted forms: a ``GaitSample``; a ``(silhouettes, keypoints)`` pair of
    arrays shaped ``T x H x W`` and ``T x 17 x 3`` (or ``T x 51``); a dict with
    ``silhouettes`` and ``keypoints`` entries (plus optional ``identity``,
    ``view``, ``condition``, ``seq_id``).
    """
    if isinstance(item, GaitSample):
        return item
    meta = {}
    if isinstance(item, dict):
        if "silhouettes" not in item or "keypoints" not in item:
            raise ValueError(f"sample {index}: dict input needs 'silhouettes' and 'keypoints'")
        sil, keys = item["silhouettes"], item["keypoints"]
        meta = item
    elif isinstance(item, (tuple, list)) and len(item) == 2:
        sil, keys = item
    else:
        raise TypeError(f"sample {index}: expected GaitSample, (silhouettes, keypoints) or dict, got {type(item).__name__}")
    sil = np.asarray(sil)
    if sil.dtype != np.uint8:
        sil = np.asarray(sil, dtype=np.float64)
        if not np.all(np.isfinite(sil)):
            raise ValueError(f"sample {index}: silhouettes contain non-finite values")
    keys = np.asarray(keys, dtype=np.float64)
    if not np.all(np.isfinite(keys)):
        raise ValueError(f"sample {index}: keypoints contain non-finite values")
    seq_id = str(meta.get("seq_id", f"sample-{index:05d}"))
    silhouettes = SilhouetteSequence(sil, str(meta.get("identity", "")), int(meta.get("view", 0)),
                                     str(meta.get("condition", "NM")), seq_id)
    return GaitSample(silhouettes, KeypointSequence(keys))


def check_samples(X: Any, min_frames: int = 1, frame_shape: Optional[tuple[int, int]] = None) -> list[GaitSample]:
    """Validate a non-empty collection of sequences sharing one frame size."""
    if isinstance(X, (GaitSample, dict)) or X is None:
        raise TypeError("X must be a sequence of samples, not a single sample")
    samples = [as_sample(x, i) for i, x in enumerate(X)]
    if not samples:
        raise ValueError("X contains no samples")
    shapes = {s.silhouettes.frames.shape[1:] for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"all frames must share one size, found {sorted(shapes)}")
    shape = shapes.pop()
    if frame_shape is not None and tuple(shape) != tuple(frame_shape):
        raise ValueError(f"frames are {shape[0]}x{shape[1]}, expected {frame_shape[0]}x{frame_shape[1]}")
    short = [s.seq_id for s in samples if len(s) < min_frames]
    if short:
        raise ValueError(f"{len(short)} sequences shorter than {min_frames} frames, e.g. {short[0]}")
    return samples


def check_identities(y: Optional[Sequence], samples: Sequence[GaitSample]) -> list[str]:
    """Identity labels as strings: ``y`` when given, else each sample's own identity."""
    if y is None:
        labels = [s.identity for s in samples]
        if any(lbl == "" for lbl in labels):
            raise ValueError("y is required when samples carry no identity")
        return labels
    labels = [str(v) for v in np.asarray(y).reshape(-1)]
    if len(labels) != len(samples):
        raise ValueError(f"y has {len(labels)} labels for {len(samples)} samples")
    return labels

