"""Gait sequence containers shared by the data, model and evaluation code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_JOINTS = 17
COCO_JOINTS = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)
JOINT = {name: i for i, name in enumerate(COCO_JOINTS)}


@dataclass(eq=False)
class SilhouetteSequence:
    """T binary-ish grayscale frames stored as 8-bit levels (0..255).

    ``frames`` holds uint8 levels so that on-disk round trips are exact;
    :meth:`as_float` gives the [0, 1] view the model consumes.
    """

    frames: np.ndarray
    identity: str
    view: int
    condition: str
    seq_id: str

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3 or frames.shape[0] < 1:
            raise ValueError(f"{self.seq_id}: frames must be T x h x w with T >= 1, got {frames.shape}")
        if frames.dtype != np.uint8:
            if frames.size and (frames.min() < 0 or frames.max() > 1):
                raise ValueError(f"{self.seq_id}: float frames must lie in [0, 1]")
            frames = np.rint(frames * 255.0).astype(np.uint8)
        self.frames = frames

    def __len__(self) -> int:
        return self.frames.shape[0]

    def as_float(self) -> np.ndarray:
        return self.frames.astype(np.float64) / 255.0


@dataclass(eq=False)
class KeypointSequence:
    """Per-frame COCO keypoints, ``points[t, j] = (x, y, confidence)``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 2 and pts.shape[1] == 3 * N_JOINTS:
            pts = pts.reshape(-1, N_JOINTS, 3)
        if pts.ndim != 3 or pts.shape[1:] != (N_JOINTS, 3):
            raise ValueError(f"keypoints must be T x 17 x 3, got {np.shape(self.points)}")
        conf = pts[..., 2]
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("keypoint confidences must lie in [0, 1]")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(eq=False)
class GaitSample:
    """A silhouette sequence paired with its keypoint sidecar."""

    silhouettes: SilhouetteSequence
    keypoints: KeypointSequence

    def __post_init__(self):
        if len(self.silhouettes) != len(self.keypoints):
            raise ValueError(
                f"{self.seq_id}: {len(self.silhouettes)} frames but {len(self.keypoints)} keypoint rows"
            )

    @property
    def seq_id(self) -> str:
        return self.silhouettes.seq_id

    @property
    def identity(self) -> str:
        return self.silhouettes.identity

    @property
    def view(self) -> int:
        return self.silhouettes.view

    @property
    def condition(self) -> str:
        return self.silhouettes.condition

    def __len__(self) -> int:
        return len(self.silhouettes)

    def window(self, frame_index: np.ndarray) -> "GaitSample":
        idx = np.asarray(frame_index)
        sil = self.silhouettes
        return GaitSample(
            SilhouetteSequence(sil.frames[idx], sil.identity, sil.view, sil.condition, sil.seq_id),
            KeypointSequence(self.keypoints.points[idx]),
        )
