"""scikit-learn style wrapper: ``fit`` trains, ``transform`` embeds, ``predict`` identifies."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .evaluation import distance_matrix
from .model import embed_samples
from .sequences import GaitSample, SilhouetteSequence
from .training import train
from .validation import check_identities, check_samples


class GaitTAKE(TransformerMixin, BaseEstimator):
    """Gait embedding model trained with a triplet loss.

    Inputs ``X`` are sequences: :class:`~gaittake.sequences.GaitSample`
    objects, ``(silhouettes, keypoints)`` array pairs or dicts (see
    :func:`~gaittake.validation.as_sample`). All sequences in one call must
    share a frame size.

    Parameters
    ----------
    partitions : int, default=4
        Horizontal strips of the local convolution branch.
    blocks : int, default=3
        Number of GLConv blocks (the last one concatenates its branches).
    stem_channels : int, default=32
    block_channels : tuple of int, default=(64, 128, 128)
    input_pool : int, default=1
        Average-pool factor applied to frames before the stem.
    pool_stages : tuple of int, default=(0, 1)
        Stages followed by 2x2 max pooling (0 is the stem).
    clip_length : int, default=10
        Frames per attention clip.
    attention_hidden : int, default=0
        Hidden width of the attention scoring layers; 0 picks max(8, D // 16).
    use_pose : bool, default=True
        When False the pose features are zeros (appearance only).
    pose_dim : int, default=64
    heads : int, default=8
        Number of independent embedding heads.
    embed_dim : int, default=64
    spatial_p, clip_p : float, default=3.0, 1.0
        GeM exponents over width and over clips.
    margin : float, default=0.2
    weighting : {"uniform", "softmax", "hard"}, default="uniform"
        Triplet weights inside the positive and negative sets.
    batch_identities, batch_per_identity : int, default=8, 8
        P and K of the P x K batches.
    crop : int, default=30
        Training crop length in frames.
    learning_rate : float, default=1e-4
    max_steps : int, default=2000
    random_state : int, default=0

    Attributes
    ----------
    config_ : RunConfig
        The full configuration used for training.
    params_ : ModelParams
        Trained parameters.
    train_metrics_ : list of StepMetrics
    gallery_embeddings_ : ndarray of shape (n_samples, heads, embed_dim)
        Embeddings of the training sequences, used by :meth:`predict`.
    gallery_labels_ : ndarray of shape (n_samples,)
    classes_ : ndarray
        Sorted identity labels seen during ``fit``.
    """

    def __init__(
        self,
        partitions: int = 4,
        blocks: int = 3,
        stem_channels: int = 32,
        block_channels: tuple = (64, 128, 128),
        input_pool: int = 1,
        pool_stages: tuple = (0, 1),
        clip_length: int = 10,
        attention_hidden: int = 0,
        use_pose: bool = True,
        pose_dim: int = 64,
        heads: int = 8,
        embed_dim: int = 64,
        spatial_p: float = 3.0,
        clip_p: float = 1.0,
        margin: float = 0.2,
        weighting: str = "uniform",
        batch_identities: int = 8,
        batch_per_identity: int = 8,
        crop: int = 30,
        learning_rate: float = 1e-4,
        max_steps: int = 2000,
        random_state: int = 0,
    ):
        self.partitions = partitions
        self.blocks = blocks
        self.stem_channels = stem_channels
        self.block_channels = block_channels
        self.input_pool = input_pool
        self.pool_stages = pool_stages
        self.clip_length = clip_length
        self.attention_hidden = attention_hidden
        self.use_pose = use_pose
        self.pose_dim = pose_dim
        self.heads = heads
        self.embed_dim = embed_dim
        self.spatial_p = spatial_p
        self.clip_p = clip_p
        self.margin = margin
        self.weighting = weighting
        self.batch_identities = batch_identities
        self.batch_per_identity = batch_per_identity
        self.crop = crop
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.random_state = random_state

    def _build_config(self, frame_shape: tuple[int, int]) -> RunConfig:
        return RunConfig.from_dict({
            "backbone": {"partitions": self.partitions, "blocks": self.blocks, "stem_channels": self.stem_channels,
                         "block_channels": tuple(self.block_channels), "input_pool": self.input_pool,
                         "pool_stages": tuple(self.pool_stages), "spatial_p": self.spatial_p},
            "attention": {"clip_length": self.clip_length, "hidden": self.attention_hidden},
            "pose": {"enabled": self.use_pose, "dim": self.pose_dim},
            "head": {"heads": self.heads, "dim": self.embed_dim, "clip_p": self.clip_p},
            "triplet": {"margin": self.margin, "weighting": self.weighting},
            "batch": {"identities": self.batch_identities, "per_identity": self.batch_per_identity, "crop": self.crop},
            "training": {"learning_rate": self.learning_rate, "steps": self.max_steps},
            "data": {"height": frame_shape[0], "width": frame_shape[1]},
            "run": {"seed": self.random_state},
        })

    def fit(self, X, y=None):
        """Train on labelled sequences.

        Parameters
        ----------
        X : sequence of samples
        y : array-like of shape (n_samples,), default=None
            Identity labels; taken from the samples when omitted.

        Returns
        -------
        self : GaitTAKE
        """
        samples = check_samples(X)
        labels = check_identities(y, samples)
        frame_shape = samples[0].silhouettes.frames.shape[1:]
        cfg = self._build_config(frame_shape)
        relabelled = [_relabel(s, lbl) for s, lbl in zip(samples, labels)]
        result = train(cfg, relabelled)
        self.config_ = cfg
        self.params_ = result.state.params
        self.train_metrics_ = result.metrics
        self.frame_shape_ = tuple(frame_shape)
        self.gallery_embeddings_ = embed_samples(samples, self.params_, cfg.model)
        self.gallery_labels_ = np.asarray(labels)
        self.classes_ = np.unique(self.gallery_labels_)
        return self

    def _embed(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        samples = check_samples(X, min_frames=self.config_.attention.clip_length, frame_shape=self.frame_shape_)
        return embed_samples(samples, self.params_, self.config_.model)

    def transform(self, X) -> np.ndarray:
        """Embeddings flattened to ``n_samples x (heads * embed_dim)``."""
        emb = self._embed(X)
        return emb.reshape(len(emb), -1)

    def predict(self, X) -> np.ndarray:
        """Identity of the nearest training sequence (sum of per-head Euclidean distances)."""
        emb = self._embed(X)
        dist = distance_matrix(emb, self.gallery_embeddings_)
        return self.gallery_labels_[np.argmin(dist, axis=1)]

    def score(self, X, y) -> float:
        """Rank-1 identification accuracy against the training sequences."""
        pred = self.predict(X)
        return float(np.mean(pred == np.asarray([str(v) for v in np.asarray(y).reshape(-1)])))


def _relabel(sample: GaitSample, identity: str) -> GaitSample:
    if sample.identity == identity:
        return sample
    sil = sample.silhouettes
    return GaitSample(SilhouetteSequence(sil.frames, identity, sil.view, sil.condition, sil.seq_id), sample.keypoints)


def make_estimator(config: Optional[RunConfig] = None, **overrides) -> GaitTAKE:
    """An estimator whose hyper-parameters mirror ``config`` (defaults when omitted)."""
    cfg = config or RunConfig()
    b = cfg.backbone
    params = dict(
        partitions=b.partitions, blocks=b.blocks, stem_channels=b.stem_channels,
        block_channels=tuple(b.block_channels), input_pool=b.input_pool, pool_stages=tuple(b.pool_stages),
        clip_length=cfg.attention.clip_length, attention_hidden=cfg.attention.hidden, use_pose=cfg.pose.enabled, pose_dim=cfg.pose.dim,
        heads=cfg.head.heads, embed_dim=cfg.head.dim, spatial_p=b.spatial_p, clip_p=cfg.head.clip_p,
        margin=cfg.triplet.margin, weighting=cfg.triplet.weighting, batch_identities=cfg.batch.identities,
        batch_per_identity=cfg.batch.per_identity, crop=cfg.batch.crop, learning_rate=cfg.training.learning_rate,
        max_steps=cfg.training.steps, random_state=cfg.run.seed,
    )
    params.update(overrides)
    return GaitTAKE(**params)
