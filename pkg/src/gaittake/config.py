"""Run configuration: typed sections, INI round-trip and whole-config validation."""

from __future__ import annotations

import configparser
import io
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

import numpy as np

CASIA_B_VIEWS = (0, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180)
OU_MVLP_VIEWS = (0, 15, 30, 45, 60, 75, 90, 180, 195, 210, 225, 240, 255, 270)
CONDITIONS = ("NM", "BG", "CL")


class ConfigError(ValueError):
    """Raised for any invalid or inconsistent configuration."""


@dataclass
class BackboneConfig:
    partitions: int = 4
    blocks: int = 3
    stem_channels: int = 32
    block_channels: tuple[int, ...] = (64, 128, 128)
    stem_kernel: tuple[int, ...] = (1, 3, 3)
    glconv_kernel: tuple[int, ...] = (3, 3, 3)
    # stage 0 is the stem, stage i the i-th GLConv block; a 2x2 max-pool follows each listed stage
    pool_stages: tuple[int, ...] = (0, 1)
    input_pool: int = 1
    spatial_p: float = 3.0
    learn_spatial_p: bool = False
    activation: str = "softplus"


@dataclass
class AttentionConfig:
    clip_length: int = 10
    # 0 selects max(8, D // 16) per branch
    hidden: int = 0


@dataclass
class PoseConfig:
    enabled: bool = True
    dim: int = 64


@dataclass
class HeadConfig:
    heads: int = 8
    dim: int = 64
    clip_p: float = 1.0
    learn_clip_p: bool = False


@dataclass
class TripletConfig:
    margin: float = 0.2
    # weight scheme inside P(a) and N(a): uniform, softmax (distance-weighted) or hard (one-hot)
    weighting: str = "uniform"


@dataclass
class BatchSpec:
    identities: int = 8
    per_identity: int = 8
    crop: int = 30


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    steps: int = 2000
    checkpoint_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # sequence numbers (per condition) used for training
    train_seqs: tuple[int, ...] = (1,)


@dataclass
class DataConfig:
    root: str = "data/synthetic"
    identities: int = 8
    views: tuple[int, ...] = CASIA_B_VIEWS
    conditions: tuple[str, ...] = CONDITIONS
    seqs_per_condition: int = 2
    frames: int = 40
    height: int = 64
    width: int = 44
    jitter: float = 0.0


@dataclass
class EvalConfig:
    gallery_condition: str = "NM"
    gallery_seqs: tuple[int, ...] = (1,)
    probe_conditions: tuple[str, ...] = CONDITIONS
    probe_seqs: tuple[int, ...] = (2,)


@dataclass
class RunSection:
    seed: int = 0
    workers: int = 1
    out: str = "runs/default"


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    pose: PoseConfig = field(default_factory=PoseConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    batch: BatchSpec = field(default_factory=BatchSpec)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def model(self) -> "ModelConfig":
        return ModelConfig(
            backbone=self.backbone,
            attention=self.attention,
            pose=self.pose,
            head=self.head,
            frame_height=self.data.height,
            frame_width=self.data.width,
        )

    # ---- serialization

    @classmethod
    def from_dict(cls, values: dict[str, dict[str, Any]]) -> "RunConfig":
        cfg = cls()
        for section, entries in values.items():
            sub = _section(cfg, section)
            for key, raw in entries.items():
                _assign(sub, section, key, raw)
        cfg.validate()
        return cfg

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparsable config: {exc}") from None
        if parser.defaults():
            raise ConfigError(f"keys outside any section: {sorted(parser.defaults())}")
        return cls.from_dict({s: dict(parser.items(s)) for s in parser.sections()})

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.from_ini(Path(path).read_text())

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for f in fields(self):
            sub = getattr(self, f.name)
            parser[f.name] = {g.name: _format(getattr(sub, g.name)) for g in fields(sub)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def override(self, section: str, key: str, value: Any) -> None:
        _assign(_section(self, section), section, key, value)

    def copy(self) -> "RunConfig":
        return RunConfig.from_ini(self.to_ini())

    # ---- validation

    def validate(self) -> None:
        b, d, a = self.backbone, self.data, self.attention
        if self.batch.identities < 2:
            raise ConfigError(f"batch.identities (P) must be >= 2, got {self.batch.identities}")
        if self.batch.per_identity < 2:
            raise ConfigError(f"batch.per_identity (K) must be >= 2, got {self.batch.per_identity}")
        if self.batch.crop < a.clip_length:
            raise ConfigError(f"batch.crop ({self.batch.crop}) must be >= attention.clip_length ({a.clip_length})")
        if self.triplet.weighting not in ("uniform", "softmax", "hard"):
            raise ConfigError(f"triplet.weighting must be uniform, softmax or hard, got {self.triplet.weighting}")
        if self.triplet.margin < 0:
            raise ConfigError(f"triplet.margin must be >= 0, got {self.triplet.margin}")
        for name in ("learning_rate", "beta1", "beta2", "adam_eps"):
            if getattr(self.training, name) < 0:
                raise ConfigError(f"training.{name} must be >= 0")
        if self.training.steps < 0 or self.training.checkpoint_every < 1:
            raise ConfigError("training.steps must be >= 0 and training.checkpoint_every >= 1")
        if not self.training.train_seqs:
            raise ConfigError("training.train_seqs must not be empty")
        if d.identities < 1 or d.seqs_per_condition < 1 or d.frames < 1:
            raise ConfigError("data.identities, data.seqs_per_condition and data.frames must be >= 1")
        if not d.views or len(set(d.views)) != len(d.views) or any(not 0 <= v < 360 for v in d.views):
            raise ConfigError(f"data.views must be distinct degrees in [0, 360), got {d.views}")
        bad = [c for c in d.conditions if c not in CONDITIONS]
        if bad or not d.conditions:
            raise ConfigError(f"data.conditions must be drawn from {CONDITIONS}, got {d.conditions}")
        if d.jitter < 0:
            raise ConfigError("data.jitter must be >= 0")
        if self.eval.gallery_condition not in d.conditions:
            raise ConfigError(f"eval.gallery_condition {self.eval.gallery_condition} not in data.conditions")
        for c in self.eval.probe_conditions:
            if c not in d.conditions:
                raise ConfigError(f"eval.probe_conditions entry {c} not in data.conditions")
        for name, seqs in (("eval.gallery_seqs", self.eval.gallery_seqs), ("eval.probe_seqs", self.eval.probe_seqs),
                           ("training.train_seqs", self.training.train_seqs)):
            if any(not 1 <= s <= d.seqs_per_condition for s in seqs):
                raise ConfigError(f"{name} entries must lie in 1..{d.seqs_per_condition}, got {seqs}")
        if self.run.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if b.activation not in ("softplus", "leaky_relu", "relu"):
            raise ConfigError(f"backbone.activation must be softplus, leaky_relu or relu, got {b.activation}")
        self.model.validate()


@dataclass
class ModelConfig:
    """The subset of knobs that determines parameter shapes and the forward pass."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    pose: PoseConfig = field(default_factory=PoseConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    frame_height: int = 64
    frame_width: int = 44

    def stage_shapes(self) -> list[tuple[int, int]]:
        """Feature-map (h, w) at the input of each GLConv block."""
        b = self.backbone
        h, w = self.frame_height // b.input_pool, self.frame_width // b.input_pool
        shapes = []
        if 0 in b.pool_stages:
            h, w = h // 2, w // 2
        for i in range(1, b.blocks + 1):
            shapes.append((h, w))
            if i in b.pool_stages and i < b.blocks:
                h, w = h // 2, w // 2
        return shapes

    @property
    def final_height(self) -> int:
        return self.stage_shapes()[-1][0]

    @property
    def appearance_dim(self) -> int:
        return self.backbone.block_channels[-1] * 2 * self.final_height

    def attention_hidden(self, dim: int) -> int:
        return self.attention.hidden if self.attention.hidden > 0 else max(8, dim // 16)

    @property
    def fused_dim(self) -> int:
        return self.appearance_dim + self.pose.dim

    def validate(self) -> None:
        b = self.backbone
        if b.blocks < 2:
            raise ConfigError(f"backbone.blocks (n) must be >= 2, got {b.blocks}")
        if len(b.block_channels) != b.blocks:
            raise ConfigError(f"backbone.block_channels needs {b.blocks} entries, got {b.block_channels}")
        if b.partitions < 1:
            raise ConfigError("backbone.partitions must be >= 1")
        if b.spatial_p < 1:
            raise ConfigError(f"backbone.spatial_p must be >= 1, got {b.spatial_p}")
        if self.head.clip_p < 1:
            raise ConfigError(f"head.clip_p must be >= 1, got {self.head.clip_p}")
        if len(b.stem_kernel) != 3 or len(b.glconv_kernel) != 3:
            raise ConfigError("kernels need three extents (t, h, w)")
        if any(k % 2 == 0 or k < 1 for k in tuple(b.stem_kernel) + tuple(b.glconv_kernel)):
            raise ConfigError("kernel extents must be odd so padding preserves extents")
        if b.input_pool < 1:
            raise ConfigError("backbone.input_pool must be >= 1")
        if any(s < 0 or s >= b.blocks for s in b.pool_stages):
            raise ConfigError(f"backbone.pool_stages entries must lie in 0..{b.blocks - 1}")
        if min(b.block_channels) < 1 or b.stem_channels < 1:
            raise ConfigError("channel counts must be positive")
        for i, (h, w) in enumerate(self.stage_shapes(), start=1):
            if h < 1 or w < 1:
                raise ConfigError(f"feature map vanishes before block {i}")
            if h % b.partitions:
                raise ConfigError(f"feature-map height {h} at block {i} is not divisible by partitions={b.partitions}")
        if self.attention.clip_length < 1:
            raise ConfigError("attention.clip_length must be >= 1")
        if self.pose.dim < 1 or self.head.heads < 1 or self.head.dim < 1:
            raise ConfigError("pose.dim, head.heads and head.dim must be >= 1")


def micro_config() -> RunConfig:
    """Tiny configuration used by the gradient battery (T=4, L=2, 8x6 frames, m=2, C=2)."""
    cfg = RunConfig()
    cfg.backbone = BackboneConfig(
        partitions=2, blocks=2, stem_channels=2, block_channels=(3, 3), pool_stages=(), spatial_p=3.0
    )
    cfg.attention = AttentionConfig(clip_length=2, hidden=3)
    cfg.pose = PoseConfig(enabled=True, dim=4)
    cfg.head = HeadConfig(heads=2, dim=3, clip_p=2.0)
    cfg.batch = BatchSpec(identities=2, per_identity=2, crop=4)
    cfg.data = DataConfig(height=8, width=6, frames=4)
    cfg.validate()
    return cfg


def desk_config() -> RunConfig:
    """Small-channel configuration for the single-CPU end-to-end experiment.

    Frames are average-pooled 4x (64x44 -> 16x11) before the stem, channels
    are narrow, and the triplet loss uses hardest-pair weights.
    """
    return RunConfig.from_dict({
        "backbone": {"input_pool": 4, "stem_channels": 4, "block_channels": (8, 8, 16)},
        "attention": {"clip_length": 10},
        "pose": {"dim": 16},
        "head": {"heads": 4, "dim": 32},
        "triplet": {"margin": 0.2, "weighting": "hard"},
        "batch": {"identities": 4, "per_identity": 4, "crop": 30},
        "training": {"learning_rate": 1e-3, "steps": 200, "checkpoint_every": 50},
        "run": {"out": "runs/desk"},
    })


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (``data``, ``init``, ``sampling``...)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])))


# ---- helpers


def _section(cfg: RunConfig, name: str):
    if name not in {f.name for f in fields(cfg)}:
        raise ConfigError(f"unknown config section [{name}]")
    return getattr(cfg, name)


def _assign(sub, section: str, key: str, raw: Any) -> None:
    hints = get_type_hints(type(sub))
    if key not in hints:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    try:
        value = _coerce(raw, hints[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} ({exc})") from None
    setattr(sub, key, value)


def _coerce(raw: Any, typ):
    origin = get_origin(typ)
    if origin is tuple:
        (inner, *_rest) = get_args(typ)
        if isinstance(raw, str):
            items = [s.strip() for s in raw.split(",") if s.strip()]
        else:
            items = list(raw)
        return tuple(_coerce(i, inner) for i in items)
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if typ is int:
        if isinstance(raw, float) and not raw.is_integer():
            raise ValueError("expected an integer")
        return int(str(raw).strip()) if isinstance(raw, str) else int(raw)
    if typ is float:
        return float(raw)
    return str(raw).strip()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
