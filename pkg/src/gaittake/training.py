"""P x K batch sampling, the weighted triplet loss, Adam updates and checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from . import ops
from .config import BatchSpec, RunConfig, TripletConfig, rng_stream
from .model import ModelParams, check_shapes, expected_shapes, model_forward
from .pose import normalize_keypoints
from .sequences import GaitSample, KeypointSequence, SilhouetteSequence
from .tensor import Tensor, backward, read_tensor, write_tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
METRICS_HEADER = "step,loss,active_fraction,grad_norm,wall_time"


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; the message names the step and parameter block."""


class CheckpointError(ValueError):
    """Malformed, truncated or mismatched checkpoint."""


# --------------------------------------------------------------------------
# batch sampling

BatchItem = tuple[SilhouetteSequence, KeypointSequence, str]


def crop_indices(length: int, crop: int, rng: np.random.Generator) -> np.ndarray:
    """Contiguous window of ``crop`` frames at a uniform random start; short sequences loop."""
    if length >= crop:
        start = int(rng.integers(0, length - crop + 1))
        return np.arange(start, start + crop)
    start = int(rng.integers(0, length))
    return (start + np.arange(crop)) % length


def sample_batch(dataset: Iterable[GaitSample], spec: BatchSpec, rng: np.random.Generator) -> list[BatchItem]:
    """P identities, K sequences each, every sequence cropped to ``spec.crop`` frames.

    Identities and sequences are drawn without replacement; items are ordered
    identity by identity.
    """
    groups: dict[str, list[GaitSample]] = {}
    for s in dataset:
        groups.setdefault(s.identity, []).append(s)
    P, K = spec.identities, spec.per_identity
    eligible = sorted(k for k, v in groups.items() if len(v) >= K)
    if len(eligible) < P:
        raise ValueError(
            f"batch needs {P} identities with >= {K} sequences each; "
            f"dataset has {len(groups)} identities, {len(eligible)} with enough sequences"
        )
    chosen = rng.choice(len(eligible), size=P, replace=False)
    batch = []
    for gi in chosen:
        ident = eligible[int(gi)]
        pool = sorted(groups[ident], key=lambda s: s.seq_id)
        for si in rng.choice(len(pool), size=K, replace=False):
            sample = pool[int(si)]
            win = sample.window(crop_indices(len(sample), spec.crop, rng))
            batch.append((win.silhouettes, win.keypoints, ident))
    return batch


def batch_arrays(batch: Sequence[BatchItem]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    sil = np.stack([b[0].as_float() for b in batch])
    keys = np.stack([normalize_keypoints(b[1]).data for b in batch])
    return sil, keys, [b[2] for b in batch]


# --------------------------------------------------------------------------
# triplet loss


@dataclass
class TripletStats:
    active_fraction: float
    empty_positive: int
    anchors: int


def _pair_masks(identities: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids = np.asarray([str(i) for i in identities])
    same = ids[:, None] == ids[None, :]
    pos = same & ~np.eye(len(ids), dtype=bool)
    neg = ~same
    n_pos, n_neg = pos.sum(1), neg.sum(1)
    valid = (n_pos > 0) & (n_neg > 0)
    wp = np.where(pos, 1.0 / np.maximum(n_pos, 1)[:, None], 0.0)
    wn = np.where(neg, 1.0 / np.maximum(n_neg, 1)[:, None], 0.0)
    return wp, wn, valid


def _soft_weighted(dist: Tensor, mask: np.ndarray, sign: float) -> Tensor:
    """``sum_j w_j D_j`` with ``w`` a softmax of ``sign * D`` restricted to ``mask`` (rows of anchors)."""
    logits = dist * sign
    # a per-row constant shift leaves the softmax and its gradient unchanged
    shift = np.max(np.where(mask[:, :, None], logits.data, -np.inf), axis=1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = ops.exp(logits - Tensor(shift)) * Tensor(mask[:, :, None].astype(np.float64))
    z = ops.reduce(e, axis=1, keepdims=True)
    z_safe = z + Tensor((z.data == 0).astype(np.float64))
    return ops.reduce(e * dist / z_safe, axis=1)


def _hardest(dist: Tensor, mask: np.ndarray, sign: float) -> Tensor:
    """One-hot weights on the farthest (sign=1) or nearest (sign=-1) masked entry of each row."""
    key = np.where(mask[:, :, None], sign * dist.data, -np.inf)
    pick = np.zeros(dist.shape)
    idx = np.argmax(key, axis=1)  # first index wins ties
    n, _, heads = dist.shape
    rows = np.arange(n)[:, None]
    pick[rows, idx, np.arange(heads)[None, :]] = 1.0
    pick *= mask.any(axis=1)[:, None, None]
    return ops.reduce(dist * Tensor(pick), axis=1)


def triplet_loss(
    embeddings: Tensor,
    identities: Sequence,
    cfg: Union[TripletConfig, float] = TripletConfig(),
    return_stats: bool = False,
):
    """Weighted batch-all triplet loss, averaged over anchors and heads.

    ``embeddings`` is ``N x C x d_e``. For anchor a and head c the hinge is
    ``margin + sum_p w_p D_ap - sum_n w_n D_an`` with Euclidean D. With
    ``weighting="uniform"`` the weights are 1/|P(a)| and 1/|N(a)|; with
    ``"softmax"`` they are softmax(D_ap) over positives and softmax(-D_an)
    over negatives, which leans on the hardest pairs; ``"hard"`` puts all
    weight on the farthest positive and nearest negative. Anchors with no
    positive (or no negative) contribute zero but still count in the mean.
    """
    if isinstance(cfg, TripletConfig):
        margin, weighting = cfg.margin, cfg.weighting
    else:
        margin, weighting = float(cfg), "uniform"
    emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    n, heads = emb.shape[0], emb.shape[1]
    if len(identities) != n:
        raise ValueError(f"{len(identities)} identities for {n} embeddings")
    if len({str(i) for i in identities}) < 2:
        raise ValueError("triplet loss needs at least 2 identities in the batch")
    wp, wn, valid = _pair_masks(identities)

    a = ops.reshape(emb, (n, 1) + emb.shape[1:])
    b = ops.reshape(emb, (1, n) + emb.shape[1:])
    diff = a - b
    dist = ops.sqrt(ops.reduce(diff * diff, axis=-1))  # n x n x C
    if weighting == "uniform":
        pos = ops.reduce(dist * Tensor(wp[:, :, None]), axis=1)  # n x C
        neg = ops.reduce(dist * Tensor(wn[:, :, None]), axis=1)
    elif weighting == "softmax":
        pos = _soft_weighted(dist, wp > 0, 1.0)
        neg = _soft_weighted(dist, wn > 0, -1.0)
    elif weighting == "hard":
        pos = _hardest(dist, wp > 0, 1.0)
        neg = _hardest(dist, wn > 0, -1.0)
    else:
        raise ValueError(f"unknown triplet weighting {weighting!r}")
    hinge = ops.relu((pos - neg + margin) * Tensor(valid[:, None].astype(np.float64)))
    loss = ops.reduce(hinge, kind="mean")
    if not return_stats:
        return loss
    arg = pos.data - neg.data + margin
    n_valid = int(valid.sum())
    active = float((arg[valid] > 0).sum()) / max(n_valid * heads, 1)
    return loss, TripletStats(active, int(n - n_valid), n)


# --------------------------------------------------------------------------
# optimizer state


@dataclass
class TrainState:
    """Parameters, Adam moments, the step counter and the sampling generator."""

    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator

    @classmethod
    def init(cls, cfg: RunConfig) -> "TrainState":
        params = ModelParams.init(cfg.model, rng_stream(cfg.run.seed, "init"))
        zeros = {k: np.zeros_like(t.data) for k, t in params.items()}
        return cls(params, zeros, {k: z.copy() for k, z in zeros.items()}, 0, rng_stream(cfg.run.seed, "sampling"))


@dataclass
class StepMetrics:
    step: int
    loss: float
    active_fraction: float
    grad_norm: float
    wall_time: float
    empty_positive: int = 0

    def csv(self) -> str:
        return f"{self.step},{self.loss!r},{self.active_fraction!r},{self.grad_norm!r},{self.wall_time:.6f}"


def _first_nonfinite(params: ModelParams) -> Optional[str]:
    # a bad value poisons every gradient upstream of it, so values are checked first
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)):
            return name
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            return name
    return None


def train_step(state: TrainState, batch: Sequence[BatchItem], cfg: RunConfig) -> tuple[TrainState, StepMetrics]:
    """One Adam update on the triplet loss of ``batch``; ``state`` is updated in place."""
    start = time.perf_counter()
    step = state.step + 1
    sil, keys, ids = batch_arrays(batch)
    emb = model_forward(sil, keys, state.params, cfg.model)
    loss, stats = triplet_loss(emb, ids, cfg.triplet, return_stats=True)
    leaves = list(state.params.values())
    backward(loss, leaves)
    bad = _first_nonfinite(state.params)
    if not np.isfinite(loss.item()) or bad is not None:
        raise TrainingError(f"step {step}: non-finite loss/gradient (loss={loss.item()}) in parameter block {bad or '<none>'}")

    tc = cfg.training
    sq = 0.0
    for t in leaves:
        sq += float(np.sum(t.grad * t.grad))
    b1, b2 = tc.beta1, tc.beta2
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    for name, t in state.params.items():
        g = t.grad
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        if tc.learning_rate != 0.0:
            t.data = t.data - tc.learning_rate * (m / c1) / (np.sqrt(v / c2) + tc.adam_eps)
    state.step = step
    metrics = StepMetrics(step, loss.item(), stats.active_fraction, float(np.sqrt(sq)),
                          time.perf_counter() - start, stats.empty_positive)
    return state, metrics


# --------------------------------------------------------------------------
# checkpoints

PARAMS_FILE = "tensors.bin"
MANIFEST_FILE = "manifest.json"


def _rng_state_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": {k: str(v) for k, v in st["state"].items()},
        "has_uint32": st["has_uint32"],
        "uinteger": str(st["uinteger"]),
    }


def _rng_from_json(d: dict) -> np.random.Generator:
    if d.get("bit_generator") != "PCG64":
        raise CheckpointError(f"unsupported generator {d.get('bit_generator')!r}")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {k: int(v) for k, v in d["state"].items()},
        "has_uint32": int(d["has_uint32"]),
        "uinteger": int(d["uinteger"]),
    }
    return np.random.Generator(bg)


def checkpoint_save(state: TrainState, directory: PathLike, config_text: str = "") -> Path:
    """Write ``tensors.bin`` (params, then first and second moments) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    tmp = directory / (PARAMS_FILE + ".tmp")
    with open(tmp, "wb") as fh:
        for group, source in (("param", state.params.arrays()), ("adam_m", state.m), ("adam_v", state.v)):
            for name, arr in source.items():
                n = write_tensor(fh, arr)
                entries.append({"group": group, "name": name, "shape": list(np.shape(arr)), "offset": offset, "bytes": n})
                offset += n
    tmp.replace(directory / PARAMS_FILE)
    manifest = {
        "format": "gaittake-checkpoint-v1",
        "step": state.step,
        "rng": _rng_state_json(state.rng),
        "total_bytes": offset,
        "tensors": entries,
        "config": config_text,
    }
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def checkpoint_load(directory: PathLike, cfg: Optional[RunConfig] = None) -> TrainState:
    """Read a checkpoint; with ``cfg`` the parameter names and shapes must match it exactly."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_FILE).read_text())
        raw_path = directory / PARAMS_FILE
        size = raw_path.stat().st_size
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{directory}: unreadable checkpoint ({exc})") from None
    if size != manifest.get("total_bytes"):
        raise CheckpointError(f"{raw_path}: {size} bytes on disk, manifest expects {manifest.get('total_bytes')} (truncated?)")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    with open(raw_path, "rb") as fh:
        for e in manifest["tensors"]:
            if fh.tell() != e["offset"]:
                raise CheckpointError(f"{raw_path}: entry {e['name']} expected at offset {e['offset']}, stream at {fh.tell()}")
            try:
                arr = read_tensor(fh)
            except ValueError as exc:
                raise CheckpointError(f"{raw_path}: entry {e['group']}:{e['name']}: {exc}") from None
            if list(arr.shape) != e["shape"]:
                raise CheckpointError(f"{raw_path}: entry {e['name']} has shape {arr.shape}, manifest says {e['shape']}")
            groups[e["group"]][e["name"]] = arr
    p = groups["param"]
    if cfg is not None:
        check_shapes(expected_shapes(cfg.model), {k: v.shape for k, v in p.items()})
    params = ModelParams({k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in p.items()})
    for g in ("adam_m", "adam_v"):
        if list(groups[g]) != list(p):
            raise CheckpointError(f"{directory}: {g} entries do not match the parameter list")
    return TrainState(params, groups["adam_m"], groups["adam_v"], int(manifest["step"]), _rng_from_json(manifest["rng"]))


def checkpoint_config_text(directory: PathLike) -> str:
    return json.loads((Path(directory) / MANIFEST_FILE).read_text()).get("config", "")


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[StepMetrics] = field(default_factory=list)


def train(
    cfg: RunConfig,
    dataset: Sequence[GaitSample],
    state: Optional[TrainState] = None,
    steps: Optional[int] = None,
    out_dir: Optional[PathLike] = None,
    on_step: Optional[Callable[[StepMetrics], None]] = None,
) -> TrainResult:
    """Run ``steps`` (default: up to ``cfg.training.steps`` total) training steps.

    With ``out_dir`` the metrics stream is appended to ``metrics.csv`` and a
    checkpoint is written every ``checkpoint_every`` steps and at the end
    (``checkpoints/step-XXXXXX`` plus ``checkpoints/latest``).
    """
    cfg.validate()
    state = state or TrainState.init(cfg)
    target = state.step + steps if steps is not None else cfg.training.steps
    result = TrainResult(state)
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        mpath = out_dir / "metrics.csv"
        _truncate_metrics(mpath, state.step)
        metrics_fh = open(mpath, "a")
    # the output location is not part of the run, so same-seed runs in different directories match
    config_text = "\n".join(ln for ln in cfg.to_ini().splitlines() if not ln.startswith("out = ")) + "\n"
    try:
        while state.step < target:
            batch = sample_batch(dataset, cfg.batch, state.rng)
            state, met = train_step(state, batch, cfg)
            result.metrics.append(met)
            if metrics_fh is not None:
                metrics_fh.write(met.csv() + "\n")
                metrics_fh.flush()
            if on_step is not None:
                on_step(met)
            if out_dir is not None and (state.step % cfg.training.checkpoint_every == 0 or state.step == target):
                ckdir = out_dir / "checkpoints"
                checkpoint_save(state, ckdir / f"step-{state.step:06d}", config_text)
                checkpoint_save(state, ckdir / "latest", config_text)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return result


def _truncate_metrics(path: Path, step: int) -> None:
    """Keep the header and the rows up to ``step`` so a resumed run continues the stream."""
    if step == 0 or not path.exists():
        path.write_text(METRICS_HEADER + "\n")
        return
    lines = path.read_text().splitlines()
    keep = [METRICS_HEADER] + [ln for ln in lines[1:] if ln and int(ln.split(",")[0]) <= step]
    path.write_text("\n".join(keep) + "\n")


def read_metrics(path: PathLike) -> list[dict[str, float]]:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split(",")
    return [dict(zip(cols, (float(v) for v in ln.split(",")))) for ln in lines[1:] if ln]
