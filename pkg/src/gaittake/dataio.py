"""Synthetic articulated walkers and the on-disk dataset layout.

Layout::

    <root>/manifest.json
    <root>/<identity>/<condition>-<seq>/<view>/<frame>.pgm
    <root>/<identity>/<condition>-<seq>/<view>/keypoints.txt

Frames are 8-bit binary PGM (P5); ``keypoints.txt`` holds one line of 51
comma-separated numbers (x1,y1,c1,...,x17,y17,c17) per frame.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .config import CASIA_B_VIEWS, CONDITIONS
from .sequences import JOINT, N_JOINTS, GaitSample, KeypointSequence, SilhouetteSequence

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# documented parameter ranges (body units; one unit is roughly standing height)
RANGES = {
    "femur": (0.22, 0.30),
    "tibia": (0.20, 0.28),
    "humerus": (0.15, 0.21),
    "forearm": (0.13, 0.18),
    "torso": (0.28, 0.36),
    "body_width": (0.10, 0.16),
    "head_radius": (0.055, 0.075),
    "amplitude": (0.25, 0.55),
    "phase_offset": (0.0, 1.0),
}
PERIOD_RANGE = (16, 32)  # frames per gait cycle, inclusive
LIMBS = ("femur", "tibia", "humerus", "forearm", "torso")
MIN_LIMB_SEPARATION = 0.015
MIN_PERIOD_SEPARATION = 2

PIXELS_PER_UNIT = 50.0
GROUND_MARGIN = 2.0


class DatasetError(ValueError):
    """A malformed dataset entry; the message names the offending path."""


@dataclass(frozen=True)
class WalkerIdentity:
    femur: float
    tibia: float
    humerus: float
    forearm: float
    torso: float
    body_width: float
    head_radius: float
    frequency: float
    amplitude: float
    phase_offset: float

    @property
    def period(self) -> int:
        return int(round(1.0 / self.frequency))

    def distinct_from(self, other: "WalkerIdentity") -> bool:
        if abs(self.period - other.period) >= MIN_PERIOD_SEPARATION:
            return True
        return any(abs(getattr(self, k) - getattr(other, k)) >= MIN_LIMB_SEPARATION for k in LIMBS)


def gen_identity(rng: np.random.Generator) -> WalkerIdentity:
    """Draw one walker from the documented ranges."""
    vals = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in RANGES.items()}
    period = int(rng.integers(PERIOD_RANGE[0], PERIOD_RANGE[1] + 1))
    return WalkerIdentity(frequency=1.0 / period, **vals)


def gen_identities(n: int, rng: np.random.Generator, max_tries: int = 10000) -> list[WalkerIdentity]:
    """``n`` walkers, each distinguishable from all earlier ones (rejection sampling)."""
    out: list[WalkerIdentity] = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not draw {n} separable identities in {max_tries} tries")
        cand = gen_identity(rng)
        if all(cand.distinct_from(o) for o in out):
            out.append(cand)
    return out


# --------------------------------------------------------------------------
# skeleton and rasterization


def _view_basis(view: float) -> tuple[float, float]:
    rad = np.radians(view)
    # rounding makes 0/90/180/270 exact so mirrored views rasterize identically
    return float(np.round(np.sin(rad), 12)), float(np.round(np.cos(rad), 12))


def skeleton_3d(ident: WalkerIdentity, phase_index: int, amplitude_scale: float = 1.0) -> dict[str, np.ndarray]:
    """Joint positions (x forward, y up from the ground, z lateral) at one gait phase."""
    period = ident.period
    phi = 2.0 * np.pi * ((phase_index % period) / period + ident.phase_offset)
    amp = ident.amplitude * amplitude_scale
    hip_half = 0.35 * ident.body_width
    sh_half = 0.5 * ident.body_width
    joints: dict[str, np.ndarray] = {}

    legs = {}
    for side, psi, z in (("left", phi, hip_half), ("right", phi + np.pi, -hip_half)):
        thigh = amp * np.sin(psi)
        knee_flex = 1.3 * amp * max(0.0, np.sin(psi + 0.6 * np.pi))
        knee = np.array([np.sin(thigh), -np.cos(thigh)]) * ident.femur
        ankle = knee + np.array([np.sin(thigh - knee_flex), -np.cos(thigh - knee_flex)]) * ident.tibia
        legs[side] = (z, knee, ankle)
    drop = max(-leg[2][1] for leg in legs.values())
    hip_y = drop
    for side, (z, knee, ankle) in legs.items():
        joints[f"{side}_hip"] = np.array([0.0, hip_y, z])
        joints[f"{side}_knee"] = np.array([knee[0], hip_y + knee[1], z])
        joints[f"{side}_ankle"] = np.array([ankle[0], hip_y + ankle[1], z])

    sh_y = hip_y + ident.torso
    for side, psi, z in (("left", phi + np.pi, sh_half), ("right", phi, -sh_half)):
        swing = 0.8 * amp * np.sin(psi)
        flex = 0.35 + 0.25 * max(0.0, np.sin(psi))
        elbow = np.array([np.sin(swing), -np.cos(swing)]) * ident.humerus
        wrist = elbow + np.array([np.sin(swing + flex), -np.cos(swing + flex)]) * ident.forearm
        joints[f"{side}_shoulder"] = np.array([0.0, sh_y, z])
        joints[f"{side}_elbow"] = np.array([elbow[0], sh_y + elbow[1], z])
        joints[f"{side}_wrist"] = np.array([wrist[0], sh_y + wrist[1], z])

    r = ident.head_radius
    head = np.array([0.0, sh_y + 0.05 + r, 0.0])
    joints["head_center"] = head
    joints["nose"] = head + np.array([0.8 * r, -0.1 * r, 0.0])
    joints["left_eye"] = head + np.array([0.6 * r, 0.3 * r, 0.35 * r])
    joints["right_eye"] = head + np.array([0.6 * r, 0.3 * r, -0.35 * r])
    joints["left_ear"] = head + np.array([0.0, 0.2 * r, 0.9 * r])
    joints["right_ear"] = head + np.array([0.0, 0.2 * r, -0.9 * r])
    return joints


def _capsule(mask: np.ndarray, px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float) -> None:
    d = b - a
    denom = float(d @ d)
    if denom == 0.0:
        dist2 = (px - a[0]) ** 2 + (py - a[1]) ** 2
    else:
        s = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / denom, 0.0, 1.0)
        dist2 = (px - a[0] - s * d[0]) ** 2 + (py - a[1] - s * d[1]) ** 2
    mask |= dist2 <= radius * radius


def _ellipse(mask, px, py, center, ax, ay) -> None:
    mask |= ((px - center[0]) / ax) ** 2 + ((py - center[1]) / ay) ** 2 <= 1.0


def _quad(mask, px, py, corners: Sequence[np.ndarray], radius: float, steps: int = 8) -> None:
    """Filled quadrilateral (a0, a1 left edge; b0, b1 right edge) dilated by ``radius``."""
    a0, a1, b0, b1 = corners
    for s in np.linspace(0.0, 1.0, steps):
        _capsule(mask, px, py, a0 + s * (a1 - a0), b0 + s * (b1 - b0), radius)


def render_frame(
    ident: WalkerIdentity,
    view: float,
    condition: str,
    phase_index: int,
    height: int = 64,
    width: int = 44,
    amplitude_scale: float = 1.0,
    return_parts: bool = False,
):
    """Rasterize one frame; returns (mask bool h x w, keypoints 17 x 3[, parts])."""
    joints = skeleton_3d(ident, phase_index, amplitude_scale)
    sv, cv = _view_basis(view)
    scale = PIXELS_PER_UNIT * min(1.0, (height - 2 * GROUND_MARGIN) / (1.2 * PIXELS_PER_UNIT))
    ground = height / 2.0 - GROUND_MARGIN

    # centred pixel coordinates: x right, y down, origin at the image centre
    def proj(p):
        return np.array([(p[0] * sv + p[2] * cv) * scale, ground - p[1] * scale])

    P = {k: proj(v) for k, v in joints.items()}
    px = (np.arange(width) + 0.5 - width / 2.0)[None, :].repeat(height, axis=0)
    py = (np.arange(height) + 0.5 - height / 2.0)[:, None].repeat(width, axis=1)
    mask = np.zeros((height, width), dtype=bool)
    u = scale  # radius unit
    coat = condition == "CL"

    torso = np.zeros_like(mask)
    depth = (0.4 * ident.body_width + (0.03 if coat else 0.0)) * u
    _quad(torso, px, py, [P["left_hip"], P["left_shoulder"], P["right_hip"], P["right_shoulder"]], depth)
    mask |= torso
    for side in ("left", "right"):
        _capsule(mask, px, py, P[f"{side}_hip"], P[f"{side}_knee"], 0.045 * u)
        _capsule(mask, px, py, P[f"{side}_knee"], P[f"{side}_ankle"], 0.035 * u)
        _capsule(mask, px, py, P[f"{side}_shoulder"], P[f"{side}_elbow"], (0.045 if coat else 0.03) * u)
        _capsule(mask, px, py, P[f"{side}_elbow"], P[f"{side}_wrist"], (0.035 if coat else 0.025) * u)
    neck_base = 0.5 * (P["left_shoulder"] + P["right_shoulder"])
    _capsule(mask, px, py, neck_base, P["head_center"], 0.025 * u)
    _capsule(mask, px, py, P["head_center"], P["head_center"], ident.head_radius * u)
    if coat:
        # coat skirt hides the upper legs
        mid_l = 0.45 * P["left_hip"] + 0.55 * P["left_knee"]
        mid_r = 0.45 * P["right_hip"] + 0.55 * P["right_knee"]
        _quad(mask, px, py, [P["left_hip"], mid_l, P["right_hip"], mid_r], 0.085 * u)
        _quad(mask, px, py, [mid_l, mid_r, P["left_hip"], P["right_hip"]], 0.085 * u)
    if condition == "BG":
        bag = P["right_wrist"] + np.array([0.0, 0.06 * u])
        _ellipse(mask, px, py, bag, 0.075 * u, 0.095 * u)

    kp = np.empty((N_JOINTS, 3))
    for name, j in JOINT.items():
        kp[j, 0] = P[name][0] + width / 2.0
        kp[j, 1] = P[name][1] + height / 2.0
    kp[:, 2] = 1.0
    if return_parts:
        return mask, kp, {"torso": torso}
    return mask, kp


def render_sequence(
    ident: WalkerIdentity,
    view: float,
    condition: str,
    T: int,
    rng: np.random.Generator,
    identity_label: str = "000",
    seq_id: Optional[str] = None,
    height: int = 64,
    width: int = 44,
    jitter: float = 0.0,
    views: Iterable[float] = CASIA_B_VIEWS,
) -> GaitSample:
    """Animate ``T`` frames; per-sequence randomness is a start phase and a small stride-amplitude change."""
    if view not in tuple(views):
        raise ValueError(f"view {view} not in the configured view set {tuple(views)}")
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    start = int(rng.integers(0, ident.period))
    amp_scale = float(rng.uniform(0.95, 1.05))
    frames = np.empty((T, height, width), dtype=np.uint8)
    keys = np.empty((T, N_JOINTS, 3))
    for t in range(T):
        mask, kp = render_frame(ident, view, condition, start + t, height, width, amp_scale)
        frames[t] = np.where(mask, 255, 0).astype(np.uint8)
        keys[t] = kp
    if jitter > 0:
        keys[..., :2] += rng.normal(0.0, jitter, size=keys[..., :2].shape)
        keys[..., 0] = np.clip(keys[..., 0], 0.0, width - 1e-9)
        keys[..., 1] = np.clip(keys[..., 1], 0.0, height - 1e-9)
    sid = seq_id or f"{identity_label}/{condition.lower()}-00/{int(view):03d}"
    return GaitSample(
        SilhouetteSequence(frames, identity_label, int(view), condition, sid),
        KeypointSequence(keys),
    )


# --------------------------------------------------------------------------
# file formats


def write_pgm(path: PathLike, frame: np.ndarray) -> None:
    frame = np.asarray(frame, dtype=np.uint8)
    h, w = frame.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(frame.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    body = raw[pos + 1 :]
    if len(body) != w * h:
        raise DatasetError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_keypoints(path: PathLike, points: np.ndarray) -> None:
    rows = np.asarray(points, dtype=np.float64).reshape(len(points), 3 * N_JOINTS)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_keypoints(path: PathLike) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3 * N_JOINTS:
            raise DatasetError(f"{path}:{lineno}: expected {3 * N_JOINTS} values, found {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-numeric keypoint value") from None
    if not rows:
        raise DatasetError(f"{path}: no keypoint rows")
    return np.array(rows).reshape(-1, N_JOINTS, 3)


# --------------------------------------------------------------------------
# dataset layout


def seq_dir_name(condition: str, seq: int) -> str:
    return f"{condition.lower()}-{seq:02d}"


def make_seq_id(identity: str, condition: str, seq: int, view: int) -> str:
    return f"{identity}/{seq_dir_name(condition, seq)}/{int(view):03d}"


@dataclass
class DatasetIndex:
    """Loaded dataset keyed by (identity, condition, sequence number, view)."""

    root: Path
    samples: dict[tuple[str, str, int, int], GaitSample] = field(default_factory=dict)
    problems: list[str] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def identities(self) -> list[str]:
        return sorted({k[0] for k in self.samples})

    @property
    def views(self) -> list[int]:
        return sorted({k[3] for k in self.samples})

    def select(
        self,
        conditions: Optional[Iterable[str]] = None,
        seqs: Optional[Iterable[int]] = None,
        identities: Optional[Iterable[str]] = None,
        views: Optional[Iterable[int]] = None,
    ) -> list[GaitSample]:
        conds = set(conditions) if conditions is not None else None
        ss = set(seqs) if seqs is not None else None
        ids = set(identities) if identities is not None else None
        vs = set(views) if views is not None else None
        out = []
        for key in sorted(self.samples):
            ident, cond, seq, view = key
            if (conds is None or cond in conds) and (ss is None or seq in ss) and \
                    (ids is None or ident in ids) and (vs is None or view in vs):
                out.append(self.samples[key])
        return out


def write_dataset(
    root: PathLike,
    identities: Sequence[WalkerIdentity],
    views: Sequence[int],
    conditions: Sequence[str],
    seqs_per_cell: int,
    T: int,
    rng: np.random.Generator,
    height: int = 64,
    width: int = 44,
    jitter: float = 0.0,
    generation: Optional[dict] = None,
) -> DatasetIndex:
    """Render and write every (identity, condition, sequence, view) cell.

    Each cell draws from its own generator derived from one base seed taken
    from ``rng``, so any cell can be regenerated on its own.
    """
    for v in views:
        if not 0 <= v < 360:
            raise ValueError(f"invalid view {v}")
    for c in conditions:
        if c not in CONDITIONS:
            raise ValueError(f"unknown condition {c!r}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    base = int(rng.integers(0, 2**63 - 1))
    index = DatasetIndex(root)
    for i, ident in enumerate(identities):
        label = f"{i + 1:03d}"
        for ci, cond in enumerate(conditions):
            for seq in range(1, seqs_per_cell + 1):
                for view in views:
                    cell_rng = np.random.default_rng([base, i, CONDITIONS.index(cond), seq, int(view)])
                    sid = make_seq_id(label, cond, seq, view)
                    sample = render_sequence(ident, view, cond, T, cell_rng, label, sid, height, width, jitter, views)
                    _write_sequence(root / sid, sample)
                    index.samples[(label, cond, seq, int(view))] = sample
    manifest = {
        "format": "gaittake-synthetic-v1",
        "counts": {
            "identities": len(identities),
            "views": len(views),
            "conditions": len(conditions),
            "seqs_per_condition": seqs_per_cell,
            "sequences": len(index.samples),
            "frames_per_sequence": T,
        },
        "generation": dict(generation or {}),
        "views": [int(v) for v in views],
        "conditions": list(conditions),
        "frame_size": [height, width],
        "jitter": jitter,
        "identities": {f"{i + 1:03d}": asdict(ident) for i, ident in enumerate(identities)},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    index.manifest = manifest
    return index


def _write_sequence(target: Path, sample: GaitSample) -> None:
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        for t, frame in enumerate(sample.silhouettes.frames):
            write_pgm(tmp / f"{t:04d}.pgm", frame)
        write_keypoints(tmp / "keypoints.txt", sample.keypoints.points)
        if target.exists():
            shutil.rmtree(target)
        os.rename(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_dataset(root: PathLike, strict: bool = True) -> DatasetIndex:
    """Read a dataset tree. In strict mode the first problem raises :class:`DatasetError`."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: dataset root does not exist")
    index = DatasetIndex(root)
    mpath = root / "manifest.json"
    if mpath.exists():
        index.manifest = json.loads(mpath.read_text())

    def problem(msg: str) -> None:
        if strict:
            raise DatasetError(msg)
        logger.warning(msg)
        index.problems.append(msg)

    for id_dir in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        for seq_dir in sorted(p for p in id_dir.iterdir() if p.is_dir() and not p.name.startswith(".")):
            try:
                cond_name, seq_txt = seq_dir.name.split("-")
                cond, seq = cond_name.upper(), int(seq_txt)
            except ValueError:
                problem(f"{seq_dir}: directory name is not <condition>-<seq>")
                continue
            if cond not in CONDITIONS:
                problem(f"{seq_dir}: unknown condition {cond_name!r}")
                continue
            for view_dir in sorted(p for p in seq_dir.iterdir() if p.is_dir() and not p.name.startswith(".")):
                try:
                    view = int(view_dir.name)
                except ValueError:
                    problem(f"{view_dir}: view directory is not an integer")
                    continue
                sample = _load_sequence(view_dir, id_dir.name, cond, seq, view, problem)
                if sample is not None:
                    index.samples[(id_dir.name, cond, seq, view)] = sample
    return index


def _load_sequence(view_dir: Path, ident: str, cond: str, seq: int, view: int, problem) -> Optional[GaitSample]:
    sidecar = view_dir / "keypoints.txt"
    if not sidecar.exists():
        problem(f"{sidecar}: missing keypoint sidecar")
        return None
    frame_paths = sorted(view_dir.glob("*.pgm"))
    if not frame_paths:
        problem(f"{view_dir}: no frames")
        return None
    frames = []
    for fp in frame_paths:
        try:
            frames.append(read_pgm(fp))
        except (DatasetError, OSError) as exc:
            problem(f"{fp}: unreadable frame ({exc})")
            return None
    try:
        keys = read_keypoints(sidecar)
    except DatasetError as exc:
        problem(str(exc))
        return None
    if len(keys) != len(frames):
        problem(f"{sidecar}: {len(keys)} keypoint rows for {len(frames)} frames")
        return None
    if len({f.shape for f in frames}) != 1:
        problem(f"{view_dir}: frames have differing sizes")
        return None
    sid = make_seq_id(ident, cond, seq, view)
    return GaitSample(
        SilhouetteSequence(np.stack(frames), ident, view, cond, sid),
        KeypointSequence(keys),
    )
