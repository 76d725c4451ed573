"""Cross-view rank-1 evaluation with identical-view cells excluded."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .config import CONDITIONS, ModelConfig
from .model import embed_samples
from .sequences import GaitSample
from .tensor import Tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
MANIFEST_HEADER = "seq_id,identity,view,condition,heads,dim"


@dataclass
class EmbeddingStore:
    """Per-sequence ``C x d_e`` embeddings with their labels, in a fixed order."""

    seq_ids: list[str]
    identities: list[str]
    views: list[int]
    conditions: list[str]
    embeddings: np.ndarray  # N x C x d_e

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = len(self.seq_ids)
        if not (len(self.identities) == len(self.views) == len(self.conditions) == n):
            raise ValueError("label lists must all have one entry per sequence")
        if self.embeddings.ndim != 3 or self.embeddings.shape[0] != n:
            raise ValueError(f"embeddings must be {n} x C x d_e, got {self.embeddings.shape}")

    def __len__(self) -> int:
        return len(self.seq_ids)

    def subset(self, mask: np.ndarray) -> "EmbeddingStore":
        idx = np.flatnonzero(mask)
        return EmbeddingStore(
            [self.seq_ids[i] for i in idx],
            [self.identities[i] for i in idx],
            [self.views[i] for i in idx],
            [self.conditions[i] for i in idx],
            self.embeddings[idx],
        )

    def save(self, directory: PathLike) -> Path:
        """Write ``embeddings.bin`` and ``manifest.csv``.

        The binary file holds one record per (sequence, head): ``d_e``
        little-endian float64 values, sequences in store order and heads in
        index order. The manifest has one line per sequence:
        ``seq_id,identity,view,condition,heads,dim``.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "embeddings.bin").write_bytes(np.ascontiguousarray(self.embeddings, dtype="<f8").tobytes())
        _, heads, dim = self.embeddings.shape
        lines = [MANIFEST_HEADER]
        for i, sid in enumerate(self.seq_ids):
            for field_ in (sid, self.identities[i], self.conditions[i]):
                if "," in field_ or "\n" in field_:
                    raise ValueError(f"label {field_!r} cannot be written to the manifest")
            lines.append(f"{sid},{self.identities[i]},{int(self.views[i])},{self.conditions[i]},{heads},{dim}")
        (directory / "manifest.csv").write_text("\n".join(lines) + "\n")
        return directory

    @classmethod
    def load(cls, directory: PathLike) -> "EmbeddingStore":
        directory = Path(directory)
        lines = (directory / "manifest.csv").read_text().splitlines()
        if not lines or lines[0] != MANIFEST_HEADER:
            raise ValueError(f"{directory}/manifest.csv: missing header")
        rows = [ln.split(",") for ln in lines[1:] if ln]
        shapes = {(int(r[4]), int(r[5])) for r in rows}
        if len(shapes) > 1:
            raise ValueError(f"{directory}: mixed head counts or widths {sorted(shapes)}")
        heads, dim = shapes.pop() if shapes else (0, 0)
        raw = (directory / "embeddings.bin").read_bytes()
        if len(raw) != 8 * len(rows) * heads * dim:
            raise ValueError(f"{directory}/embeddings.bin: {len(raw)} bytes, expected {8 * len(rows) * heads * dim}")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(len(rows), heads, dim)
        return cls([r[0] for r in rows], [r[1] for r in rows], [int(r[2]) for r in rows], [r[3] for r in rows], arr)


def embed_set(
    samples: Sequence[GaitSample],
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    batch_size: int = 16,
) -> EmbeddingStore:
    """Full-length embeddings; sequences shorter than the clip length are skipped with a warning."""
    L = cfg.attention.clip_length
    keep = [s for s in samples if len(s) >= L]
    skipped = len(samples) - len(keep)
    if skipped:
        short = [s.seq_id for s in samples if len(s) < L]
        logger.warning("skipped %d sequences shorter than L=%d: %s", skipped, L, ", ".join(short))
    emb = embed_samples(keep, params, cfg, batch_size) if keep else np.zeros((0, cfg.head.heads, cfg.head.dim))
    return EmbeddingStore(
        [s.seq_id for s in keep],
        [s.identity for s in keep],
        [int(s.view) for s in keep],
        [s.condition for s in keep],
        emb,
    )


def pairwise_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Sum over heads of the per-head Euclidean distance between two ``C x d_e`` embeddings."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"head-count mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape != b.shape:
        raise ValueError(f"embedding shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum(-1)).sum(-1))


def distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """:func:`pairwise_distance` for every row pair of ``N x C x d_e`` and ``M x C x d_e``."""
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"embedding shape mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    return np.sqrt(((a[:, None] - b[None, :]) ** 2).sum(-1)).sum(-1)


@dataclass
class EvalReport:
    """``accuracy[condition][probe_view][gallery_view]``; ``None`` marks a masked cell."""

    views: list[int]
    accuracy: dict[str, dict[int, dict[int, Optional[float]]]] = field(default_factory=dict)
    empty_cells: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def conditions(self) -> list[str]:
        return list(self.accuracy)

    def cells(self):
        for cond, by_pv in self.accuracy.items():
            for pv, by_gv in by_pv.items():
                for gv, acc in by_gv.items():
                    yield cond, pv, gv, acc

    def probe_view_mean(self, condition: str, probe_view: int) -> Optional[float]:
        vals = [a for gv, a in self.accuracy[condition][probe_view].items() if a is not None and gv != probe_view]
        return float(np.mean(vals)) if vals else None

    def condition_mean(self, condition: str) -> Optional[float]:
        vals = [self.probe_view_mean(condition, pv) for pv in self.views]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None


def rank1_matrix(gallery: EmbeddingStore, probes: EmbeddingStore, views: Optional[Sequence[int]] = None) -> EvalReport:
    """Per (condition, probe view, gallery view != probe view) rank-1 accuracy.

    The nearest gallery sequence of the given view decides the prediction;
    equal distances go to the smallest sequence id. Cells without gallery
    sequences or without probes are masked (``None``) and listed in
    ``empty_cells``.
    """
    views = sorted(set(views) if views is not None else set(gallery.views) | set(probes.views))
    report = EvalReport(list(views))
    if len(gallery) and len(probes):
        dist = distance_matrix(probes.embeddings, gallery.embeddings)
    g_views = np.asarray(gallery.views)
    p_views = np.asarray(probes.views)
    p_conds = np.asarray(probes.conditions)
    conditions = sorted(set(probes.conditions), key=lambda c: (CONDITIONS.index(c) if c in CONDITIONS else len(CONDITIONS), c))
    for cond in conditions:
        report.accuracy[cond] = {}
        for pv in views:
            report.accuracy[cond][pv] = {}
            q_idx = np.flatnonzero((p_views == pv) & (p_conds == cond))
            for gv in views:
                if gv == pv:
                    report.accuracy[cond][pv][gv] = None
                    continue
                g_idx = np.flatnonzero(g_views == gv)
                if len(g_idx) == 0 or len(q_idx) == 0:
                    report.accuracy[cond][pv][gv] = None
                    report.empty_cells.append((cond, pv, gv))
                    continue
                # lexsort: last key is primary, so (distance, seq id)
                order_ids = np.array([gallery.seq_ids[i] for i in g_idx])
                hits = 0
                for qi in q_idx:
                    best = g_idx[np.lexsort((order_ids, dist[qi, g_idx]))[0]]
                    hits += gallery.identities[best] == probes.identities[qi]
                report.accuracy[cond][pv][gv] = hits / len(q_idx)
    if report.empty_cells:
        logger.warning("%d evaluation cells masked for lack of gallery or probe sequences", len(report.empty_cells))
    return report


def _fmt_pct(v: Optional[float]) -> str:
    return "-" if v is None else f"{100.0 * v:.1f}"


def render_report(report: EvalReport, method: str = "GaitTAKE") -> str:
    """Rank-1 table: one row per method-condition, one column per probe view, then Mean."""
    head = ["Probe view"] + [str(v) for v in report.views] + ["Mean"]
    rows = []
    for cond in report.conditions:
        vals = [_fmt_pct(report.probe_view_mean(cond, pv)) for pv in report.views]
        rows.append([f"{method}-{cond}"] + vals + [_fmt_pct(report.condition_mean(cond))])
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    lines = ["Rank-1 accuracy (%), identical-view cases excluded"]
    fmt = lambda r: "  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])])
    lines.append(fmt(head))
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines) + "\n"


def report_csv(report: EvalReport) -> str:
    """One ``condition,probe_view,gallery_view,accuracy`` line per cell; masked cells read ``NA``."""
    lines = ["condition,probe_view,gallery_view,accuracy"]
    for cond, pv, gv, acc in report.cells():
        lines.append(f"{cond},{pv},{gv},{'NA' if acc is None else repr(float(acc))}")
    return "\n".join(lines) + "\n"


def read_report_csv(text: str) -> EvalReport:
    lines = text.strip().splitlines()
    if lines[0] != "condition,probe_view,gallery_view,accuracy":
        raise ValueError("not a rank-1 report file")
    acc: dict = {}
    views: set[int] = set()
    for ln in lines[1:]:
        cond, pv, gv, a = ln.split(",")
        pv_i, gv_i = int(pv), int(gv)
        views.update((pv_i, gv_i))
        acc.setdefault(cond, {}).setdefault(pv_i, {})[gv_i] = None if a == "NA" else float(a)
    return EvalReport(sorted(views), acc)
