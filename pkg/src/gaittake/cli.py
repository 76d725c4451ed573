"""Command line: ``gaittake {gen-data,train,eval,gradcheck}``.

Exit status is 0 on success, 1 when a gradient check fails and 2 for
invalid configuration, data or checkpoints.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from .battery import run_battery
from .config import ConfigError, RunConfig, micro_config, rng_stream
from .dataio import DatasetError, gen_identities, load_dataset, write_dataset
from .evaluation import embed_set, rank1_matrix, render_report, report_csv
from .model import ModelParams
from .training import CheckpointError, TrainingError, TrainState, checkpoint_load, train

logger = logging.getLogger("gaittake")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2


class CommandError(RuntimeError):
    """A user-facing failure; the message is printed and the exit status is 2."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaittake", description="Gait recognition at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, force=True):
        p.add_argument("--config", type=Path, help="INI configuration file (defaults are used if omitted)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--workers", type=int, help="override [run] workers (1 = fully serial)")
        p.add_argument("--out", type=Path, help="output directory (dataset root for gen-data)")
        if force:
            p.add_argument("--force", action="store_true", help="overwrite existing output")

    common(sub.add_parser("gen-data", help="render the synthetic dataset"))
    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoints/latest")
    p = sub.add_parser("eval", help="cross-view rank-1 evaluation")
    common(p, force=False)
    p.add_argument("--checkpoint", type=Path, help="checkpoint directory (default <out>/checkpoints/latest)")
    p.add_argument("--method", default="GaitTAKE", help="row label in the report")
    common(sub.add_parser("gradcheck", help="run the gradient-check battery"), force=False)
    return parser


def load_config(args: argparse.Namespace, default: Optional[RunConfig] = None) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else (default or RunConfig())
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.workers is not None:
        cfg.run.workers = args.workers
    if args.out is not None:
        if args.command == "gen-data":
            cfg.data.root = str(args.out)
        else:
            cfg.run.out = str(args.out)
    cfg.validate()
    return cfg


def cmd_gen_data(cfg: RunConfig, force: bool = False) -> int:
    d = cfg.data
    root = Path(d.root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise CommandError(f"{root} exists and is not empty (use --force to overwrite)")
        if not (root / "manifest.json").exists():
            raise CommandError(f"{root} is not a generated dataset (no manifest.json); refusing to delete it")
        shutil.rmtree(root)
    identities = gen_identities(d.identities, rng_stream(cfg.run.seed, "identities"))
    generation = {"seed": cfg.run.seed, "identities": d.identities, "frames": d.frames,
                  "seqs_per_condition": d.seqs_per_condition, "jitter": d.jitter}
    index = write_dataset(root, identities, d.views, d.conditions, d.seqs_per_condition, d.frames,
                          rng_stream(cfg.run.seed, "data"), d.height, d.width, d.jitter, generation)
    c = index.manifest["counts"]
    print(f"wrote {c['sequences']} sequences to {root}: {c['identities']} identities x {c['views']} views x "
          f"{c['conditions']} conditions x {c['seqs_per_condition']} sequences, {c['frames_per_sequence']} frames each")
    return EXIT_OK


def _load_index(cfg: RunConfig):
    try:
        return load_dataset(cfg.data.root, strict=True)
    except DatasetError as exc:
        raise CommandError(f"dataset: {exc}") from None


def cmd_train(cfg: RunConfig, resume: bool = False, force: bool = False) -> int:
    out = Path(cfg.run.out)
    latest = out / "checkpoints" / "latest"
    if latest.exists() and not (resume or force):
        raise CommandError(f"{out} already holds a run (use --resume to continue or --force to restart)")
    index = _load_index(cfg)
    train_set = index.select(seqs=cfg.training.train_seqs)
    ids = {}
    for s in train_set:
        ids[s.identity] = ids.get(s.identity, 0) + 1
    P, K = cfg.batch.identities, cfg.batch.per_identity
    enough = sum(1 for n in ids.values() if n >= K)
    if enough < P:
        raise CommandError(f"dataset too small: batches need {P} identities with >= {K} training sequences, "
                           f"found {enough} (of {len(ids)} identities)")
    state = None
    if resume and latest.exists():
        try:
            state = checkpoint_load(latest, cfg)
        except (CheckpointError, ValueError) as exc:
            raise CommandError(f"cannot resume: {exc}") from None
        print(f"resuming from step {state.step}")
    elif force and out.exists():
        shutil.rmtree(out / "checkpoints", ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    start = time.perf_counter()

    def report(m):
        if m.step == 1 or m.step % 10 == 0 or m.step == cfg.training.steps:
            print(f"step {m.step:5d}  loss {m.loss:.4f}  active {m.active_fraction:.3f}  |g| {m.grad_norm:.3e}  "
                  f"{time.perf_counter() - start:.1f}s", flush=True)

    try:
        result = train(cfg, train_set, state=state, out_dir=out, on_step=report)
    except TrainingError as exc:
        raise CommandError(str(exc)) from None
    print(f"finished at step {result.state.step}; checkpoint {latest}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: Optional[Path] = None, method: str = "GaitTAKE") -> int:
    out = Path(cfg.run.out)
    ck = checkpoint or out / "checkpoints" / "latest"
    try:
        state: TrainState = checkpoint_load(ck, cfg)
    except (CheckpointError, ValueError, OSError) as exc:
        raise CommandError(f"checkpoint {ck}: {exc}") from None
    index = _load_index(cfg)
    e = cfg.eval
    gallery = index.select(conditions=[e.gallery_condition], seqs=e.gallery_seqs)
    probes = index.select(conditions=e.probe_conditions, seqs=e.probe_seqs)
    overlap = {s.seq_id for s in gallery} & {s.seq_id for s in probes}
    if overlap:
        raise CommandError(f"gallery and probe sets share {len(overlap)} sequences, e.g. {sorted(overlap)[0]}")
    missing = {s.identity for s in probes} - {s.identity for s in gallery}
    if missing:
        raise CommandError(f"probe identities absent from the gallery: {sorted(missing)}")
    params: ModelParams = state.params
    g_store = embed_set(gallery, params, cfg.model)
    p_store = embed_set(probes, params, cfg.model)
    report = rank1_matrix(g_store, p_store, cfg.data.views)
    text = render_report(report, method)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(report_csv(report))
    g_store.save(out / "embeddings" / "gallery")
    p_store.save(out / "embeddings" / "probe")
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    start = time.perf_counter()

    def show(r):
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:42s} max rel err {r.error:.3e}", flush=True)

    results = run_battery(cfg, seed=cfg.run.seed, on_result=show)
    failed = [r for r in results if not r.passed]
    elapsed = time.perf_counter() - start
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {elapsed:.1f}s "
          f"(max rel err {max(r.error for r in results):.3e})")
    if failed:
        print("failing checks: " + ", ".join(r.name for r in failed))
        return EXIT_CHECK_FAILED
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        default = micro_config() if args.command == "gradcheck" else None
        cfg = load_config(args, default)
        with threadpool_limits(limits=cfg.run.workers):
            if args.command == "gen-data":
                return cmd_gen_data(cfg, args.force)
            if args.command == "train":
                return cmd_train(cfg, args.resume, args.force)
            if args.command == "eval":
                return cmd_eval(cfg, args.checkpoint, args.method)
            return cmd_gradcheck(cfg)
    except (ConfigError, CommandError, ValueError) as exc:
        print(f"gaittake {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
