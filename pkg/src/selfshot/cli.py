"""Command-line entry point: ``selfshot <command> --config PATH --seed INT --out DIR``.

Exit codes: 0 success, 1 validation error (bad flags, config, missing or
mismatched artifacts), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .config import ConfigError, ExperimentConfig, TrainSection, config_hash_of_file, load_config
from .datagen import (DatasetManifest, EpisodeError, InvalidSpecError, VideoStore, episodes_path, generate_dataset,
                      load_episodes, make_episodes, save_episodes)
from .embed import Embedder, train_embedder
from .retrieve import EmbeddingIndex, RetrievalError, build_index, extend_supports, knn
from .vistr import SelfShotVisTR, VisConfig

log = logging.getLogger("selfshot")

FP_SUFFIX = ".fp.json"


class ValidationError(Exception):
    """Bad user input or missing / inconsistent artifacts: exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# ---------------------------------------------------------------------------
# artifacts and provenance


def write_artifact(path: Path, data: bytes, kind: str) -> str:
    """Write ``data`` and a sidecar fingerprint file; returns the fingerprint."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    fp = checkpoint.fingerprint_bytes(data)
    Path(str(path) + FP_SUFFIX).write_text(json.dumps({"kind": kind, "sha256_16": fp}, sort_keys=True) + "\n")
    return fp


def verify_artifact(path: Path, kind: str) -> str:
    """Check a file against its sidecar fingerprint before use."""
    if not path.exists():
        raise ValidationError(f"missing {kind} artifact: {path}")
    side = Path(str(path) + FP_SUFFIX)
    if not side.exists():
        raise ValidationError(f"{kind} artifact {path} has no fingerprint file {side.name}")
    meta = json.loads(side.read_text())
    fp = checkpoint.fingerprint_file(path)
    if meta.get("kind") != kind:
        raise ValidationError(f"{path} is a {meta.get('kind')} artifact, expected {kind}")
    if meta.get("sha256_16") != fp:
        raise ValidationError(f"fingerprint mismatch for {path}: file {fp}, recorded {meta.get('sha256_16')}")
    return fp


class Run:
    """Collects provenance for one command and writes ``run.json`` under --out."""

    def __init__(self, args, cfg: ExperimentConfig | None):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat()

    def write(self, status: str = "ok", error: str | None = None) -> None:
        flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(self.args).items())
                 if k not in ("func", "out", "config", "verbose")}
        doc = {
            "command": self.args.command,
            "version": __version__,
            "seed": self.args.seed,
            "config_hash": config_hash_of_file(self.args.config) if self.args.config else None,
            "resolved_config_hash": self.cfg.digest() if self.cfg is not None else None,
            "flags": flags,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "status": status,
            "error": error,
            "started_at": self.started,
            "finished_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }
        self.out.mkdir(parents=True, exist_ok=True)
        text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
        (self.out / "run.json").write_text(text)
        hist = self.out / "runs"
        hist.mkdir(exist_ok=True)
        (hist / f"{self.args.command}.json").write_text(text)


def _data_dir(args) -> Path:
    return Path(args.data) if args.data else Path(args.out) / "data"


def _load_data(args, run: Run) -> tuple[DatasetManifest, VideoStore]:
    root = _data_dir(args)
    run.inputs["manifest"] = verify_artifact(root / "manifest.json", "manifest")
    manifest = DatasetManifest.load(root)
    return manifest, VideoStore(manifest)


def _load_embedder(args, run: Run) -> Embedder:
    path = Path(args.embedder) if args.embedder else Path(args.out) / "embedder.ckpt"
    run.inputs["embedder"] = verify_artifact(path, "embedder")
    return Embedder.load(path)


def _load_index(args, run: Run, encoder: Embedder) -> EmbeddingIndex:
    path = Path(args.index) if args.index else Path(args.out) / "pool.index"
    run.inputs["index"] = verify_artifact(path, "index")
    index = EmbeddingIndex.load(path)
    if index.fingerprint != encoder.fingerprint:
        raise ValidationError(f"index {path} was built with encoder {index.fingerprint}, "
                              f"but the embedder is {encoder.fingerprint}")
    return index


def _load_model(args, run: Run) -> SelfShotVisTR:
    path = Path(args.model) if args.model else Path(args.out) / "vis.ckpt"
    run.inputs["model"] = verify_artifact(path, "vis")
    return SelfShotVisTR.load(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: ExperimentConfig, run: Run) -> None:
    root = _data_dir(args)
    manifest = generate_dataset(cfg.data_config(), cfg.stream("data"), root)
    raw = (root / "manifest.json").read_bytes()
    run.outputs["manifest"] = write_artifact(root / "manifest.json", raw, "manifest")
    ep_seed = cfg.stream("eval")
    for split in ("val", "test"):
        for k in sorted(set(cfg.eval.ks)):
            try:
                eps = make_episodes(manifest, k, "oracle", split, ep_seed)
            except EpisodeError as e:
                log.warning("no %s oracle k=%d episodes: %s", split, k, e)
                continue
            path = episodes_path(root, split, "oracle", k)
            save_episodes(path, eps)
            run.outputs[str(path.relative_to(root))] = checkpoint.fingerprint_file(path)
    print(f"wrote {len(manifest.videos)} videos to {root}")


def cmd_train_embed(args, cfg: ExperimentConfig, run: Run) -> None:
    manifest, store = _load_data(args, run)
    emb, _ = train_embedder(manifest, store.video, cfg.embed_config(), cfg.stream("embed"),
                            Path(args.out) / "embed")
    run.outputs["embedder"] = write_artifact(Path(args.out) / "embedder.ckpt", emb.to_bytes(), "embedder")
    print(f"embedder {emb.fingerprint}")


def cmd_build_index(args, cfg: ExperimentConfig, run: Run) -> None:
    manifest, store = _load_data(args, run)
    emb = _load_embedder(args, run)
    ids = manifest.ids("pool")
    if args.pool_size:
        if args.pool_size > len(ids):
            raise ValidationError(f"--pool-size {args.pool_size} exceeds the pool ({len(ids)} videos)")
        ids = ids[:args.pool_size]
    if not ids:
        raise ValidationError("dataset has no pool videos")
    index = build_index([store.video(i) for i in ids], emb)
    run.outputs["index"] = write_artifact(Path(args.out) / "pool.index", index.to_bytes(), "index")
    print(f"indexed {len(index)} videos, dim {index.dim}")


def cmd_retrieve(args, cfg: ExperimentConfig, run: Run) -> None:
    manifest, store = _load_data(args, run)
    emb = _load_embedder(args, run)
    index = _load_index(args, run, emb)
    if args.query not in {v.video_id for v in manifest.videos}:
        raise ValidationError(f"unknown query video {args.query!r}")
    k = args.k if args.k is not None else cfg.retrieve.k
    exclude_self = cfg.retrieve.exclude_self if args.exclude_self is None else args.exclude_self
    q = store.video(args.query)
    res = knn(index, emb.encode_video(q), k, exclude_ids=[args.query] if exclude_self else [])
    doc = {"query_id": args.query, "mode": "selfshot", "encoder": emb.fingerprint, **res.to_dict()}
    if args.extra:
        from .datagen import Episode
        ep = extend_supports(Episode(args.query, res.ids, k, "selfshot", "test"), q, index, emb, args.extra,
                             store.video)
        doc["extra"] = ep.support_ids[k:]
        doc["support_ids"] = ep.support_ids
    else:
        doc["support_ids"] = res.ids
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    path = Path(args.out) / "retrieval.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    run.outputs["retrieval"] = checkpoint.fingerprint_file(path)
    print(text, end="")


def cmd_train_vis(args, cfg: ExperimentConfig, run: Run) -> None:
    from .pipeline import train_vis
    manifest, store = _load_data(args, run)
    vis_cfg, tc = cfg.vis, cfg.train
    if args.paper_scale:
        vis_cfg, tc = VisConfig.paper_scale(), replace(TrainSection.paper_scale(), seed=cfg.train.seed)
    episodes = None
    if args.episodes:
        episodes = load_episodes(args.episodes)
        run.inputs["episodes"] = checkpoint.fingerprint_file(args.episodes)
    resume = None
    if args.resume:
        resume = Path(args.resume)
        run.inputs["resume"] = checkpoint.fingerprint_file(resume)
    out = Path(args.out) / "vis"
    model, _ = train_vis(manifest, store, vis_cfg, tc, cfg.stream("train"), episodes=episodes, out_dir=out,
                         resume_from=resume)
    run.outputs["model"] = write_artifact(Path(args.out) / "vis.ckpt", (out / "vis.ckpt").read_bytes(), "vis")
    print(f"model written to {Path(args.out) / 'vis.ckpt'}")


def _support_context(args, cfg, run, mode):
    manifest, store = _load_data(args, run)
    model = _load_model(args, run)
    emb = index = None
    if mode in ("selfshot", "semi") or getattr(args, "extra", 0):
        emb = _load_embedder(args, run)
        index = _load_index(args, run, emb)
    return manifest, store, model, emb, index


def cmd_infer(args, cfg: ExperimentConfig, run: Run) -> None:
    from .pipeline import infer, predictions_to_dict
    manifest, store, model, emb, index = _support_context(args, cfg, run, args.mode)
    if args.query not in {v.video_id for v in manifest.videos}:
        raise ValidationError(f"unknown query video {args.query!r}")
    k = args.k if args.k is not None else cfg.retrieve.k
    pred, prov = infer(store.video(args.query), args.mode, k, model, store.video, split=cfg.eval.split,
                       manifest=None if args.mode == "selfshot" else manifest, index=index, encoder=emb,
                       k_oracle=args.k_oracle, n_extra=args.extra, seed=cfg.stream("eval"),
                       random_pool=manifest.ids("pool") or None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"provenance": prov, "predictions": predictions_to_dict(pred)}
    (out / "predictions.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    np.save(out / "mask_logits.npy", pred.mask_logits.numpy().astype("<f4"), allow_pickle=False)
    run.outputs["predictions"] = checkpoint.fingerprint_file(out / "predictions.json")
    run.outputs["mask_logits"] = checkpoint.fingerprint_file(out / "mask_logits.npy")
    print(json.dumps(prov, sort_keys=True))


def cmd_eval(args, cfg: ExperimentConfig, run: Run) -> None:
    from .pipeline import ExperimentArtifacts, eval_queries, evaluate_run, resolve_supports, run_experiment
    thr = args.iou_thresh
    out = Path(args.out)
    if args.grid:
        manifest, store = _load_data(args, run)
        model = _load_model(args, run)
        emb = _load_embedder(args, run)
        index = _load_index(args, run, emb)
        cfg = replace(cfg, eval=replace(cfg.eval, iou_thresh=thr))
        reports = run_experiment(cfg, out, ExperimentArtifacts(manifest, store, emb, model, index))
        for name in sorted(reports):
            run.outputs[f"reports/{name}.json"] = checkpoint.fingerprint_file(out / "reports" / f"{name}.json")
        print((out / "summary.txt").read_text(), end="")
        return
    manifest, store, model, emb, index = _support_context(args, cfg, run, args.mode)
    split = cfg.eval.split
    if args.episodes:
        episodes = load_episodes(args.episodes)
        run.inputs["episodes"] = checkpoint.fingerprint_file(args.episodes)
    else:
        k = args.k if args.k is not None else cfg.retrieve.k
        episodes = [resolve_supports(store.video(q), args.mode, k, split=split,
                                     manifest=None if args.mode == "selfshot" else manifest, index=index,
                                     encoder=emb, get_video=store.video, k_oracle=args.k_oracle,
                                     n_extra=args.extra, seed=cfg.stream("eval"),
                                     random_pool=manifest.ids("pool") or None)
                    for q in eval_queries(cfg, manifest)]
    report = evaluate_run(episodes, model, store, thr, mode=args.mode, tag=args.mode)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    run.outputs["report"] = checkpoint.fingerprint_file(out / "report.json")
    print(f"{args.mode}: mAP@{thr} = {report.mAP:.4f} over {len(report.episodes)} episodes")


def cmd_report(args, cfg: ExperimentConfig, run: Run) -> None:
    from . import report as rp
    from .pipeline import summary_table
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src = Path(args.reports) if args.reports else out / "reports"
    reports = rp.load_reports(src)
    if not reports and not args.heatmap_query:
        raise ValidationError(f"no evaluation reports found in {src}")
    written = []
    if reports:
        written += rp.plot_pr_curves(reports, out / "pr_curves")
        if rp.scaling_points(reports):
            written += rp.plot_scaling(reports, out / "scaling")
        (out / "report_summary.txt").write_text(summary_table(reports, cfg.eval.semi_max))
        written.append(out / "report_summary.txt")
    if args.heatmap_query:
        from .pipeline import resolve_supports, support_clip, query_clip
        manifest, store, model, emb, index = _support_context(args, cfg, run, args.mode)
        q = store.video(args.heatmap_query)
        ep = resolve_supports(q, args.mode, args.k or cfg.retrieve.k, split=cfg.eval.split,
                              manifest=None if args.mode == "selfshot" else manifest, index=index, encoder=emb,
                              get_video=store.video, seed=cfg.stream("eval"),
                              random_pool=manifest.ids("pool") or None)
        qt, idx = query_clip(q, model.cfg)
        before, after = model.heatmaps(qt, [support_clip(store.video(s), model.cfg) for s in ep.support_ids])
        written += rp.plot_heatmaps(q.frames[idx], before, after, out / f"heatmaps_{args.heatmap_query}")
    for p in written:
        run.outputs[p.name] = checkpoint.fingerprint_file(p)
    print("\n".join(str(p) for p in written))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment config")
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--verbose", action="store_true")

    def artifacts(p, *names):
        if "data" in names:
            p.add_argument("--data", help="dataset root (default: OUT/data)")
        if "embedder" in names:
            p.add_argument("--embedder", help="embedder checkpoint (default: OUT/embedder.ckpt)")
        if "index" in names:
            p.add_argument("--index", help="pool index (default: OUT/pool.index)")
        if "model" in names:
            p.add_argument("--model", help="VIS checkpoint (default: OUT/vis.ckpt)")

    def support_flags(p):
        p.add_argument("--mode", choices=("oracle", "selfshot", "semi", "random"), default="selfshot")
        p.add_argument("--k", type=int, help="number of supports (self-shot count in semi mode)")
        p.add_argument("--k-oracle", type=int, default=1, help="oracle supports in semi mode")
        p.add_argument("--extra", type=int, default=0, help="extra supports retrieved with the mean key")

    parser = _Parser(prog="selfshot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="render the synthetic benchmark")
    artifacts(p, "data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-embed", parents=[common], help="train the self-supervised video embedder")
    artifacts(p, "data")
    p.set_defaults(func=cmd_train_embed)

    p = sub.add_parser("build-index", parents=[common], help="embed the unlabelled pool")
    artifacts(p, "data", "embedder")
    p.add_argument("--pool-size", type=int, default=0, help="index only the first N pool videos")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("retrieve", parents=[common], help="k nearest pool videos for a query")
    artifacts(p, "data", "embedder", "index")
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--exclude-self", type=_bool, default=None, metavar="BOOL")
    p.add_argument("--extra", type=int, default=0)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train-vis", parents=[common], help="episodic training of the VIS model")
    artifacts(p, "data")
    p.add_argument("--paper-scale", action="store_true", help="full-size model and schedule")
    p.add_argument("--episodes", help="fixed episode file to train on")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train_vis)

    p = sub.add_parser("infer", parents=[common], help="segment one query video")
    artifacts(p, "data", "embedder", "index", "model")
    p.add_argument("--query", required=True)
    support_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="mAP over the evaluation split")
    artifacts(p, "data", "embedder", "index", "model")
    support_flags(p)
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--episodes", help="fixed episode file instead of resolving supports")
    p.add_argument("--grid", action="store_true", help="run the full experiment grid")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="figures and tables from saved reports")
    artifacts(p, "data", "embedder", "index", "model")
    p.add_argument("--reports", help="directory of report JSON files (default: OUT/reports)")
    p.add_argument("--heatmap-query", help="also dump fuser attention heatmaps for this query")
    p.add_argument("--mode", choices=("oracle", "selfshot", "semi", "random"), default="oracle")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_report)
    return parser


VALIDATION_ERRORS = (ValidationError, ConfigError, EpisodeError, InvalidSpecError, RetrievalError,
                     checkpoint.CheckpointError, FileNotFoundError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors (and --help) as return codes
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args, None)
    try:
        cfg = load_config(args.config, args.seed) if args.config else ExperimentConfig(seed=args.seed)
        run.cfg = cfg
        args.func(args, cfg, run)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        run.write("invalid", str(e))
        return 1
    except Exception as e:  # noqa: BLE001
        log.exception("command failed")
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        run.write("failed", f"{type(e).__name__}: {e}")
        return 2
    run.write()
    return 0


if __name__ == "__main__":
    sys.exit(main())
