"""Episodic VIS training, support resolution per inference mode, and experiment grids."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .config import ExperimentConfig, TrainSection
from .datagen import (DatasetManifest, Episode, GroundTruth, Video, VideoStore, clip_indices,
                      generate_dataset, make_episodes, middle_frame)
from .embed import Embedder, train_embedder
from .evaluation import (EpisodeResult, EvalReport, SCORE_FLOOR, average_precision, iou_matrix,
                         match_predictions)
from .matchloss import LossWeights, hungarian, match_cost, training_loss
from .retrieve import EmbeddingIndex, RetrievalError, build_index, extend_supports, knn, self_shot, semi_shot
from .vistr import Predictions, SelfShotVisTR, VisConfig, clip_tensor

logger = logging.getLogger(__name__)

INFER_MODES = ("oracle", "selfshot", "semi", "random")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# inputs


def query_clip(video: Video, cfg: VisConfig, mode: str = "center", rng=None) -> tuple[torch.Tensor, np.ndarray]:
    idx = clip_indices(video.num_frames, cfg.num_frames, mode, rng)
    return clip_tensor(video.frames[idx], cfg.height, cfg.width), idx


def support_clip(video: Video, cfg: VisConfig, single_frame: bool = False, mode: str = "center",
                 rng=None) -> torch.Tensor:
    idx = middle_frame(video.num_frames) if single_frame else clip_indices(video.num_frames, cfg.support_frames,
                                                                           mode, rng)
    return clip_tensor(video.frames[idx], cfg.height, cfg.width)


def gt_targets(gt: GroundTruth, idx: np.ndarray, cfg: VisConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Boxes (n, T, 4) and masks downsampled to the mask grid (n, T, H0, W0)."""
    boxes = torch.from_numpy(gt.boxes[:, idx]).float()
    masks = torch.from_numpy(gt.masks[:, idx]).float()
    H0, W0 = cfg.mask_hw
    n, T = masks.shape[:2]
    if n == 0:
        return boxes.reshape(0, T, 4), torch.zeros(0, T, H0, W0)
    small = F.interpolate(masks.reshape(n * T, 1, *masks.shape[-2:]), size=(H0, W0), mode="area")
    return boxes, (small >= 0.5).float().view(n, T, H0, W0)


def support_targets(gt: GroundTruth, classes) -> GroundTruth:
    """Only the query instances whose class some support video shows."""
    keep = [i for i, c in enumerate(gt.class_ids) if c in set(classes)]
    return GroundTruth(gt.masks[keep], gt.boxes[keep], [gt.class_ids[i] for i in keep])


def episode_inputs(ep: Episode, get_video: Callable[[str], Video], cfg: VisConfig, mode: str = "center",
                   rng=None):
    q = get_video(ep.query_id)
    qt, idx = query_clip(q, cfg, mode, rng)
    sups = [support_clip(get_video(s), cfg, ep.single_frame_support, mode, rng) for s in ep.support_ids]
    return qt, sups, idx


@torch.no_grad()
def predict_episode(model: SelfShotVisTR, ep: Episode, get_video: Callable[[str], Video]) -> Predictions:
    if not ep.support_ids:
        raise ValueError(f"episode for {ep.query_id} has no supports; resolve supports first")
    model.eval()
    qt, sups, _ = episode_inputs(ep, get_video, model.cfg)
    return model(qt, sups)


def episode_loss(model: SelfShotVisTR, qt, sups, gt: GroundTruth, idx, weights: LossWeights):
    pred = model(qt, sups)
    boxes, masks = gt_targets(gt, idx, model.cfg)
    cost = match_cost(boxes, pred.fg_prob, pred.boxes, weights)
    sigma, _ = hungarian(cost)
    return training_loss(boxes, masks, pred.fg_prob, pred.boxes, pred.mask_logits, sigma, weights,
                         return_components=True)


# ---------------------------------------------------------------------------
# training


def _optimizer(model: SelfShotVisTR, tc: TrainSection) -> torch.optim.AdamW:
    groups = model.param_groups(tc.lr, tc.lr_backbone, tc.weight_decay)
    if tc.lr_backbone == 0:
        # frozen backbone: no gradients, no optimizer state
        model.backbone.requires_grad_(False)
        groups = groups[:1]
    return torch.optim.AdamW(groups)


def _optim_tensors(opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    state = opt.state_dict()["state"]
    for idx, st in state.items():
        for key, val in st.items():
            out[f"optim.{idx}.{key}"] = val.detach().cpu().numpy() if torch.is_tensor(val) else np.float32(val)
    return out


def _load_optim(opt: torch.optim.Optimizer, tensors: dict) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for name, arr in tensors.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr))
    sd["state"] = state
    opt.load_state_dict(sd)


def pretrain_backbone(manifest: DatasetManifest, store: VideoStore, cfg: VisConfig, tc: TrainSection,
                      seed: int) -> dict[str, torch.Tensor]:
    """Backbone weights from instance classification on single frames of the seen classes.

    Features are mask-pooled on the token grid and classified linearly.  The
    result gives the fuser shape and colour features to match on.
    """
    from .vistr import Backbone
    torch.manual_seed(seed)
    bb = Backbone(cfg)
    ids = manifest.ids("train")
    classes = sorted({c for v in ids for c in manifest.classes_of(v)})
    label = {c: i for i, c in enumerate(classes)}
    head = torch.nn.Linear(cfg.d, len(classes))
    opt = torch.optim.Adam(list(bb.parameters()) + list(head.parameters()), tc.pretrain_lr)
    batch = min(tc.pretrain_batch, len(ids))
    for step in range(tc.pretrain_steps):
        rng = np.random.default_rng([seed, 7, step])
        feats, labels = [], []
        for vid in rng.choice(len(ids), size=batch, replace=False):
            video, gt = store.video(ids[int(vid)]), store.ground_truth(ids[int(vid)])
            t = int(rng.integers(video.num_frames))
            f = bb(clip_tensor(video.frames[t:t + 1], cfg.height, cfg.width))[0]
            for i in range(gt.num_instances):
                w = torch.from_numpy(gt.masks[i, t:t + 1].astype(np.float32))[None]
                w = F.adaptive_avg_pool2d(w, f.shape[-2:])[0, 0]
                if w.sum() > 1e-3:
                    feats.append((f * w).sum((1, 2)) / w.sum())
                    labels.append(label[gt.class_ids[i]])
        if not feats:
            continue
        loss = F.cross_entropy(head(torch.stack(feats)), torch.tensor(labels))
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite pretraining loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return bb.state_dict()


def _step_episode(manifest: DatasetManifest, episodes: Sequence[Episode] | None, tc: TrainSection, seed: int,
                  step: int, epoch: int, steps_per_epoch: int) -> Episode:
    """The training episode for a global step; a pure function of (seed, step)."""
    rng = np.random.default_rng([seed, 3, step])
    if episodes is not None:
        order = np.random.default_rng([seed, 4, epoch]).permutation(len(episodes))
        ep = episodes[int(order[(step - epoch * steps_per_epoch) % len(episodes)])]
        return ep
    train_ids = manifest.ids("train")
    order = np.random.default_rng([seed, 4, epoch]).permutation(len(train_ids))
    q = train_ids[int(order[(step - epoch * steps_per_epoch) % len(train_ids)])]
    k = int(rng.choice(tc.k_choices))
    qc = set(manifest.classes_of(q))
    mode = "oracle"
    if tc.random_support_prob > 0 and rng.random() < tc.random_support_prob:
        mode = "random"
        cands = [v for v in train_ids if v != q]
    else:
        cands = [v for v in train_ids if v != q and qc & set(manifest.classes_of(v))]
    k = min(k, len(cands))
    picks = rng.choice(len(cands), size=k, replace=False)
    return Episode(q, [cands[int(i)] for i in picks], k, mode, "train")


def train_vis(manifest: DatasetManifest, store: VideoStore, vis_cfg: VisConfig, tc: TrainSection, seed: int,
              episodes: Sequence[Episode] | None = None, out_dir=None, resume_from=None,
              weights: LossWeights = LossWeights(), max_steps: int | None = None,
              progress: Callable[[dict], None] | None = None) -> tuple[SelfShotVisTR, list[dict]]:
    """Train on oracle-paired episodes of the seen classes.

    With ``episodes`` given the model cycles through that fixed list, otherwise
    an oracle episode is sampled for every step from ``(seed, step)``.
    A checkpoint (model, optimizer, counters) is written after every epoch.
    """
    torch.manual_seed(seed)
    model = SelfShotVisTR(vis_cfg)
    if tc.pretrain_steps and resume_from is None:
        model.backbone.load_state_dict(pretrain_backbone(manifest, store, vis_cfg, tc, seed))
    opt = _optimizer(model, tc)
    start_epoch, step = 0, 0
    if resume_from is not None:
        model, tensors, desc = SelfShotVisTR.from_bytes(Path(resume_from).read_bytes())
        opt = _optimizer(model, tc)
        _load_optim(opt, tensors)
        start_epoch = int(desc["extra"]["epoch"]) + 1
        step = int(desc["extra"]["step"])
    n_items = len(episodes) if episodes is not None else len(manifest.ids("train"))
    if n_items == 0:
        raise ValueError("no training episodes")
    steps_per_epoch = tc.steps_per_epoch or n_items
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log: list[dict] = []
    log_fh = open(out / "train_log.jsonl", "a", encoding="utf-8") if out is not None else None

    def targets(ep: Episode) -> GroundTruth:
        shown = {c for sid in ep.support_ids for c in manifest.classes_of(sid)}
        return support_targets(store.ground_truth(ep.query_id), shown)

    try:
        for epoch in range(start_epoch, tc.epochs):
            decay = 0.1 if epoch >= tc.lr_decay_epoch else 1.0
            for g, base in zip(opt.param_groups, (tc.lr, tc.lr_backbone)):
                g["lr"] = base * decay
            model.train()
            opt.zero_grad()
            pending = 0
            for j in range(steps_per_epoch):
                if max_steps is not None and step >= max_steps:
                    break
                ep = _step_episode(manifest, episodes, tc, seed, step, epoch, steps_per_epoch)
                rng = np.random.default_rng([seed, 5, step])
                qt, sups, idx = episode_inputs(ep, store.video, vis_cfg, "random", rng)
                loss, comp = episode_loss(model, qt, sups, targets(ep), idx, weights)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite training loss at step {step}")
                (loss / tc.grad_accum).backward()
                pending += 1
                if pending == tc.grad_accum or j == steps_per_epoch - 1:
                    if tc.clip_grad > 0:
                        torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip_grad)
                    opt.step()
                    opt.zero_grad()
                    pending = 0
                row = {"step": step, "epoch": epoch, "loss": loss.item(), "class": comp["class"].item(),
                       "box": comp["box"].item(), "mask": comp["mask"].item(), "lr": opt.param_groups[0]["lr"]}
                log.append(row)
                if log_fh is not None:
                    log_fh.write(json.dumps(row) + "\n")
                if progress is not None:
                    progress(row)
                step += 1
            if pending:
                opt.step()
                opt.zero_grad()
            if out is not None:
                data = model.to_bytes(_optim_tensors(opt), {"epoch": epoch, "step": step, "seed": seed,
                                                           "train": asdict(tc)})
                (out / f"vis_epoch{epoch:03d}.ckpt").write_bytes(data)
                (out / "vis.ckpt").write_bytes(data)
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return model, log


# ---------------------------------------------------------------------------
# inference


def resolve_supports(query_video: Video, mode: str, k: int, *, split: str = "test",
                     manifest: DatasetManifest | None = None, index: EmbeddingIndex | None = None,
                     encoder: Embedder | None = None, get_video: Callable[[str], Video] | None = None,
                     k_oracle: int = 1, n_extra: int = 0, seed: int = 0,
                     random_pool: Sequence[str] | None = None) -> Episode:
    """Supports for one query. selfshot touches only pixels and the index; never labels."""
    qid = query_video.video_id
    if mode not in INFER_MODES:
        raise ValueError(f"unknown inference mode {mode!r}")
    if mode in ("selfshot", "semi") and (index is None or encoder is None):
        raise ValueError(f"mode {mode} needs an embedding index and its encoder")
    if mode == "selfshot":
        manifest = None  # label-stripped: nothing below may consult class ids
        ep = self_shot(query_video, index, encoder, k, split)
    elif mode == "random":
        pool = list(random_pool) if random_pool is not None else (index.ids if index is not None else
                                                                  manifest.ids("pool"))
        cands = [v for v in pool if v != qid]
        if k > len(cands):
            raise RetrievalError(f"random pool has only {len(cands)} videos")
        rng = np.random.default_rng([seed, 6, *qid.encode()])
        ep = Episode(qid, [cands[int(i)] for i in rng.choice(len(cands), size=k, replace=False)], k, "random",
                     split)
    else:
        if manifest is None:
            raise ValueError(f"mode {mode} needs labels (a manifest)")
        n_oracle = k if mode == "oracle" else k_oracle
        qc = set(manifest.classes_of(qid))
        cands = [v for v in manifest.ids(split) if v != qid and qc & set(manifest.classes_of(v))]
        if n_oracle > len(cands):
            raise RetrievalError(f"only {len(cands)} labelled supports for classes {sorted(qc)}")
        rng = np.random.default_rng([seed, 7, *qid.encode()])
        picks = [cands[int(i)] for i in rng.choice(len(cands), size=n_oracle, replace=False)]
        ep = Episode(qid, picks, n_oracle, "oracle", split)
        if mode == "semi":
            ep = semi_shot(ep, query_video, index, encoder, k, get_video)
    if n_extra:
        ep = extend_supports(ep, query_video, index, encoder, n_extra, get_video)
    return ep


def infer(query_video: Video, mode: str, k: int, model: SelfShotVisTR, get_video: Callable[[str], Video],
          **kw) -> tuple[Predictions, dict]:
    ep = resolve_supports(query_video, mode, k, get_video=get_video, **kw)
    if not ep.support_ids:
        raise ValueError("no supports resolved")
    model.eval()
    with torch.no_grad():
        qt, _ = query_clip(query_video, model.cfg)
        sups = [support_clip(get_video(s), model.cfg) for s in ep.support_ids]
        pred = model(qt, sups)
    provenance = {"query_id": ep.query_id, "mode": mode, "support_ids": ep.support_ids, "k": k}
    return pred, provenance


def predictions_to_dict(pred: Predictions) -> dict:
    return {"fg_prob": pred.fg_prob.tolist(), "boxes": pred.boxes.tolist(),
            "mask_logits_shape": list(pred.mask_logits.shape),
            "mask_logits_sha256": checkpoint.fingerprint_bytes(pred.mask_logits.numpy().astype("<f4").tobytes())}


# ---------------------------------------------------------------------------
# evaluation


def binarize_masks(pred: Predictions, height: int, width: int) -> np.ndarray:
    """Upsample logits to frame size and threshold at sigmoid 0.5: (n, T, H, W) bool."""
    logits = F.interpolate(pred.mask_logits.float(), size=(height, width), mode="bilinear", align_corners=False)
    return (logits > 0).numpy()


def evaluate_run(episodes: Sequence[Episode], model: SelfShotVisTR, store: VideoStore, iou_thresh: float = 0.5,
                 mode: str | None = None, tag: str = "") -> EvalReport:
    """Per-episode AP over all annotated query instances; labels read only for scoring."""
    manifest = store.manifest
    report = EvalReport(iou_thresh=iou_thresh, mode=mode or (episodes[0].mode if episodes else ""), tag=tag)
    for ep in episodes:
        gt = store.ground_truth(ep.query_id)
        if gt is None:
            raise ValueError(f"missing ground truth for {ep.query_id}")
        video = store.video(ep.query_id)
        pred = predict_episode(model, ep, store.video)
        idx = clip_indices(video.num_frames, model.cfg.num_frames, "center")
        H, W = video.frames.shape[1:3]
        masks = binarize_masks(pred, H, W)
        scores = pred.fg_prob.numpy()
        keep = scores >= SCORE_FLOOR
        gt_masks = [gt.masks[i][idx] for i in range(gt.num_instances)]
        kept = np.flatnonzero(keep)
        ap = average_precision(scores[kept], [masks[i] for i in kept], gt_masks, iou_thresh)
        tp = match_predictions(scores[kept], iou_matrix([masks[i] for i in kept], gt_masks), iou_thresh)
        qc = set(gt.class_ids)
        prec = None
        if ep.support_ids:
            prec = float(np.mean([bool(qc & set(manifest.classes_of(s))) for s in ep.support_ids]))
        report.episodes.append(EpisodeResult(ep.query_id, ap, gt.num_instances, len(qc), list(ep.support_ids),
                                             prec, int((~keep).sum()),
                                             [float(v) for v in np.sort(scores[kept])[::-1]],
                                             [bool(v) for v in tp]))
    return report


def retrieval_precision(index: EmbeddingIndex, encoder: Embedder, queries: Sequence[Video],
                        manifest: DatasetManifest, k: int = 5) -> float:
    """Mean fraction of the top-k retrieved videos sharing a class with the query."""
    vals = []
    for q in queries:
        res = knn(index, encoder.encode_video(q), k, exclude_ids=[q.video_id])
        qc = set(manifest.classes_of(q.video_id))
        vals.append(np.mean([bool(qc & set(manifest.classes_of(r))) for r in res.ids]))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentArtifacts:
    manifest: DatasetManifest
    store: VideoStore
    embedder: Embedder
    model: SelfShotVisTR
    index: EmbeddingIndex


def prepare_artifacts(cfg: ExperimentConfig, out_dir, reuse: bool = True) -> ExperimentArtifacts:
    out = Path(out_dir)
    root = Path(cfg.data.root)
    if not root.is_absolute():
        root = out / root
    if reuse and (root / "manifest.json").exists():
        manifest = DatasetManifest.load(root)
    else:
        manifest = generate_dataset(cfg.data_config(), cfg.stream("data"), root)
    store = VideoStore(manifest)
    emb_path = out / "embed" / "embedder.ckpt"
    if reuse and emb_path.exists():
        embedder = Embedder.load(emb_path)
    else:
        embedder, _ = train_embedder(manifest, store.video, cfg.embed_config(), cfg.stream("embed"), out / "embed")
    vis_path = out / "vis" / "vis.ckpt"
    if reuse and vis_path.exists():
        model = SelfShotVisTR.load(vis_path)
    else:
        model, _ = train_vis(manifest, store, cfg.vis, cfg.train, cfg.stream("train"), out_dir=out / "vis")
    pool_ids = manifest.ids("pool")
    index = build_index([store.video(i) for i in pool_ids], embedder)
    index.save(out / "pool.index")
    return ExperimentArtifacts(manifest, store, embedder, model, index)


def eval_queries(cfg: ExperimentConfig, manifest: DatasetManifest) -> list[str]:
    ids = manifest.ids(cfg.eval.split)
    if cfg.eval.max_queries:
        rng = np.random.default_rng([cfg.stream("eval"), 8])
        ids = sorted(ids[int(i)] for i in rng.choice(len(ids), size=min(cfg.eval.max_queries, len(ids)),
                                                     replace=False))
    return ids


def run_experiment(cfg: ExperimentConfig, out_dir, artifacts: ExperimentArtifacts | None = None,
                   cells: Sequence[str] | None = None) -> dict[str, EvalReport]:
    """Evaluate the grid of support settings; one report per cell, failures recorded and skipped.

    Cell names: ``random_k{k}``, ``oracle_k{k}``, ``selfshot_k{k}``,
    ``selfshot_k{k}+{n}``, ``semi_o{o}_s{s}``, ``pool{N}_selfshot_k{k}``.
    """
    out = Path(out_dir)
    art = artifacts or prepare_artifacts(cfg, out)
    m, store, emb, model, index = art.manifest, art.store, art.embedder, art.model, art.index
    split, thr, seed = cfg.eval.split, cfg.eval.iou_thresh, cfg.stream("eval")
    queries = eval_queries(cfg, m)
    rk = cfg.retrieve.k
    grid: dict[str, Callable[[Video], Episode]] = {}
    common = dict(split=split, manifest=m, index=index, encoder=emb, get_video=store.video, seed=seed)
    for k in cfg.eval.ks:
        grid[f"random_k{k}"] = lambda q, k=k: resolve_supports(q, "random", k, **common)
        grid[f"oracle_k{k}"] = lambda q, k=k: resolve_supports(q, "oracle", k, **common)
        grid[f"selfshot_k{k}"] = lambda q, k=k: resolve_supports(q, "selfshot", k, **common)
    for n in cfg.retrieve.extras:
        grid[f"selfshot_k{rk}+{n}"] = lambda q, n=n: resolve_supports(q, "selfshot", rk, n_extra=n, **common)
    for o in range(cfg.eval.semi_max + 1):
        for s in range(cfg.eval.semi_max + 1 - o):
            if o + s == 0:
                continue
            if o == 0:
                grid[f"semi_o0_s{s}"] = lambda q, s=s: resolve_supports(q, "selfshot", s, **common)
            else:
                grid[f"semi_o{o}_s{s}"] = lambda q, o=o, s=s: resolve_supports(q, "semi", s, k_oracle=o, **common)
    pool_ids = index.ids
    for size in cfg.retrieve.pool_sizes:
        if size > len(pool_ids):
            continue
        sub = index.subset(pool_ids[:size])
        grid[f"pool{size}_selfshot_k{rk}"] = lambda q, sub=sub: self_shot(q, sub, emb, rk, split)
    if cells is not None:
        grid = {k: v for k, v in grid.items() if k in set(cells)}

    reports: dict[str, EvalReport] = {}
    failures: dict[str, str] = {}
    (out / "reports").mkdir(parents=True, exist_ok=True)
    for name, make in grid.items():
        try:
            eps = [make(store.video(q)) for q in queries]
            rep = evaluate_run(eps, model, store, thr, mode=name.split("_")[0], tag=name)
        except Exception as e:  # noqa: BLE001 - a failing cell must not stop the grid
            failures[name] = f"{type(e).__name__}: {e}"
            logger.warning("cell %s failed: %s", name, e)
            continue
        reports[name] = rep
    gap = None
    for k in cfg.eval.ks:
        if f"oracle_k{k}" in reports and f"random_k{k}" in reports:
            gap = reports[f"oracle_k{k}"].mAP - reports[f"random_k{k}"].mAP
            reports[f"oracle_k{k}"].oracle_random_gap = gap
            reports[f"random_k{k}"].oracle_random_gap = gap
    for name, rep in reports.items():
        (out / "reports" / f"{name}.json").write_text(rep.to_json(), encoding="utf-8")
    (out / "summary.txt").write_text(summary_table(reports, cfg.eval.semi_max), encoding="utf-8")
    (out / "failures.json").write_text(json.dumps(failures, indent=1, sort_keys=True), encoding="utf-8")
    return reports


def summary_table(reports: dict[str, EvalReport], semi_max: int = 5) -> str:
    lines = ["cell                          mAP     support-precision"]
    for name in sorted(reports):
        r = reports[name]
        sp = "-" if r.support_precision is None else f"{r.support_precision:.3f}"
        lines.append(f"{name:<28}  {r.mAP:.4f}  {sp}")
    lines.append("")
    lines.append("semi-shot grid (rows: # oracle, cols: # self-shot)")
    lines.append("      " + "".join(f"{s:>8}" for s in range(semi_max + 1)))
    for o in range(semi_max + 1):
        cells = []
        for s in range(semi_max + 1):
            r = reports.get(f"semi_o{o}_s{s}")
            if r is None and s == 0:
                r = reports.get(f"oracle_k{o}")
            cells.append(f"{r.mAP:8.4f}" if r is not None else " " * 8)
        lines.append(f"{o:>5} " + "".join(cells))
    return "\n".join(lines) + "\n"
