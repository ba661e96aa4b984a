"""Self-supervised clip embedder with an EMA teacher and a negative queue.

Crops of the same video are positives, crops of other videos (and queued
teacher embeddings of other videos) are negatives. Two objectives are
available: multiple-instance NCE and a smooth-rank loss.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .datagen import DatasetManifest, Video, clip_indices

logger = logging.getLogger(__name__)


class EmbedTrainingError(RuntimeError):
    pass


@dataclass
class EmbedConfig:
    loss: str = "rank"
    temperature: float = 0.07
    rank_temperature: float = 0.1
    ema_momentum: float = 0.99
    queue_size: int = 1280
    crops_per_video: int = 2
    videos_per_batch: int = 16
    crop_frames: int = 4
    crop_size: int = 64
    embed_dim: int = 128
    width: int = 32
    epochs: int = 5
    steps_per_epoch: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.05
    lr_decay_epoch: int = 3
    min_crop_scale: float = 0.6
    train_splits: list[str] = field(default_factory=lambda: ["pool"])

    def __post_init__(self):
        if self.temperature <= 0 or self.rank_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if not 0 <= self.ema_momentum <= 1:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if self.loss not in ("nce", "rank"):
            raise ValueError(f"unknown embedding loss {self.loss!r}")
        if self.crops_per_video < 2:
            raise ValueError("need at least two crops per video for positives")
        batch_negatives = (self.videos_per_batch - 1) * self.crops_per_video
        if self.queue_size and self.queue_size < batch_negatives:
            raise ValueError("queue capacity must cover the in-batch negatives")


# ---------------------------------------------------------------------------
# losses


def _check_unit(x: torch.Tensor, name: str) -> None:
    n = x.detach().norm(dim=-1)
    if not torch.allclose(n, torch.ones_like(n), atol=1e-4):
        raise ValueError(f"{name} embeddings must be unit-norm")


def nce_loss(anchor: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor, tau: float) -> torch.Tensor:
    """Multiple-instance NCE for one anchor against positive and negative sets."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if pos.shape[0] < 1 or neg.shape[0] < 1:
        raise ValueError("need at least one positive and one negative")
    _check_unit(anchor, "anchor")
    s_pos = pos @ anchor / tau
    s_all = torch.cat([s_pos, neg @ anchor / tau])
    return torch.logsumexp(s_all, 0) - torch.logsumexp(s_pos, 0)


def _cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.normalize(b, dim=-1) @ F.normalize(a, dim=-1)


def rank_R(a: torch.Tensor, b: torch.Tensor, C: torch.Tensor, temperature: float = 2.0,
           b_index: int | None = None) -> torch.Tensor:
    """Smooth rank of candidate ``b`` among the rows of ``C`` w.r.t. query ``a``.

    ``1 + sum_{c != b} sigmoid((cos(a, c) - cos(a, b)) / temperature)``. The row of
    ``C`` that is ``b`` is skipped, either given by ``b_index`` or by exact equality.
    """
    C = torch.atleast_2d(C)
    if b_index is None:
        keep = ~(C == b).all(dim=-1)
    else:
        keep = torch.ones(C.shape[0], dtype=torch.bool)
        keep[b_index] = False
    d = _cos(a, C[keep]) - _cos(a, b[None])[0]
    return 1 + torch.sigmoid(d / temperature).sum()


def rank_loss(anchor: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor,
              temperature: float = 2.0) -> torch.Tensor:
    """Sum over positives p of -log(R(a, p, {p}) / R(a, p, {p} u negatives))."""
    if pos.shape[0] < 1:
        raise ValueError("positive set is empty")
    if neg.shape[0] < 1:
        raise ValueError("negative set is empty")
    c_pos = _cos(anchor, pos)  # (P,)
    c_neg = _cos(anchor, neg)  # (N,)
    den = 1 + torch.sigmoid((c_neg[None, :] - c_pos[:, None]) / temperature).sum(1)
    return den.log().sum()


def batch_losses(student: torch.Tensor, keys: torch.Tensor, pos_mask: torch.Tensor, neg_mask: torch.Tensor,
                 cfg: EmbedConfig) -> torch.Tensor:
    """Mean per-anchor loss; ``keys`` rows are teacher embeddings, masks are (A, K)."""
    sims = student @ keys.T
    if cfg.loss == "nce":
        s = sims / cfg.temperature
        neg_inf = torch.finfo(s.dtype).min
        lse_pos = torch.logsumexp(s.masked_fill(~pos_mask, neg_inf), 1)
        lse_all = torch.logsumexp(s.masked_fill(~(pos_mask | neg_mask), neg_inf), 1)
        return (lse_all - lse_pos).mean()
    # rank: pairwise (anchor, positive, negative) sigmoid terms
    d = (sims[:, None, :] - sims[:, :, None]) / cfg.rank_temperature  # [a, p, n] = s_n - s_p
    terms = torch.sigmoid(d) * neg_mask[:, None, :]
    den = 1 + terms.sum(-1)
    return (den.log() * pos_mask).sum(1).mean()


# ---------------------------------------------------------------------------
# encoder


class VideoEncoder(nn.Module):
    """Four strided space-time conv blocks, global pooling, linear head."""

    def __init__(self, width: int = 32, embed_dim: int = 128):
        super().__init__()
        chans = [3, width // 2, width, 2 * width, 2 * width]
        strides = [(1, 2, 2), (2, 2, 2), (1, 2, 2), (2, 2, 2)]
        blocks = []
        for cin, cout, s in zip(chans[:-1], chans[1:], strides):
            blocks += [nn.Conv3d(cin, cout, 3, stride=s, padding=1), nn.GroupNorm(4, cout), nn.ReLU(inplace=True)]
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(chans[-1], embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, T, H, W) -> (B, embed_dim), unit-norm."""
        h = self.blocks(x).mean(dim=(2, 3, 4))
        return F.normalize(self.head(h), dim=-1)


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """(T, H, W, 3) uint8 -> (3, T, H, W) float, roughly zero-mean."""
    x = torch.from_numpy(np.ascontiguousarray(frames)).float().div_(255.0)
    return ((x - 0.5) / 0.25).permute(3, 0, 1, 2).contiguous()


def center_clip(video: Video, crop_frames: int, crop_size: int) -> torch.Tensor:
    if video.num_frames < 1:
        raise ValueError(f"{video.video_id}: empty clip")
    idx = clip_indices(video.num_frames, crop_frames, "center")
    x = frames_to_tensor(video.frames[idx])
    if x.shape[-1] != crop_size or x.shape[-2] != crop_size:
        x = F.interpolate(x, size=(crop_size, crop_size), mode="bilinear", align_corners=False)
    return x


def random_crop(video: Video, cfg: EmbedConfig, rng: np.random.Generator) -> torch.Tensor:
    idx = clip_indices(video.num_frames, cfg.crop_frames, "random", rng)
    x = frames_to_tensor(video.frames[idx])
    _, _, H, W = x.shape
    scale = rng.uniform(cfg.min_crop_scale, 1.0)
    ch, cw = max(4, int(round(H * math.sqrt(scale)))), max(4, int(round(W * math.sqrt(scale))))
    y0 = int(rng.integers(0, H - ch + 1))
    x0 = int(rng.integers(0, W - cw + 1))
    x = x[:, :, y0:y0 + ch, x0:x0 + cw]
    if rng.random() < 0.5:
        x = x.flip(-1)
    return F.interpolate(x, size=(cfg.crop_size, cfg.crop_size), mode="bilinear", align_corners=False)


@torch.no_grad()
def ema_update(student: nn.Module, teacher: nn.Module, m: float) -> nn.Module:
    """teacher <- m * teacher + (1 - m) * student, parameter by parameter."""
    sp = dict(student.named_parameters())
    tp = dict(teacher.named_parameters())
    if sp.keys() != tp.keys():
        raise ValueError("student and teacher parameter names differ")
    for k, t in tp.items():
        if t.shape != sp[k].shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(t.shape)} vs {tuple(sp[k].shape)}")
    for k, t in tp.items():
        t.copy_(m * t + (1 - m) * sp[k])
    return teacher


class NegativeQueue:
    """Fixed-capacity FIFO of unit-norm teacher embeddings tagged with video ids."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.dim = dim
        self.embeddings = torch.zeros(0, dim)
        self.ids: list[str] = []

    def __len__(self) -> int:
        return len(self.ids)

    def enqueue(self, emb: torch.Tensor, ids: Sequence[str]) -> None:
        if self.capacity <= 0:
            return
        emb = emb.detach()
        self.embeddings = torch.cat([self.embeddings, emb])[-self.capacity:]
        self.ids = (self.ids + list(ids))[-self.capacity:]


# ---------------------------------------------------------------------------
# embedder


class Embedder:
    """Student / teacher pair plus the preprocessing needed to embed a clip."""

    def __init__(self, cfg: EmbedConfig, seed: int = 0):
        self.cfg = cfg
        torch.manual_seed(seed)
        self.student = VideoEncoder(cfg.width, cfg.embed_dim)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self._fingerprint: str | None = None

    @property
    def arch(self) -> dict:
        return {"kind": "embedder", "encoder": "conv3d-4block", "width": self.cfg.width,
                "embed_dim": self.cfg.embed_dim, "crop_frames": self.cfg.crop_frames,
                "crop_size": self.cfg.crop_size}

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            self._fingerprint = checkpoint.fingerprint_bytes(self.to_bytes())
        return self._fingerprint

    def encode(self, clip: torch.Tensor, which: str = "student") -> torch.Tensor:
        """Unit-norm embedding(s) of ``(3, T, S, S)`` or ``(B, 3, T, S, S)`` clips."""
        net = self.student if which == "student" else self.teacher
        single = clip.dim() == 4
        if clip.numel() == 0:
            raise ValueError("empty clip")
        x = clip[None] if single else clip
        net.eval()
        with torch.no_grad():
            out = net(x)
        return out[0] if single else out

    def encode_video(self, video: Video) -> np.ndarray:
        clip = center_clip(video, self.cfg.crop_frames, self.cfg.crop_size)
        return self.encode(clip).numpy().astype(np.float32)

    __call__ = encode_video

    def to_bytes(self, extra: dict | None = None) -> bytes:
        tensors = checkpoint.state_dict_tensors(self.student, "student.")
        tensors.update(checkpoint.state_dict_tensors(self.teacher, "teacher."))
        desc = {"arch": self.arch, "config": asdict(self.cfg)}
        if extra:
            desc["extra"] = extra
        return checkpoint.dumps(tensors, desc)

    def save(self, path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return checkpoint.fingerprint_bytes(data)

    @classmethod
    def load(cls, path) -> "Embedder":
        data = Path(path).read_bytes()
        tensors, desc = checkpoint.loads(data)
        if desc.get("arch", {}).get("kind") != "embedder":
            raise checkpoint.CheckpointError(f"{path} is not an embedder checkpoint")
        emb = cls(EmbedConfig(**desc["config"]))
        checkpoint.load_state_dict(emb.student, tensors, "student.")
        checkpoint.load_state_dict(emb.teacher, tensors, "teacher.")
        emb._fingerprint = checkpoint.fingerprint_bytes(data)
        return emb


def _batch_masks(vid_idx: torch.Tensor, crop_idx: torch.Tensor, queue_ids: Sequence[str],
                 batch_ids: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
    same_video = vid_idx[:, None] == vid_idx[None, :]
    same_crop = crop_idx[:, None] == crop_idx[None, :]
    pos = same_video & ~same_crop
    neg = ~same_video
    if queue_ids:
        anchor_ids = [batch_ids[i] for i in vid_idx.tolist()]
        q_neg = torch.tensor([[a != q for q in queue_ids] for a in anchor_ids], dtype=torch.bool)
        pos = torch.cat([pos, torch.zeros_like(q_neg)], 1)
        neg = torch.cat([neg, q_neg], 1)
    return pos, neg


def _make_batch(videos: Sequence[Video], cfg: EmbedConfig, rng: np.random.Generator):
    crops, vid_idx, crop_idx = [], [], []
    for i, v in enumerate(videos):
        for p in range(cfg.crops_per_video):
            crops.append(random_crop(v, cfg, rng))
            vid_idx.append(i)
            crop_idx.append(p)
    return torch.stack(crops), torch.tensor(vid_idx), torch.tensor(crop_idx)


def step_loss(emb: Embedder, batch, batch_ids: Sequence[str], queue: NegativeQueue | None,
              train: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Loss for one batch; returns (loss, teacher embeddings of the batch)."""
    clips, vid_idx, crop_idx = batch
    emb.student.train(train)
    s = emb.student(clips)
    with torch.no_grad():
        t = emb.teacher(clips)
    q_ids = queue.ids if queue is not None else []
    keys = torch.cat([t, queue.embeddings]) if q_ids else t
    pos, neg = _batch_masks(vid_idx, crop_idx, q_ids, batch_ids)
    return batch_losses(s, keys, pos, neg, emb.cfg), t


def train_embedder(manifest: DatasetManifest, get_video: Callable[[str], Video], cfg: EmbedConfig,
                   seed: int, out_dir=None) -> tuple[Embedder, list[dict]]:
    """Train the student with AdamW, update the teacher by EMA, keep a FIFO queue.

    Writes ``embedder.ckpt`` and ``embed_log.jsonl`` into ``out_dir`` when given.
    """
    ids = manifest.ids(cfg.train_splits)
    if not ids:
        raise ValueError(f"no videos in splits {cfg.train_splits}")
    torch.manual_seed(seed)
    emb = Embedder(cfg, seed)
    videos = {i: get_video(i) for i in ids}
    opt = torch.optim.AdamW(emb.student.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    queue = NegativeQueue(cfg.queue_size, cfg.embed_dim)
    bsz = min(cfg.videos_per_batch, len(ids))
    steps_per_epoch = cfg.steps_per_epoch or max(1, len(ids) // bsz)

    probe_rng = np.random.default_rng([seed, 7])
    probe_ids = [ids[int(i)] for i in probe_rng.choice(len(ids), size=bsz, replace=False)]
    probe = _make_batch([videos[i] for i in probe_ids], cfg, probe_rng)

    def probe_loss() -> float:
        with torch.no_grad():
            return float(step_loss(emb, probe, probe_ids, None, train=False)[0])

    log: list[dict] = [{"step": 0, "probe_loss": probe_loss(), "kind": "probe"}]
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (0.1 if epoch >= cfg.lr_decay_epoch else 1.0)
        for g in opt.param_groups:
            g["lr"] = lr
        order = np.random.default_rng([seed, 1, epoch]).permutation(len(ids))
        for j in range(steps_per_epoch):
            rng = np.random.default_rng([seed, 2, step])
            pick = [ids[int(order[(j * bsz + b) % len(ids)])] for b in range(bsz)]
            batch = _make_batch([videos[i] for i in pick], cfg, rng)
            loss, t = step_loss(emb, batch, pick, queue)
            if not torch.isfinite(loss):
                raise EmbedTrainingError(f"non-finite embedding loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ema_update(emb.student, emb.teacher, cfg.ema_momentum)
            queue.enqueue(t, [pick[i] for i in batch[1].tolist()])
            step += 1
            log.append({"step": step, "loss": loss.item(), "lr": lr})
    log.append({"step": step, "probe_loss": probe_loss(), "kind": "probe"})
    emb._fingerprint = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        emb.save(out / "embedder.ckpt")
        with open(out / "embed_log.jsonl", "w", encoding="utf-8") as fh:
            for row in log:
                fh.write(json.dumps(row) + "\n")
    logger.info("embedder trained: %d steps, probe %.4f -> %.4f", step, log[0]["probe_loss"],
                log[-1]["probe_loss"])
    return emb, log
