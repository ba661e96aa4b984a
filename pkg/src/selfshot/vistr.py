"""Query-support video instance segmentation transformer.

Token sequences are kept token-major, ``(L, d)`` with ``L = T * h * w`` in
(t, y, x) raster order. Everything runs on one episode at a time.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint


@dataclass
class VisConfig:
    d: int = 96
    enc_layers: int = 3
    fuse_layers: int = 2
    dec_layers: int = 3
    heads: int = 4
    n_slots: int = 5
    num_frames: int = 8
    support_frames: int = 8
    height: int = 64
    width: int = 64
    backbone_strides: list[int] = field(default_factory=lambda: [2, 2, 2])
    backbone_channels: list[int] = field(default_factory=lambda: [32, 64, 96])
    ffn_dim: int = 192
    mask_channels: int = 16
    mask_upsample: int = 2
    mask_attn_heads: int = 1
    dropout: float = 0.0
    use_pe: bool = True
    fuser_init: str = "similarity"

    def __post_init__(self):
        if self.d % 6:
            raise ValueError(f"model width d={self.d} must be divisible by 6")
        if self.d % self.heads or self.d % self.mask_attn_heads:
            raise ValueError("model width must be divisible by the head counts")
        if len(self.backbone_strides) != len(self.backbone_channels):
            raise ValueError("backbone_strides and backbone_channels must have equal length")
        if self.fuser_init not in ("similarity", "default"):
            raise ValueError(f"unknown fuser_init {self.fuser_init!r}")

    @property
    def stride(self) -> int:
        return int(np.prod(self.backbone_strides))

    @property
    def token_hw(self) -> tuple[int, int]:
        return self.height // self.stride, self.width // self.stride

    @property
    def mask_hw(self) -> tuple[int, int]:
        h, w = self.token_hw
        return h * self.mask_upsample, w * self.mask_upsample

    @classmethod
    def paper_scale(cls) -> "VisConfig":
        return cls(d=288, enc_layers=6, fuse_layers=3, dec_layers=6, heads=8, n_slots=10, num_frames=32,
                   support_frames=24, height=280, width=320, backbone_strides=[2, 2, 2],
                   backbone_channels=[64, 128, 256], ffn_dim=2048, mask_channels=8)


@dataclass
class Predictions:
    fg_prob: torch.Tensor      # (n,)
    boxes: torch.Tensor        # (n, T, 4) cxcywh in [0, 1]
    mask_logits: torch.Tensor  # (n, T, H0, W0)
    frame_fg: torch.Tensor     # (n, T)

    @property
    def n(self) -> int:
        return int(self.fg_prob.shape[0])

    def mask_sequence(self, i: int) -> torch.Tensor:
        """Slot ``i`` as a ``1 x 1 x T x H0 x W0`` logit volume."""
        return self.mask_logits[i][None, None]


# ---------------------------------------------------------------------------
# positional encoding


def positional_encoding(T: int, H: int, W: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal encoding of (t, x, y), d/3 channels per axis, sin/cos interleaved.

    Returns ``(T * H * W, d)`` in (t, y, x) raster order; channel blocks are
    [t | x | y].
    """
    if d % 6:
        raise ValueError(f"d={d} must be divisible by 6")
    per_axis = d // 3
    m = per_axis // 2
    freqs = 1.0 / (10000.0 ** (torch.arange(m, dtype=torch.float64) / m))

    def axis(pos: torch.Tensor) -> torch.Tensor:
        ang = pos.double()[:, None] * freqs[None]
        out = torch.zeros(len(pos), per_axis, dtype=torch.float64)
        out[:, 0::2] = torch.sin(ang)
        out[:, 1::2] = torch.cos(ang)
        return out

    t, y, x = token_coords(T, H, W).unbind(1)
    return torch.cat([axis(t), axis(x), axis(y)], dim=1).to(dtype)


def token_coords(T: int, H: int, W: int) -> torch.Tensor:
    """(L, 3) integer (t, y, x) coordinates of each token."""
    t, y, x = torch.meshgrid(torch.arange(T), torch.arange(H), torch.arange(W), indexing="ij")
    return torch.stack([t.flatten(), y.flatten(), x.flatten()], dim=1)


# ---------------------------------------------------------------------------
# building blocks


class FFN(nn.Module):
    def __init__(self, d: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, hidden), nn.ReLU(inplace=True), nn.Dropout(dropout),
                                 nn.Linear(hidden, d))

    def forward(self, x):
        return self.net(x)


def _mha(d, heads, dropout):
    return nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)


def _attend(mha: nn.MultiheadAttention, q, k, v):
    return mha(q[None], k[None], v[None], need_weights=False)[0][0]


class EncoderLayer(nn.Module):
    def __init__(self, cfg: VisConfig):
        super().__init__()
        self.attn = _mha(cfg.d, cfg.heads, cfg.dropout)
        self.ffn = FFN(cfg.d, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d)
        self.norm2 = nn.LayerNorm(cfg.d)

    def forward(self, x, pos):
        qk = x if pos is None else x + pos
        x = self.norm1(x + _attend(self.attn, qk, qk, x))
        return self.norm2(x + self.ffn(x))


def _similarity_init(mha: nn.MultiheadAttention, head_dim: int, logit_scale: float = 8.0) -> None:
    """Start with W_q = W_k = a*I so a token attends most to keys resembling it.

    With unit-variance features a self-match gets a logit of about ``logit_scale``;
    under the default init support attention is near uniform and the match signal
    is too weak to be picked up by gradient descent.
    """
    d = mha.embed_dim
    a = math.sqrt(logit_scale / math.sqrt(head_dim))
    with torch.no_grad():
        eye = torch.eye(d) * a
        mha.in_proj_weight[:d].copy_(eye)
        mha.in_proj_weight[d:2 * d].copy_(eye)


class FuserLayer(nn.Module):
    """Cross-enhance both branches, fold support into query, residual FFN; post-norm."""

    def __init__(self, cfg: VisConfig):
        super().__init__()
        self.q_from_s = _mha(cfg.d, cfg.heads, cfg.dropout)
        self.s_from_q = _mha(cfg.d, cfg.heads, cfg.dropout)
        self.fuse = _mha(cfg.d, cfg.heads, cfg.dropout)
        self.ffn = FFN(cfg.d, cfg.ffn_dim, cfg.dropout)
        self.norm_q = nn.LayerNorm(cfg.d)
        self.norm_s = nn.LayerNorm(cfg.d)
        self.norm_f = nn.LayerNorm(cfg.d)
        self.norm_out = nn.LayerNorm(cfg.d)
        if cfg.fuser_init == "similarity":
            for mha in (self.q_from_s, self.s_from_q, self.fuse):
                _similarity_init(mha, cfg.d // cfg.heads)

    def forward(self, e_q, e_s):
        f_qs = self.norm_q(e_q + _attend(self.q_from_s, e_q, e_s, e_s))
        f_sq = self.norm_s(e_s + _attend(self.s_from_q, e_s, e_q, e_q))
        f_tilde = self.norm_f(f_qs + _attend(self.fuse, f_qs, f_sq, f_sq))
        return self.norm_out(f_tilde + self.ffn(f_tilde)), f_sq


class DecoderLayer(nn.Module):
    def __init__(self, cfg: VisConfig):
        super().__init__()
        self.self_attn = _mha(cfg.d, cfg.heads, cfg.dropout)
        self.cross_attn = _mha(cfg.d, cfg.heads, cfg.dropout)
        self.ffn = FFN(cfg.d, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d)
        self.norm2 = nn.LayerNorm(cfg.d)
        self.norm3 = nn.LayerNorm(cfg.d)

    def forward(self, x, query_pos, memory, mem_pos):
        qk = x + query_pos
        x = self.norm1(x + _attend(self.self_attn, qk, qk, x))
        key = memory if mem_pos is None else memory + mem_pos
        x = self.norm2(x + _attend(self.cross_attn, x + query_pos, key, memory))
        return self.norm3(x + self.ffn(x))


class Backbone(nn.Module):
    """Strided 2-D conv stack followed by a 1x1 projection to the model width."""

    def __init__(self, cfg: VisConfig):
        super().__init__()
        layers, cin = [], 3
        for s, c in zip(cfg.backbone_strides, cfg.backbone_channels):
            layers += [nn.Conv2d(cin, c, 3, stride=s, padding=1), nn.GroupNorm(min(8, c), c), nn.ReLU(inplace=True)]
            cin = c
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(cin, cfg.d, 1)

    def forward(self, x):
        return self.proj(self.body(x))


class MLP(nn.Module):
    def __init__(self, d_in, hidden, d_out, layers):
        super().__init__()
        dims = [d_in] + [hidden] * (layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


# ---------------------------------------------------------------------------
# model


class SelfShotVisTR(nn.Module):
    def __init__(self, cfg: VisConfig):
        super().__init__()
        self.cfg = cfg
        d, a = cfg.d, cfg.mask_channels
        self.backbone = Backbone(cfg)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.fuser = nn.ModuleList(FuserLayer(cfg) for _ in range(cfg.fuse_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.instance_embed = nn.Embedding(cfg.n_slots * cfg.num_frames, d)
        self.class_head = nn.Linear(d, 2)
        self.box_head = MLP(d, d, 4, 3)
        # segmenter
        self.map_q = nn.Linear(d, d)
        self.map_k = nn.Linear(d, d)
        # one 3x3 conv over [attention maps | E_q | F], split by input group
        self.seg_conv_maps = nn.Conv2d(cfg.mask_attn_heads, a, 3, padding=1, bias=False)
        self.seg_conv_feats = nn.Conv2d(2 * d, a, 3, padding=1)
        self.seg_norm = nn.GroupNorm(min(4, a), a)
        self.seg3d = nn.Sequential(
            nn.Conv3d(a, a, 3, padding=1), nn.GroupNorm(min(4, a), a), nn.ReLU(inplace=True),
            nn.Conv3d(a, a, 3, padding=1), nn.GroupNorm(min(4, a), a), nn.ReLU(inplace=True),
            nn.Conv3d(a, 1, 1),
        )

    # -- stage 0 -------------------------------------------------------------
    def extract_features(self, frames: torch.Tensor) -> torch.Tensor:
        """(T, 3, H, W) -> (T, d, h, w); the same weights serve query and supports."""
        f = self.backbone(frames)
        if not torch.isfinite(f).all():
            raise FloatingPointError("non-finite backbone activations")
        return f

    @staticmethod
    def flatten(feat: torch.Tensor) -> torch.Tensor:
        """(T, d, h, w) -> (T*h*w, d) in (t, y, x) order."""
        return feat.permute(0, 2, 3, 1).reshape(-1, feat.shape[1])

    def pe(self, T: int, like: torch.Tensor) -> torch.Tensor | None:
        if not self.cfg.use_pe:
            return None
        h, w = self.cfg.token_hw
        return positional_encoding(T, h, w, self.cfg.d, dtype=like.dtype)

    # -- stage 1 -------------------------------------------------------------
    def encode_st(self, tokens: torch.Tensor, pos: torch.Tensor | None) -> torch.Tensor:
        if pos is not None and pos.shape != tokens.shape:
            raise ValueError(f"positional encoding {tuple(pos.shape)} does not match tokens {tuple(tokens.shape)}")
        x = tokens
        for layer in self.encoder:
            x = layer(x, pos)
        return x

    # -- stage 2 -------------------------------------------------------------
    def fuse(self, e_q: torch.Tensor, e_s: torch.Tensor) -> torch.Tensor:
        if e_q.shape[-1] != e_s.shape[-1]:
            raise ValueError(f"width mismatch: {e_q.shape[-1]} vs {e_s.shape[-1]}")
        f, s = e_q, e_s
        for layer in self.fuser:
            f, s = layer(f, s)
        return f

    # -- stage 3 -------------------------------------------------------------
    def decode(self, fused: torch.Tensor, instance_embeddings: torch.Tensor | None = None,
               mem_pos: torch.Tensor | None = None) -> torch.Tensor:
        """N = n*T instance features; column j is slot j // T, frame j % T."""
        qpos = self.instance_embed.weight if instance_embeddings is None else instance_embeddings
        N = self.cfg.n_slots * self.cfg.num_frames
        if qpos.shape[0] != N:
            raise ValueError(f"expected {N} instance embeddings (n={self.cfg.n_slots}, T={self.cfg.num_frames}),"
                             f" got {qpos.shape[0]}")
        x = torch.zeros_like(qpos)
        for layer in self.decoder:
            x = layer(x, qpos, fused, mem_pos)
        return x

    def attention_maps(self, inst: torch.Tensor, fused: torch.Tensor, pos: torch.Tensor | None) -> torch.Tensor:
        """Per (slot, frame) softmax attention over that frame's tokens: (n, T, heads, h, w)."""
        cfg = self.cfg
        n, T, hm = cfg.n_slots, cfg.num_frames, cfg.mask_attn_heads
        h, w = cfg.token_hw
        hd = cfg.d // hm
        key = fused if pos is None else fused + pos
        q = self.map_q(inst).view(n, T, hm, hd)
        k = self.map_k(key).view(T, h * w, hm, hd)
        logits = torch.einsum("nthc,tphc->nthp", q, k) / math.sqrt(hd)
        return logits.softmax(-1).view(n, T, hm, h, w)

    def segment(self, inst: torch.Tensor, fused: torch.Tensor, e_q: torch.Tensor,
                pos: torch.Tensor | None = None) -> Predictions:
        cfg = self.cfg
        n, T, a = cfg.n_slots, cfg.num_frames, cfg.mask_channels
        h, w = cfg.token_hw
        maps = self.attention_maps(inst, fused, pos)
        grid = lambda x: x.view(T, h, w, -1).permute(0, 3, 1, 2)  # noqa: E731
        feats = self.seg_conv_feats(torch.cat([grid(e_q), grid(fused)], 1))       # (T, a, h, w)
        mfeat = self.seg_conv_maps(maps.reshape(n * T, -1, h, w)).view(n, T, a, h, w)
        g = F.relu(self.seg_norm((mfeat + feats[None]).reshape(n * T, a, h, w)))
        if cfg.mask_upsample != 1:
            g = F.interpolate(g, scale_factor=cfg.mask_upsample, mode="bilinear", align_corners=False)
        H0, W0 = g.shape[-2:]
        G = g.view(n, T, a, H0, W0).transpose(1, 2)                                # (n, a, T, H0, W0)
        mask_logits = self.seg3d(G)[:, 0]                                          # (n, T, H0, W0)
        inst = inst.view(n, T, -1)
        frame_fg = self.class_head(inst).softmax(-1)[..., 1]
        boxes = self.box_head(inst).sigmoid()
        return Predictions(fg_prob=frame_fg.mean(1), boxes=boxes, mask_logits=mask_logits, frame_fg=frame_fg)

    # -- composition -----------------------------------------------------------
    def encode_supports(self, supports: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(supports) == 0:
            raise ValueError("at least one support clip is required")
        feats = self.extract_features(torch.cat(list(supports)))
        tokens, pos = [], []
        start = 0
        for s in supports:
            f = feats[start:start + s.shape[0]]
            start += s.shape[0]
            tokens.append(self.flatten(f))
            p = self.pe(s.shape[0], f)
            if p is not None:
                pos.append(p)
        tokens = torch.cat(tokens)
        return self.encode_st(tokens, torch.cat(pos) if pos else None)

    def forward(self, query: torch.Tensor, supports: Sequence[torch.Tensor], return_aux: bool = False):
        """query (T, 3, H, W); supports: list of (T_s, 3, H, W) clips, each with its own frame index."""
        if query.shape[0] != self.cfg.num_frames:
            raise ValueError(f"query has {query.shape[0]} frames, model expects {self.cfg.num_frames}")
        fq = self.extract_features(query)
        q_tokens = self.flatten(fq)
        pos = self.pe(query.shape[0], q_tokens)
        e_q = self.encode_st(q_tokens, pos)
        e_s = self.encode_supports(supports)
        fused = self.fuse(e_q, e_s)
        inst = self.decode(fused, mem_pos=pos)
        pred = self.segment(inst, fused, e_q, pos)
        if return_aux:
            return pred, {"e_q": e_q, "fused": fused, "inst": inst, "pos": pos}
        return pred

    @torch.no_grad()
    def heatmaps(self, query: torch.Tensor, supports: Sequence[torch.Tensor]) -> tuple[np.ndarray, np.ndarray]:
        """Top slot's attention over query tokens, computed against E_q (before fusing) and F (after)."""
        pred, aux = self(query, supports, return_aux=True)
        top = int(pred.fg_prob.argmax())
        before = self.attention_maps(aux["inst"], aux["e_q"], aux["pos"])[top].mean(1)
        after = self.attention_maps(aux["inst"], aux["fused"], aux["pos"])[top].mean(1)
        return before.numpy(), after.numpy()

    # -- persistence -----------------------------------------------------------
    def param_groups(self, lr: float, lr_backbone: float, weight_decay: float = 1e-4) -> list[dict]:
        bb = [p for n, p in self.named_parameters() if n.startswith("backbone.")]
        rest = [p for n, p in self.named_parameters() if not n.startswith("backbone.")]
        return [{"params": rest, "lr": lr, "name": "transformer", "weight_decay": weight_decay},
                {"params": bb, "lr": lr_backbone, "name": "backbone", "weight_decay": weight_decay}]

    def descriptor(self) -> dict:
        return {"kind": "vis", "arch": "selfshot-vistr", "config": asdict(self.cfg)}

    def to_bytes(self, extra_tensors: dict | None = None, extra: dict | None = None) -> bytes:
        tensors = checkpoint.state_dict_tensors(self, "model.")
        if extra_tensors:
            tensors.update(extra_tensors)
        desc = self.descriptor()
        if extra:
            desc["extra"] = extra
        return checkpoint.dumps(tensors, desc)

    @classmethod
    def from_bytes(cls, data: bytes):
        tensors, desc = checkpoint.loads(data)
        if desc.get("kind") != "vis":
            raise checkpoint.CheckpointError("not a VIS model checkpoint")
        model = cls(VisConfig(**desc["config"]))
        checkpoint.load_state_dict(model, tensors, "model.")
        return model, tensors, desc

    @classmethod
    def load(cls, path) -> "SelfShotVisTR":
        return cls.from_bytes(Path(path).read_bytes())[0]


# ---------------------------------------------------------------------------
# input preparation


def clip_tensor(frames: np.ndarray, height: int, width: int) -> torch.Tensor:
    """(T, H, W, 3) uint8 -> (T, 3, height, width) normalised float."""
    x = torch.from_numpy(np.ascontiguousarray(frames)).float().div_(255.0)
    x = ((x - 0.5) / 0.25).permute(0, 3, 1, 2).contiguous()
    if x.shape[-2:] != (height, width):
        x = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)
    return x
