"""Set-prediction matching and the training objective for instance sequences.

Boxes are normalised ``(cx, cy, w, h)``. All losses are differentiable torch
functions that work in float32 or float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

PROB_EPS = 1e-7


class MatchingError(ValueError):
    pass


@dataclass
class LossWeights:
    mask: float = 2.0
    iou: float = 2.0
    l1: float = 5.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_eps: float = 1.0

    def __post_init__(self):
        for name in ("mask", "iou", "l1"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def giou(box_a: torch.Tensor, box_b: torch.Tensor) -> torch.Tensor:
    """Generalised IoU of broadcastable ``(..., 4)`` cxcywh boxes.

    A zero-area enclosure returns the plain IoU (itself 0 for a zero union).
    """
    box_a = torch.as_tensor(box_a)
    box_b = torch.as_tensor(box_b, dtype=box_a.dtype)
    a, b = box_cxcywh_to_xyxy(box_a), box_cxcywh_to_xyxy(box_b)
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    ok_u = union > 0
    iou = torch.where(ok_u, inter / torch.where(ok_u, union, torch.ones_like(union)), torch.zeros_like(union))
    elt = torch.minimum(a[..., :2], b[..., :2])
    erb = torch.maximum(a[..., 2:], b[..., 2:])
    ewh = (erb - elt).clamp(min=0)
    enclosure = ewh[..., 0] * ewh[..., 1]
    ok_e = enclosure > 0
    safe_e = torch.where(ok_e, enclosure, torch.ones_like(enclosure))
    return torch.where(ok_e, iou - (enclosure - union) / safe_e, iou)


def box_loss(b_seq: torch.Tensor, b_hat_seq: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Frame-averaged ``lambda_iou * (1 - GIoU) + lambda_L1 * |b - b_hat|_1``.

    Broadcasts over leading dims; the frame axis is the second-to-last.
    """
    b_seq = torch.as_tensor(b_seq)
    b_hat_seq = torch.as_tensor(b_hat_seq)
    if b_seq.shape[-2] != b_hat_seq.shape[-2]:
        raise ValueError(f"sequence length mismatch: {b_seq.shape[-2]} vs {b_hat_seq.shape[-2]}")
    b_seq = b_seq.to(b_hat_seq.dtype)
    l_iou = 1 - giou(b_seq, b_hat_seq)
    l_1 = (b_seq - b_hat_seq).abs().sum(-1)
    return (weights.iou * l_iou + weights.l1 * l_1).mean(-1)


def dice_loss(mask_logits: torch.Tensor, gt_mask: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 - (2|p m| + eps) / (|p| + |m| + eps) over the last two (spatial) axes."""
    if mask_logits.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {tuple(mask_logits.shape)} vs {tuple(gt_mask.shape)}")
    p = mask_logits.sigmoid().flatten(-2)
    m = gt_mask.to(p.dtype).flatten(-2)
    return 1 - (2 * (p * m).sum(-1) + eps) / (p.sum(-1) + m.sum(-1) + eps)


def focal_loss(mask_logits: torch.Tensor, gt_mask: torch.Tensor, alpha: float = 0.25,
               gamma: float = 2.0) -> torch.Tensor:
    """Alpha-balanced sigmoid focal loss, mean over the last two (spatial) axes."""
    if mask_logits.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {tuple(mask_logits.shape)} vs {tuple(gt_mask.shape)}")
    m = gt_mask.to(mask_logits.dtype)
    p = mask_logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(mask_logits, m, reduction="none")
    p_t = p * m + (1 - p) * (1 - m)
    alpha_t = alpha * m + (1 - alpha) * (1 - m)
    return (alpha_t * (1 - p_t) ** gamma * ce).flatten(-2).mean(-1)


def mask_loss(seq: torch.Tensor, gt_seq: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Frame-averaged dice + focal for ``(..., T, H, W)`` logit sequences."""
    d = dice_loss(seq, gt_seq, weights.dice_eps)
    f = focal_loss(seq, gt_seq, weights.focal_alpha, weights.focal_gamma)
    return (d + f).mean(-1)


def match_cost(gt_boxes: torch.Tensor, fg_prob: torch.Tensor, pred_boxes: torch.Tensor,
               weights: LossWeights = LossWeights()) -> np.ndarray:
    """Square cost matrix (rows: gt padded with no-object rows, cols: prediction slots).

    Real rows cost ``-p_fg + box_loss``; no-object rows cost 0.
    """
    n = fg_prob.shape[0]
    n_gt = gt_boxes.shape[0]
    if n_gt > n:
        raise MatchingError(f"{n_gt} ground-truth instances exceed {n} prediction slots")
    if pred_boxes.shape[0] != n:
        raise ValueError("fg_prob and pred_boxes disagree on slot count")
    cost = np.zeros((n, n))
    if n_gt:
        with torch.no_grad():
            bl = box_loss(gt_boxes[:, None], pred_boxes[None, :], weights)  # (n_gt, n)
            c = -fg_prob.detach()[None, :] + bl
        cost[:n_gt] = c.double().cpu().numpy()
    return cost


def hungarian(cost) -> tuple[np.ndarray, float]:
    """Exact minimum-cost perfect matching of a square matrix.

    Shortest augmenting path with potentials, O(n^3). Returns ``sigma`` with
    row i assigned to column ``sigma[i]``, and the total cost.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise MatchingError(f"cost matrix must be square, got shape {C.shape}")
    if not np.isfinite(C).all():
        raise MatchingError("cost matrix has non-finite entries")
    n = C.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    sigma = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        sigma[p[j] - 1] = j - 1
    total = float(C[np.arange(n), sigma].sum())
    return sigma, total


def loss_components(gt_boxes: torch.Tensor, gt_masks: torch.Tensor, fg_prob: torch.Tensor,
                    pred_boxes: torch.Tensor, mask_logits: torch.Tensor, sigma,
                    weights: LossWeights = LossWeights()) -> dict[str, torch.Tensor]:
    """Class NLL, box and (unweighted) mask components of the training loss."""
    n = fg_prob.shape[0]
    n_gt = gt_boxes.shape[0]
    sigma = torch.as_tensor(np.asarray(sigma), dtype=torch.long)
    if sigma.shape[0] != n:
        raise MatchingError("assignment length must equal slot count")
    p = fg_prob.clamp(PROB_EPS, 1 - PROB_EPS)
    matched = sigma[:n_gt]
    is_fg = torch.zeros(n, dtype=torch.bool)
    is_fg[matched] = True
    cls = -(torch.where(is_fg, p.log(), (1 - p).log())).sum()
    zero = fg_prob.sum() * 0
    if n_gt:
        box = box_loss(gt_boxes.to(pred_boxes.dtype), pred_boxes[matched], weights).sum()
        msk = mask_loss(mask_logits[matched], gt_masks.to(mask_logits.dtype), weights).sum()
    else:
        box, msk = zero, zero
    return {"class": cls, "box": box, "mask": msk}


def training_loss(gt_boxes, gt_masks, fg_prob, pred_boxes, mask_logits, sigma,
                  weights: LossWeights = LossWeights(), return_components: bool = False):
    """Sum over slots of -log p(c) + box loss + lambda_mask * mask loss.

    Rows ``0..n_gt-1`` of ``sigma`` are real instances; the rest are no-object
    and add only ``-log p(background)``.
    """
    comp = loss_components(gt_boxes, gt_masks, fg_prob, pred_boxes, mask_logits, sigma, weights)
    total = comp["class"] + comp["box"] + weights.mask * comp["mask"]
    if return_components:
        return total, comp
    return total
