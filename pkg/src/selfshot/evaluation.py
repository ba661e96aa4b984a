"""Video IoU, average precision over instance mask sequences, and run reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

REPORT_SCHEMA = "selfshot-eval-report/1"
SCORE_FLOOR = 0.05
INSTANCE_BUCKETS = ("1", "2", "3", "4", ">=5")
CLASS_BUCKETS = ("1", "2", "3", ">=4")


def video_iou(mask_seq_a: np.ndarray, mask_seq_b: np.ndarray) -> float:
    """Intersection over union pooled over all frames; two empty sequences give 1."""
    a = np.asarray(mask_seq_a, dtype=bool)
    b = np.asarray(mask_seq_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask sequence shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            out[i, j] = video_iou(p, g)
    return out


def match_predictions(scores: Sequence[float], ious: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy matching in score order; returns a TP flag per prediction (score-sorted)."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    n_gt = ious.shape[1] if ious.ndim == 2 else 0
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        if n_gt == 0:
            break
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh and not taken[j]:
            taken[j] = True
            tp[rank] = True
    return tp


def average_precision(scores: Sequence[float], pred_masks: Sequence[np.ndarray],
                      gt_masks: Sequence[np.ndarray], iou_thresh: float = 0.5) -> float:
    """All-point area under the precision/recall curve for one query video."""
    n_gt = len(gt_masks)
    if len(scores) == 0:
        return 1.0 if n_gt == 0 else 0.0
    if n_gt == 0:
        return 0.0
    tp = match_predictions(scores, iou_matrix(pred_masks, gt_masks), iou_thresh)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    return float(precision[tp].sum() / n_gt)


def precision_recall(scores, pred_masks, gt_masks, iou_thresh: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    n_gt = max(len(gt_masks), 1)
    tp = match_predictions(scores, iou_matrix(pred_masks, gt_masks), iou_thresh)
    ctp = np.cumsum(tp)
    return ctp / np.arange(1, len(tp) + 1), ctp / n_gt


def instance_bucket(n: int) -> str:
    return str(n) if n < 5 else ">=5"


def class_bucket(n: int) -> str:
    return str(n) if n < 4 else ">=4"


@dataclass
class EpisodeResult:
    query_id: str
    ap: float
    num_instances: int
    num_classes: int
    support_ids: list[str]
    support_precision: float | None = None
    dropped_low_score: int = 0
    scores: list[float] = field(default_factory=list)  # kept predictions, descending
    tp: list[bool] = field(default_factory=list)


@dataclass
class EvalReport:
    iou_thresh: float
    mode: str
    episodes: list[EpisodeResult] = field(default_factory=list)
    score_floor: float = SCORE_FLOOR
    oracle_random_gap: float | None = None
    tag: str = ""

    @property
    def mAP(self) -> float:
        if not self.episodes:
            return 0.0
        return float(np.mean([e.ap for e in self.episodes]))

    def _breakdown(self, key, buckets) -> dict[str, float | None]:
        out = {}
        for b in buckets:
            aps = [e.ap for e in self.episodes if key(e) == b]
            out[b] = float(np.mean(aps)) if aps else None
        return out

    @property
    def by_instances(self):
        return self._breakdown(lambda e: instance_bucket(e.num_instances), INSTANCE_BUCKETS)

    @property
    def by_classes(self):
        return self._breakdown(lambda e: class_bucket(e.num_classes), CLASS_BUCKETS)

    @property
    def support_precision(self) -> float | None:
        vals = [e.support_precision for e in self.episodes if e.support_precision is not None]
        return float(np.mean(vals)) if vals else None

    def pr_curve(self) -> tuple[np.ndarray, np.ndarray]:
        """Precision and recall over all episodes' predictions pooled by score."""
        scores = np.concatenate([np.asarray(e.scores, dtype=np.float64) for e in self.episodes] + [np.zeros(0)])
        tp = np.concatenate([np.asarray(e.tp, dtype=bool) for e in self.episodes] + [np.zeros(0, bool)])
        n_gt = max(sum(e.num_instances for e in self.episodes), 1)
        order = np.argsort(-scores, kind="stable")
        ctp = np.cumsum(tp[order])
        return ctp / np.arange(1, len(order) + 1), ctp / n_gt

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "tag": self.tag,
            "mode": self.mode,
            "iou_thresh": self.iou_thresh,
            "score_floor": self.score_floor,
            "mAP": self.mAP,
            "by_instances": self.by_instances,
            "by_classes": self.by_classes,
            "support_precision": self.support_precision,
            "oracle_random_gap": self.oracle_random_gap,
            "dropped_low_score": int(sum(e.dropped_low_score for e in self.episodes)),
            "episodes": [asdict(e) for e in self.episodes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(iou_thresh=d["iou_thresh"], mode=d["mode"],
                   episodes=[EpisodeResult(**e) for e in d["episodes"]],
                   score_floor=d["score_floor"], oracle_random_gap=d.get("oracle_random_gap"),
                   tag=d.get("tag", ""))
