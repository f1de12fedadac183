"""Temporal IoU, NMS, Rank@k, mIoU, average precision, sliding inference, fusion."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .autograd import ContractError
from .heads import ClipWindow


@dataclass
class ScoredWindow:
    window: ClipWindow
    score: float
    class_id: int | None = None
    video_id: str = ""

    def to_dict(self) -> dict:
        return {"video_id": self.video_id, "window": self.window.as_list(),
                "score": self.score, "class_id": self.class_id}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScoredWindow":
        s, e = d["window"]
        return cls(ClipWindow(float(s), float(e)), float(d["score"]),
                   d.get("class_id"), str(d.get("video_id", "")))


def iou(a: ClipWindow, b: ClipWindow) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union if union > 0 else 0.0


def _priority(w: ScoredWindow):
    return (-w.score, w.window.start, -w.window.length)


def nms(windows: Sequence[ScoredWindow], thresh: float) -> list[ScoredWindow]:
    """Greedy suppression of same-class windows overlapping a kept one by IoU > thresh."""
    if not 0.0 <= thresh <= 1.0:
        raise ValueError("NMS threshold must lie in [0, 1]")
    order = sorted(windows, key=_priority)
    kept: list[ScoredWindow] = []
    for cand in order:
        if all(k.class_id != cand.class_id or k.video_id != cand.video_id
               or iou(k.window, cand.window) <= thresh for k in kept):
            kept.append(cand)
    return kept


def rank_at_k(ranked: Sequence[Sequence], gts: Sequence, k: int,
              iou_thresh: float | None = None) -> float:
    """Fraction of pairs hit within the top ``k``.

    Without ``iou_thresh`` each ranked entry is a segment index and each gt an
    index.  With it, entries are windows and a gt is a window or a list of
    windows; a hit needs IoU >= ``iou_thresh`` with any of them.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ranked) != len(gts):
        raise ContractError("ranked predictions and ground truths differ in length")
    if not ranked:
        return 0.0
    hits = 0
    for preds, gt in zip(ranked, gts):
        top = list(preds)[:k]
        if iou_thresh is None:
            hits += int(gt in top)
        else:
            gt_list = [gt] if isinstance(gt, ClipWindow) else list(gt)
            hits += int(any(iou(_win(p), g) >= iou_thresh for p in top for g in gt_list))
    return hits / len(ranked)


def _win(p) -> ClipWindow:
    return p.window if isinstance(p, ScoredWindow) else p


def miou(top1: Sequence, gts: Sequence[ClipWindow]) -> float:
    if len(top1) != len(gts):
        raise ContractError("one top-1 window per pair is required")
    if not gts:
        return 0.0
    return float(np.mean([iou(_win(p), g) for p, g in zip(top1, gts)]))


def match_detections(preds: Sequence[ScoredWindow], gts: Mapping[Hashable, Sequence[ClipWindow]],
                     iou_thresh: float) -> np.ndarray:
    """TP flags for ``preds`` in descending-score order (stable for ties)."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    used = {vid: np.zeros(len(ws), bool) for vid, ws in gts.items()}
    tp = np.zeros(len(preds), bool)
    for rank, i in enumerate(order):
        p = preds[i]
        cands = gts.get(p.video_id, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(cands):
            if used[p.video_id][j]:
                continue
            ov = iou(p.window, g)
            if ov > best:
                best, best_j = ov, j
        if best_j >= 0 and best >= iou_thresh:
            used[p.video_id][best_j] = True
            tp[rank] = True
    return tp


def ap_from_flags(tp: np.ndarray, n_gt: int, mode: str = "every_point") -> float:
    if n_gt == 0:
        raise ContractError("AP is undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    if mode == "11point":
        return float(np.mean([precision[recall >= r].max() if np.any(recall >= r) else 0.0
                              for r in np.linspace(0, 1, 11)]))
    # recall rises by 1/n_gt exactly at true positives; summing the envelope
    # as rationals keeps fixtures such as 5/6 exact (at most n_gt terms)
    best = np.empty(tp.size, dtype=int)
    best[-1] = tp.size - 1
    for k in range(tp.size - 2, -1, -1):
        j = best[k + 1]
        best[k] = k if ctp[k] * (j + 1) >= ctp[j] * (k + 1) else j
    total = sum(Fraction(int(ctp[best[k]]), int(best[k]) + 1) for k in np.flatnonzero(tp))
    return float(total / n_gt)


def average_precision(preds: Sequence[ScoredWindow], gts: Mapping[Hashable, Sequence[ClipWindow]],
                      iou_thresh: float = 0.5, mode: str = "every_point") -> float:
    """Every-point interpolated AP for one class (``mode='11point'`` for VOC-2007 style)."""
    n_gt = sum(len(v) for v in gts.values())
    return ap_from_flags(match_detections(preds, gts, iou_thresh), n_gt, mode)


def mean_average_precision(preds: Sequence[ScoredWindow],
                           gts: Sequence[tuple[str, int | None, ClipWindow]],
                           iou_thresh: float = 0.5, mode: str = "every_point"
                           ) -> tuple[float, dict]:
    """Unweighted mean of per-class AP over classes that have ground truth."""
    by_class_gt: dict = defaultdict(lambda: defaultdict(list))
    for vid, cls, win in gts:
        by_class_gt[cls][vid].append(win)
    by_class_pred: dict = defaultdict(list)
    for p in preds:
        by_class_pred[p.class_id].append(p)
    per_class = {}
    for cls in sorted(by_class_gt, key=lambda c: (c is None, c)):
        per_class[cls] = average_precision(by_class_pred.get(cls, []), by_class_gt[cls],
                                           iou_thresh, mode)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return mean, per_class


def fuse_scores(score_lists: Sequence[Sequence[float]], weights: Sequence[float]) -> np.ndarray:
    if len(score_lists) != len(weights):
        raise ContractError("one weight per score list is required")
    arrs = [np.asarray(s, dtype=np.float64) for s in score_lists]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ContractError("score lists must have equal length")
    return sum(w * a for w, a in zip(weights, arrs))


def resample_frames(features: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Linear interpolation of rows at fractional coordinates; outside rows read zero."""
    m = features.shape[0]
    out = np.zeros((len(coords), features.shape[1]))
    inside = (coords >= -1e-9) & (coords <= m - 1 + 1e-9)
    c = np.clip(coords[inside], 0, m - 1)
    lo = np.floor(c).astype(int)
    hi = np.minimum(lo + 1, m - 1)
    frac = (c - lo)[:, None]
    out[inside] = (1 - frac) * features[lo] + frac * features[hi]
    return out


def window_offsets(duration: float, window: float, stride: float) -> list[float]:
    if duration <= window:
        return [(duration - window) / 2.0]
    if stride <= 0:
        raise ValueError("stride must be positive")
    offsets = []
    o = 0.0
    while o + window < duration - 1e-9:
        offsets.append(o)
        o += stride
    offsets.append(duration - window)
    return offsets


def crop_window(features: np.ndarray, duration: float, offset: float, window_frames: int,
                window_seconds: float) -> np.ndarray:
    """Resample the video at the model's frame spacing starting at ``offset`` seconds."""
    m = features.shape[0]
    t = offset + np.arange(window_frames) * (window_seconds / max(window_frames - 1, 1))
    coords = t * ((m - 1) / duration) if m > 1 else np.zeros(window_frames)
    return resample_frames(features, coords)


def sliding_inference(predict: Callable[[np.ndarray], list[ScoredWindow]], features: np.ndarray,
                      duration: float, window_frames: int, window_seconds: float,
                      stride: float | None = None, nms_thresh: float = 0.8) -> list[ScoredWindow]:
    """Run ``predict`` on model-sized crops and merge into video time.

    ``predict`` maps ``(window_frames, d_v)`` features to windows in local
    time ``[0, window_seconds]``.
    """
    stride = window_seconds / 2 if not stride else stride
    merged: list[ScoredWindow] = []
    for off in window_offsets(duration, window_seconds, stride):
        crop = crop_window(features, duration, off, window_frames, window_seconds)
        for p in predict(crop):
            w = p.window.shift(off).clip(duration)
            if w.length <= 0:
                continue
            merged.append(ScoredWindow(w, p.score, p.class_id, p.video_id))
    return nms(merged, nms_thresh)


@dataclass
class EvalReport:
    metrics: dict[str, float] = field(default_factory=dict)
    per_class_ap: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = dict(self.metrics)
        out["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return out
