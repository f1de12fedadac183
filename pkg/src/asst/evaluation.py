"""Score prediction files against annotations without touching model code."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .heads import ClipWindow, enumerate_segments
from .io import AnnotationSet
from .metrics import (EvalReport, ScoredWindow, fuse_scores, mean_average_precision, miou, nms,
                      rank_at_k)

METRICS = ("rank1", "rank5", "miou", "map")
PairKey = tuple[str, int]


class UnknownVideoError(ValueError):
    pass


@dataclass
class GroundTruth:
    key: PairKey
    clips: list[ClipWindow]
    segment_index: int | None
    label: int


def ground_truths(ann: AnnotationSet, split: str | None = None) -> list[GroundTruth]:
    """Pairs of ``split``; ``None`` means test videos when any exist, else every video."""
    if split is None:
        split = "test" if any(v.split == "test" for v in ann.videos) else "all"
    out = []
    for v in sorted(ann.videos, key=lambda r: r.video_id):
        if split != "all" and v.split != split:
            continue
        for q, d in enumerate(v.descriptions):
            out.append(GroundTruth((v.video_id, q), list(d.clips), d.segment_index, d.label))
    return out


def group_predictions(preds: Iterable[tuple[int, ScoredWindow]], ann: AnnotationSet
                      ) -> dict[PairKey, list[ScoredWindow]]:
    known = ann.by_id()
    unknown = sorted({p.video_id for _, p in preds if p.video_id not in known})
    if unknown:
        raise UnknownVideoError(f"predictions reference unknown video_id(s): {', '.join(unknown)}")
    groups: dict[PairKey, list[ScoredWindow]] = {}
    for q, p in preds:
        if not 0 <= q < len(known[p.video_id].descriptions):
            raise UnknownVideoError(f"video {p.video_id} has no query {q}")
        groups.setdefault((p.video_id, q), []).append(p)
    return groups


def fuse_prediction_sets(sets: Sequence[list[tuple[int, ScoredWindow]]], weights: Sequence[float]
                         ) -> list[tuple[int, ScoredWindow]]:
    """Weighted sum of scores over prediction files that share one candidate set."""
    def key(item):
        q, p = item
        return (p.video_id, q, p.window.start, p.window.end, p.class_id)

    base = sorted(sets[0], key=key)
    keys = [key(it) for it in base]
    aligned = []
    for s in sets:
        srt = sorted(s, key=key)
        if [key(it) for it in srt] != keys:
            raise ValueError("fused prediction files must cover identical candidate windows")
        aligned.append([p.score for _, p in srt])
    fused = fuse_scores(aligned, weights)
    return [(q, ScoredWindow(p.window, float(f), p.class_id, p.video_id))
            for (q, p), f in zip(base, fused)]


def _ranked(preds: list[ScoredWindow], nms_thresh: float | None) -> list[ScoredWindow]:
    if nms_thresh is not None:
        preds = nms(preds, nms_thresh)
    return sorted(preds, key=lambda p: -p.score)


def _segment_ranking(preds: list[ScoredWindow], n_segments: int, seg_len: float) -> list[int]:
    """Map ranked windows onto segment indices, keeping first occurrences."""
    segs = enumerate_segments(n_segments, seg_len)
    starts = np.array([s.start for s in segs])
    ends = np.array([s.end for s in segs])
    seen, out = set(), []
    for p in preds:
        idx = int(np.argmin(np.abs(starts - p.window.start) + np.abs(ends - p.window.end)))
        if idx not in seen:
            seen.add(idx)
            out.append(idx)
    return out


def evaluate(preds: Sequence[tuple[int, ScoredWindow]], ann: AnnotationSet,
             metrics: Sequence[str] = METRICS, ious: Sequence[float] = (0.5,),
             nms_thresh: float | None = None, split: str | None = None,
             ap_mode: str = "every_point") -> EvalReport:
    """Rank@1/5, mIoU and mAP for every pair in ``split``.

    Classification annotations are ranked over segment indices; detection
    annotations use the IoU thresholds in ``ious`` (the first one feeds the
    unsuffixed keys).
    """
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ValueError(f"unknown metric(s) {bad}; choose from {list(METRICS)}")
    if not ious:
        raise ValueError("at least one IoU threshold is required")
    groups = group_predictions(preds, ann)
    gts = ground_truths(ann, split)
    if not gts:
        raise ValueError("no annotated pairs to evaluate")
    ranked = [_ranked(groups.get(g.key, []), nms_thresh) for g in gts]
    report = EvalReport()
    classification = ann.mode == "classification" and all(g.segment_index is not None for g in gts)

    for k, name in ((1, "rank1"), (5, "rank5")):
        if name not in metrics:
            continue
        if classification:
            segs = [_segment_ranking(r, ann.n_segments, ann.segment_length) for r in ranked]
            report.metrics[name] = rank_at_k(segs, [g.segment_index for g in gts], k)
        else:
            for j, t in enumerate(ious):
                val = rank_at_k(ranked, [g.clips for g in gts], k, t)
                report.metrics[f"{name}@{t:g}"] = val
                if j == 0:
                    report.metrics[name] = val
    if "miou" in metrics:
        scores = []
        for r, g in zip(ranked, gts):
            scores.append(max(miou([r[0]], [c]) for c in g.clips) if r and g.clips else 0.0)
        report.metrics["miou"] = float(np.mean(scores))
    if "map" in metrics:
        flat, gt_list = [], []
        for r, g in zip(ranked, gts):
            pid = f"{g.key[0]}#{g.key[1]}"
            flat += [ScoredWindow(p.window, p.score, g.label if p.class_id is None else p.class_id, pid)
                     for p in r]
            gt_list += [(pid, g.label, c) for c in g.clips]
        for j, t in enumerate(ious):
            mean, per_class = mean_average_precision(flat, gt_list, t, ap_mode)
            report.metrics[f"map@{t:g}"] = mean
            if j == 0:
                report.metrics["map"] = mean
                report.per_class_ap = per_class
    return report
