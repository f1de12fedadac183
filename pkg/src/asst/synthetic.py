"""Planted-signal benchmark: noise videos with a query-named pattern in one window.

Each pattern owns an orthogonal signature vector.  Frames whose
(aligned-corner) timestamp falls inside the target window receive the
signature scaled by ``amplitude``.  The query is the single token
``pattern_<p>``, optionally mixed with filler tokens.  Distractor mode plants
further patterns in disjoint windows of the same video, each with its own
description.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SynthConfig
from .heads import ClipWindow, enumerate_segments, segment_pairs
from .io import AnnotationSet, Description, FeatureFile, VideoRecord, write_annotations, write_features
from .language import Vocabulary, write_embeddings

N_FILLERS = 4


@dataclass
class SyntheticVideo:
    record: VideoRecord
    features: np.ndarray


def pattern_signatures(n_patterns: int, d_v: int, rng: np.random.Generator) -> np.ndarray:
    """Rows are orthonormal signature directions."""
    if n_patterns > d_v:
        raise ValueError(f"{n_patterns} orthogonal patterns need d_v >= {n_patterns}, got {d_v}")
    q, _ = np.linalg.qr(rng.normal(size=(d_v, n_patterns)))
    return q.T.copy()


def frame_times(m: int, duration: float) -> np.ndarray:
    return np.arange(m) * (duration / (m - 1)) if m > 1 else np.zeros(1)


def synthetic_vocabulary(spec: SynthConfig, rng: np.random.Generator) -> Vocabulary:
    tokens = [f"pattern_{p}" for p in range(spec.n_patterns)] + [f"filler_{k}" for k in range(N_FILLERS)]
    vectors = np.vstack([rng.normal(size=(len(tokens), spec.d_w)), np.zeros((1, spec.d_w))])
    return Vocabulary({t: i for i, t in enumerate(tokens)}, vectors)


def _disjoint(w: ClipWindow, taken: list[ClipWindow]) -> bool:
    return all(w.end <= t.start or w.start >= t.end for t in taken)


def _draw_windows(spec: SynthConfig, k: int, rng: np.random.Generator):
    """``k`` pairwise disjoint windows (with segment indices in classification mode)."""
    tau = spec.duration
    for _ in range(10_000):
        wins, segs = [], []
        for _ in range(k):
            if spec.mode == "classification":
                pairs = segment_pairs(6)
                idx = int(rng.integers(len(pairs)))
                seg_len = tau / 6
                a, b = pairs[idx]
                w = ClipWindow(a * seg_len, (b + 1) * seg_len)
            else:
                length = rng.uniform(tau / 8, tau / 2)
                start = rng.uniform(0, tau - length)
                w = ClipWindow(float(start), float(start + length))
                idx = None
            if not _disjoint(w, wins):
                break
            wins.append(w)
            segs.append(idx)
        if len(wins) == k:
            return wins, segs
    raise RuntimeError(f"could not place {k} disjoint windows")


def make_query(pattern: int, spec: SynthConfig, rng: np.random.Generator) -> list[str]:
    toks = [f"filler_{int(rng.integers(N_FILLERS))}" for _ in range(spec.query_fillers)]
    toks.insert(int(rng.integers(len(toks) + 1)), f"pattern_{pattern}")
    return toks


def generate_synthetic(spec: SynthConfig):
    """Return ``(videos, AnnotationSet, Vocabulary, signatures)``, deterministic in ``spec.seed``."""
    if spec.n_patterns < 2:
        raise ValueError("n_patterns must be >= 2")
    if spec.amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    rng = np.random.default_rng(spec.seed)
    sigs = pattern_signatures(spec.n_patterns, spec.d_v, rng)
    vocab = synthetic_vocabulary(spec, rng)
    k_planted = 1 + spec.n_distractors
    if k_planted > spec.n_patterns:
        raise ValueError("more planted patterns than pattern ids")
    times = frame_times(spec.m, spec.duration)
    videos = []
    total = spec.n_videos + spec.n_test
    for v in range(total):
        feats = rng.normal(0.0, spec.noise_std, size=(spec.m, spec.d_v)) if spec.noise_std > 0 \
            else np.zeros((spec.m, spec.d_v))
        patterns = rng.choice(spec.n_patterns, size=k_planted, replace=False)
        wins, segs = _draw_windows(spec, k_planted, rng)
        descs = []
        for p, w, seg in zip(patterns, wins, segs):
            inside = (times >= w.start - 1e-9) & (times <= w.end + 1e-9)
            feats[inside] += spec.amplitude * sigs[p]
            descs.append(Description(make_query(int(p), spec, rng), [w], seg, int(p)))
        vid = f"v{v:05d}"
        rec = VideoRecord(vid, spec.duration, f"features/{vid}.asst", descs,
                          "train" if v < spec.n_videos else "test")
        videos.append(SyntheticVideo(rec, feats))
    ann = AnnotationSet([sv.record for sv in videos], spec.mode, 6, spec.duration / 6)
    return videos, ann, vocab, sigs


def write_dataset(out_dir: str | Path, spec: SynthConfig) -> tuple[AnnotationSet, list[Path]]:
    """Write features, ``annotations.json`` and ``embeddings.txt``; returns written paths."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    videos, ann, vocab, _ = generate_synthetic(spec)
    paths = []
    rate = spec.m / spec.duration
    for sv in videos:
        p = out / sv.record.features
        write_features(p, FeatureFile(sv.features, rate, spec.duration))
        paths.append(p)
    write_annotations(out / "annotations.json", ann)
    write_embeddings(out / "embeddings.txt", vocab)
    paths += [out / "annotations.json", out / "embeddings.txt"]
    return ann, paths


__all__ = ["SyntheticVideo", "enumerate_segments", "frame_times", "generate_synthetic",
           "pattern_signatures", "write_dataset"]
