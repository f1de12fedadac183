"""Turn a dataset directory into estimator inputs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .heads import ClipWindow, enumerate_segments
from .io import AnnotationSet, read_annotations, read_features
from .language import Vocabulary, load_embeddings, tokenize
from .video import FeatureSequence


@dataclass
class Pair:
    video_id: str
    query_id: int
    features: FeatureSequence
    tokens: list
    clips: list[ClipWindow]
    segment_index: int | None
    label: int


@dataclass
class Dataset:
    root: Path
    annotations: AnnotationSet
    vocabulary: Vocabulary | None
    features: dict[str, FeatureSequence]

    def pairs(self, split: str | None = None) -> list[Pair]:
        out = []
        for v in self.annotations.videos:
            if split is not None and v.split != split:
                continue
            for q, d in enumerate(v.descriptions):
                toks = d.tokens
                if isinstance(toks, str):
                    toks = tokenize(toks)
                out.append(Pair(v.video_id, q, self.features[v.video_id], list(toks), d.clips,
                                d.segment_index, d.label))
        return out


def load_dataset(root: str | Path, embeddings: str | Path | None = None) -> Dataset:
    root = Path(root)
    ann = read_annotations(root / "annotations.json")
    emb_path = Path(embeddings) if embeddings else root / "embeddings.txt"
    vocab = load_embeddings(emb_path) if emb_path.exists() else None
    feats = {}
    for v in ann.videos:
        ff = read_features(root / v.features)
        feats[v.video_id] = FeatureSequence(ff.features, ff.duration, ff.frame_rate)
    return Dataset(root, ann, vocab, feats)


def classification_xy(pairs: list[Pair]):
    X = [(p.features, p.tokens) for p in pairs]
    y = np.array([p.segment_index for p in pairs])
    return X, y


def detection_xy(pairs: list[Pair]):
    X = [(p.features, p.tokens) for p in pairs]
    y = [[(c.start, c.end, p.label) for c in p.clips] for p in pairs]
    return X, y


def segment_of(window: ClipWindow, n_segments: int = 6, seg_len: float = 5.0) -> int:
    segs = enumerate_segments(n_segments, seg_len)
    d = [abs(s.start - window.start) + abs(s.end - window.end) for s in segs]
    return int(np.argmin(d))
