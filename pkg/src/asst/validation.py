"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .heads import ClipWindow
from .training import Annotation
from .video import FeatureSequence


def check_sample(sample) -> tuple[FeatureSequence, np.ndarray | list]:
    """Accept ``(FeatureSequence | ndarray, tokens)`` or ``(features, duration, tokens)``."""
    if isinstance(sample, dict):
        feats = sample["features"]
        dur = sample.get("duration")
        tokens = sample["tokens"]
    elif len(sample) == 3:
        feats, dur, tokens = sample
    elif len(sample) == 2:
        feats, tokens = sample
        dur = None
    else:
        raise ValueError("a sample is (features, tokens) or (features, duration, tokens)")
    if not isinstance(feats, FeatureSequence):
        arr = np.asarray(feats, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"features must be 2-D (m, d_v), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("features contain non-finite values")
        feats = FeatureSequence(arr, float(dur) if dur is not None else float(arr.shape[0]))
    if len(tokens) < 1:
        raise ValueError("every query needs at least one token")
    return feats, tokens


def check_samples(X: Sequence) -> list[tuple[FeatureSequence, object]]:
    if len(X) == 0:
        raise ValueError("no samples")
    out = [check_sample(s) for s in X]
    d_v = {f.d_v for f, _ in out}
    if len(d_v) != 1:
        raise ValueError(f"inconsistent feature widths {sorted(d_v)}")
    return out


def check_segment_targets(y, n_windows: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ValueError("classification targets must be a 1-D integer array of segment indices")
    if np.any(y < 0) or np.any(y >= n_windows):
        raise ValueError(f"segment indices must lie in [0, {n_windows})")
    return y


def check_window_targets(y) -> list[list[Annotation]]:
    """Detection targets: per sample a window, or a list of windows / ``(start, end[, label])``."""
    out = []
    for item in y:
        if isinstance(item, (ClipWindow, Annotation)):
            item = [item]
        elif len(item) and np.isscalar(item[0]):
            item = [item]
        anns = []
        for t in item:
            if isinstance(t, Annotation):
                ann = t
            elif isinstance(t, ClipWindow):
                ann = Annotation(t)
            else:
                ann = Annotation(ClipWindow(float(t[0]), float(t[1])), int(t[2]) if len(t) > 2 else 0)
            if ann.window.length <= 0:
                raise ValueError(f"window {ann.window.as_list()} has non-positive length")
            anns.append(ann)
        out.append(anns)
    return out
