"""Clip geometry and the shared-weight clip sampler heads.

Time maps to fractional frame coordinates with aligned corners: time ``t`` in
a sequence of duration ``tau`` with ``m`` frames sits at ``t / tau * (m - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor
from .layers import Conv1d, Linear, Module

N_GROUPS = 6
POOL_POINTS = 7


@dataclass(frozen=True)
class ClipWindow:
    start: float
    end: float

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    @property
    def length(self) -> float:
        return self.end - self.start

    @classmethod
    def from_center(cls, center: float, length: float) -> "ClipWindow":
        return cls(center - 0.5 * length, center + 0.5 * length)

    def clip(self, tau: float) -> "ClipWindow":
        return ClipWindow(min(max(self.start, 0.0), tau), min(max(self.end, 0.0), tau))

    def shift(self, offset: float) -> "ClipWindow":
        return ClipWindow(self.start + offset, self.end + offset)

    def as_list(self) -> list[float]:
        return [self.start, self.end]


@dataclass(frozen=True)
class Anchor:
    group: int
    center: float
    length: float

    @property
    def window(self) -> ClipWindow:
        return ClipWindow.from_center(self.center, self.length)


def enumerate_segments(n_seg: int = 6, seg_len: float = 5.0) -> list[ClipWindow]:
    """Every contiguous span ``(a, b)`` of base segments, lexicographic in ``(a, b)``."""
    if n_seg < 1:
        raise ValueError("n_seg must be >= 1")
    return [ClipWindow(a * seg_len, (b + 1) * seg_len)
            for a in range(n_seg) for b in range(a, n_seg)]


def segment_pairs(n_seg: int = 6) -> list[tuple[int, int]]:
    return [(a, b) for a in range(n_seg) for b in range(a, n_seg)]


def segment_index(a: int, b: int, n_seg: int = 6) -> int:
    return segment_pairs(n_seg).index((a, b))


def tef(w: ClipWindow, tau: float) -> tuple[float, float]:
    return (w.start / tau, w.end / tau)


def anchor_grid(tau: float, n_groups: int = N_GROUPS) -> list[Anchor]:
    """Group ``i`` holds ``2**(i+2) - 3`` anchors of length ``tau / 2**i``, spaced a quarter length apart."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    anchors = []
    for i in range(n_groups):
        length = tau / 2 ** i
        count = 2 ** (i + 2) - 3
        for k in range(count):
            anchors.append(Anchor(i, length / 2 + k * length / 4, length))
    return anchors


def anchor_arrays(anchors: Sequence[Anchor]) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([a.center for a in anchors]), np.array([a.length for a in anchors]))


def window_coords(starts: np.ndarray, ends: np.ndarray, tau: float, m: int) -> np.ndarray:
    """Seven evenly spaced frame coordinates per window, shape ``(..., 7)``."""
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    if np.any(ends - starts <= 0):
        raise ContractError("cannot pool a zero-length window")
    frac = np.arange(POOL_POINTS) / (POOL_POINTS - 1)
    t = starts[..., None] + (ends - starts)[..., None] * frac
    scale = (m - 1) / tau if m > 1 else 0.0
    return t * scale


def roi_pool(rep: Tensor, windows: Sequence[ClipWindow] | np.ndarray, tau: float) -> Tensor:
    """Sample 7 interpolated vectors per window.

    ``rep`` is ``(m, C)`` or ``(B, m, C)``; ``windows`` is a list of
    ClipWindow or an array ``(W, 2)`` / ``(B, W, 2)``.  Returns
    ``(..., W, 7, C)``; a single ClipWindow gives ``(7, C)``.
    """
    single = isinstance(windows, ClipWindow)
    if single:
        windows = [windows]
    if not isinstance(windows, np.ndarray):
        windows = np.array([[w.start, w.end] for w in windows], dtype=np.float64)
    m = rep.shape[-2]
    coords = window_coords(windows[..., 0], windows[..., 1], tau, m)
    c = rep.shape[-1]
    if rep.ndim == 2:
        out = ag.sample_frames(rep, coords.reshape(-1))
        out = ag.reshape(out, coords.shape + (c,))
        return ag.reshape(out, (POOL_POINTS, c)) if single else out
    bsz = rep.shape[0]
    if coords.ndim == 2:
        coords = np.broadcast_to(coords, (bsz,) + coords.shape)
    out = ag.sample_frames(rep, coords.reshape(bsz, -1))
    return ag.reshape(out, coords.shape + (c,))


def append_tef(pooled: Tensor, windows: np.ndarray, tau: float) -> Tensor:
    """Concatenate ``(start/tau, end/tau)`` onto each pooled vector."""
    feats = np.asarray(windows, dtype=np.float64) / tau
    shape = pooled.shape[:-1] + (2,)
    feats = np.broadcast_to(feats[..., None, :], shape)
    return ag.concat([pooled, Tensor(np.ascontiguousarray(feats))], axis=-1)


def decode_window(anchor: Anchor, d_c: float, d_l: float, tau: float | None = None) -> ClipWindow:
    w = ClipWindow.from_center(anchor.center + d_c * anchor.length, math.exp(d_l) * anchor.length)
    return w.clip(tau) if tau is not None else w


def decode_arrays(centers, lengths, d_c, d_l, tau: float | None = None) -> np.ndarray:
    c = centers + d_c * lengths
    ln = np.exp(d_l) * lengths
    out = np.stack([c - ln / 2, c + ln / 2], axis=-1)
    return np.clip(out, 0.0, tau) if tau is not None else out


def encode_targets(anchor: Anchor, gt: ClipWindow) -> tuple[float, float]:
    if gt.length <= 0:
        raise ContractError("ground-truth window needs positive length")
    return ((gt.center - anchor.center) / anchor.length, math.log(gt.length / anchor.length))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise temporal IoU between ``(A, 2)`` and ``(G, 2)`` windows."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(np.minimum(a[:, None, 1], b[None, :, 1])
                    - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def assign_positives(anchors: Sequence[Anchor] | np.ndarray, gts: Sequence[ClipWindow],
                     thresh: float = 0.5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(positive mask, matched gt index or -1, best IoU)`` per anchor."""
    if isinstance(anchors, np.ndarray):
        awin = anchors
    else:
        awin = np.array([a.window.as_list() for a in anchors])
    if not gts:
        n = len(awin)
        return np.zeros(n, bool), np.full(n, -1), np.zeros(n)
    gwin = np.array([g.as_list() if isinstance(g, ClipWindow) else list(g) for g in gts])
    ious = iou_matrix(awin, gwin)
    best = ious.max(axis=1)
    match = ious.argmax(axis=1)  # first maximum wins ties
    pos = best >= thresh
    return pos, np.where(pos, match, -1), best


class ClipHead(Module):
    """Two valid kernel-3 convolutions (7 -> 5 -> 3), mean over positions, linear out.

    Classification heads emit one score per window; detection heads emit
    ``num_classes + 1`` logits followed by ``(d_c, d_l)``.
    """

    def __init__(self, channels: int, hidden: int = 32, mode: str = "classification",
                 num_classes: int = 1, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if mode not in ("classification", "detection"):
            raise ValueError(f"unknown head mode {mode!r}")
        self.mode = mode
        self.num_classes = num_classes
        self.conv1 = Conv1d(channels, hidden, kernel=3, padding="valid", rng=rng)
        self.conv2 = Conv1d(hidden, hidden, kernel=3, padding="valid", rng=rng)
        n_out = 1 if mode == "classification" else num_classes + 1 + 2
        self.out = Linear(hidden, n_out, rng=rng)

    def __call__(self, pooled: Tensor):
        """``pooled`` is ``(..., 7, C)``."""
        h = ag.relu(self.conv1(pooled))
        h = ag.relu(self.conv2(h))
        h = ag.mean(h, axis=-2)
        y = self.out(h)
        if self.mode == "classification":
            return ag.reshape(y, y.shape[:-1])
        k = self.num_classes + 1
        return y[..., :k], y[..., k], y[..., k + 1]


def head_forward(pooled: Tensor, head: ClipHead):
    return head(pooled)
