"""Losses, hard-example mining, optimizers, augmentation and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor
from .config import Config
from .heads import ClipWindow, assign_positives
from .layers import linear_interp_resize
from .metrics import resample_frames
from .model import ASSTModel

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------


def softmax_ce(logits: Tensor, target) -> Tensor:
    """``-log softmax(logits)[target]`` averaged over leading axes.

    ``logits`` is ``(K,)`` with an int target, or ``(N, K)`` with ``(N,)`` targets.
    """
    k = logits.shape[-1]
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if np.any(tgt < 0) or np.any(tgt >= k):
        raise ContractError(f"target {target} outside {k} classes")
    logp = ag.log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        return ag.mul(logp[int(tgt[0])], -1.0)
    picked = logp[np.arange(logits.shape[0]), tgt]
    return ag.mul(ag.mean(picked), -1.0)


def ce_per_row(logits: Tensor, targets: np.ndarray) -> Tensor:
    logp = ag.log_softmax(logits, axis=-1)
    return ag.mul(logp[np.arange(logits.shape[0]), targets], -1.0)


def smooth_l1(pred, target) -> Tensor:
    return ag.smooth_l1(ag.as_tensor(pred), target)


def mohem_select(cls_losses: Sequence[float]) -> np.ndarray:
    """Indices whose loss is at least the batch mean (never empty)."""
    losses = np.asarray(cls_losses, dtype=np.float64)
    if losses.size == 0:
        raise ContractError("mOHEM needs at least one loss")
    thresh = losses.mean()
    # the mean can exceed every element by an ulp when all are equal
    sel = np.flatnonzero(losses >= thresh - 1e-12 * max(1.0, abs(thresh)))
    return sel if sel.size else np.array([int(np.argmax(losses))])


# ----------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------


@dataclass
class LrSchedule:
    base: float = 5e-4
    decay: float = 0.9
    interval: int = 2500

    def __post_init__(self):
        if self.base <= 0 or self.decay <= 0 or self.interval < 1:
            raise ValueError("invalid learning-rate schedule")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return schedule.base * schedule.decay ** (step // schedule.interval)


@dataclass
class OptimizerState:
    kind: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    slots: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(params: Sequence[tuple[str, Tensor]], state: OptimizerState, lr: float) -> None:
    """In-place update of named parameters from their ``.grad``."""
    state.step += 1
    t = state.step
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        g = p.grad
        if state.kind == "adam":
            m, v = state.slots.setdefault(name, [np.zeros_like(p.data), np.zeros_like(p.data)])
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            mhat = m / (1 - state.beta1 ** t)
            vhat = v / (1 - state.beta2 ** t)
            p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
        else:
            (buf,) = state.slots.setdefault(name, [np.zeros_like(p.data)])
            buf *= state.momentum
            buf += g
            p.data -= lr * buf


# ----------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------


@dataclass
class Annotation:
    window: ClipWindow
    label: int = 0


def augment_sample(features: np.ndarray, duration: float, anns: Sequence[Annotation],
                   rng: np.random.Generator, window_frames: int, window_seconds: float,
                   scale_range=(0.8, 1.25), min_visible: float = 0.5,
                   scale: float | None = None, offset: int | None = None):
    """Stretch by ``s ~ U[scale_range]``, crop a model-length window, remap annotations.

    Frames sit at aligned-corner times.  Returns ``(window features,
    annotations in window time)``; annotations less than ``min_visible``
    inside the window are dropped.
    """
    m = features.shape[0]
    step = window_seconds / (window_frames - 1) if window_frames > 1 else window_seconds
    src_step = duration / (m - 1) if m > 1 else duration
    s = float(rng.uniform(*scale_range)) if scale is None else scale
    stretched_frames = int(round(s * duration / step)) + 1
    if offset is None:
        lo, hi = sorted((0, stretched_frames - window_frames))
        offset = int(rng.integers(lo, hi + 1))
    k = np.arange(window_frames) + offset
    src_time = k * step / s
    coords = src_time / src_step if m > 1 else np.zeros(window_frames)
    crop = resample_frames(features, coords)
    shift = offset * step
    out = []
    for ann in anns:
        w = ann.window
        new = ClipWindow(s * w.start - shift, s * w.end - shift)
        vis = new.clip(window_seconds)
        if new.length <= 0 or vis.length / new.length < min_visible:
            continue
        out.append(Annotation(vis, ann.label))
    return crop, out


def fit_to_window(features: np.ndarray, window_frames: int) -> np.ndarray:
    m = features.shape[0]
    if m == window_frames:
        return features
    with ag.no_grad():
        return linear_interp_resize(Tensor(features), window_frames).data


# ----------------------------------------------------------------------
# samples, batches and the step
# ----------------------------------------------------------------------


@dataclass
class Sample:
    features: np.ndarray
    duration: float
    tokens: np.ndarray
    segment: int | None = None
    annotations: list[Annotation] = field(default_factory=list)
    video_id: str = ""
    query_id: int = 0


@dataclass
class Batch:
    features: np.ndarray          # (B, M, d_v)
    tokens: np.ndarray            # (B, n)
    segments: np.ndarray | None = None
    annotations: list[list[Annotation]] | None = None


def make_batch(samples: Sequence[Sample], model: ASSTModel, cfg: Config,
               rng: np.random.Generator | None, augment: bool) -> Batch:
    tokens = np.stack([np.asarray(s.tokens, dtype=np.int64) for s in samples])
    if model.mode == "classification":
        feats = np.stack([fit_to_window(s.features, s.features.shape[0]) for s in samples])
        return Batch(feats, tokens, segments=np.array([s.segment for s in samples]))
    mc, tc = cfg.model, cfg.training
    feats, anns = [], []
    for s in samples:
        if augment and rng is not None:
            f, a = augment_sample(s.features, s.duration, s.annotations, rng,
                                  mc.window_frames, mc.window_seconds,
                                  (tc.scale_min, tc.scale_max), tc.min_visible)
        else:
            f, a = augment_sample(s.features, s.duration, s.annotations, rng,
                                  mc.window_frames, mc.window_seconds, scale=1.0, offset=0,
                                  min_visible=tc.min_visible)
        feats.append(f)
        anns.append(a)
    return Batch(np.stack(feats), tokens, annotations=anns)


@dataclass
class LossParts:
    total: Tensor
    cls: float
    reg: float


def detection_targets(model: ASSTModel, anns: Sequence[Annotation], pos_iou: float):
    """Per-anchor class labels (0 = background) and regression targets."""
    pos, match, _ = assign_positives(model.windows, [a.window for a in anns], pos_iou)
    n_cls = model.head.num_classes
    labels = np.zeros(len(model.windows), dtype=np.int64)
    t_c = np.zeros(len(model.windows))
    t_l = np.zeros(len(model.windows))
    for a_idx in np.flatnonzero(pos):
        ann = anns[match[a_idx]]
        if n_cls == 1:
            labels[a_idx] = 1
        elif not 0 <= ann.label < n_cls:
            raise ContractError(f"label {ann.label} outside {n_cls} classes")
        else:
            labels[a_idx] = ann.label + 1
        c, ln = model.anchor_centers[a_idx], model.anchor_lengths[a_idx]
        t_c[a_idx] = (ann.window.center - c) / ln
        t_l[a_idx] = math.log(ann.window.length / ln)
    return pos, labels, t_c, t_l


def compute_loss(model: ASSTModel, batch: Batch, cfg: Config,
                 rng: np.random.Generator | None) -> LossParts:
    tc = cfg.training
    out = model(batch.features, batch.tokens, rng=rng)
    if model.mode == "classification":
        per = ce_per_row(out.scores, batch.segments)
        keep = mohem_select(per.data) if tc.mohem else np.arange(per.shape[0])
        cls = ag.mean(per[keep]) if len(keep) < per.shape[0] else ag.mean(per)
        return LossParts(cls, cls.item(), 0.0)

    b_idx, a_idx, labels, pos_b, pos_a, tgt_c, tgt_l = [], [], [], [], [], [], []
    n_anchor = len(model.windows)
    for b, anns in enumerate(batch.annotations):
        pos, lab, t_c, t_l = detection_targets(model, anns, tc.pos_iou)
        pidx = np.flatnonzero(pos)
        nidx = np.flatnonzero(~pos)
        n_neg = min(len(nidx), max(1, int(round(tc.neg_ratio * len(pidx)))))
        if rng is not None:
            nsel = rng.choice(nidx, size=n_neg, replace=False) if n_neg else nidx[:0]
        else:
            nsel = nidx[:n_neg]
        sel = np.concatenate([pidx, np.sort(nsel)])
        b_idx.append(np.full(len(sel), b))
        a_idx.append(sel)
        labels.append(lab[sel])
        pos_b.append(np.full(len(pidx), b))
        pos_a.append(pidx)
        tgt_c.append(t_c[pidx])
        tgt_l.append(t_l[pidx])
    b_idx = np.concatenate(b_idx)
    a_idx = np.concatenate(a_idx)
    labels = np.concatenate(labels)
    del n_anchor

    logits = out.scores[b_idx, a_idx]
    per = ce_per_row(logits, labels)
    if tc.mohem:
        keep = mohem_select(per.data)
        cls = ag.mean(per[keep])
    else:
        cls = ag.mean(per)
    total = cls
    reg_val = 0.0
    pos_b = np.concatenate(pos_b)
    pos_a = np.concatenate(pos_a)
    if len(pos_a):
        pc = out.d_c[pos_b, pos_a]
        pl = out.d_l[pos_b, pos_a]
        reg = ag.mul(ag.add(ag.sum_(ag.smooth_l1(pc, np.concatenate(tgt_c))),
                            ag.sum_(ag.smooth_l1(pl, np.concatenate(tgt_l)))),
                     1.0 / (2 * len(pos_a)))
        reg_val = reg.item()
        total = ag.add(cls, ag.mul(reg, tc.reg_weight))
    return LossParts(total, cls.item(), reg_val)


def trainable(model: ASSTModel) -> list[tuple[str, Tensor]]:
    """Named parameters that receive gradient under the current configuration."""
    named = list(model.named_parameters())
    if not model.video.uses_language:
        named = [(n, p) for n, p in named if not n.startswith("language.")]
    return named


def train_step(batch: Batch, model: ASSTModel, cfg: Config, state: OptimizerState,
               lr: float, rng: np.random.Generator | None) -> LossParts:
    model.train()
    params = trainable(model)
    for _, p in params:
        p.grad = None
    parts = compute_loss(model, batch, cfg, rng)
    ag.backward(parts.total)
    for _, p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    optimizer_step(params, state, lr)
    return parts


# ----------------------------------------------------------------------
# loop
# ----------------------------------------------------------------------


LOG_HEADER = "step\tlr\tloss\tcls_loss\treg_loss\twall_time"


class Trainer:
    """Owns the optimizer state and the run's random stream."""

    def __init__(self, model: ASSTModel, cfg: Config, samples: Sequence[Sample],
                 seed: int | None = None):
        if not samples:
            raise ValueError("no training samples")
        self.model = model
        self.cfg = cfg
        self.samples = list(samples)
        tc = cfg.training
        self.rng = np.random.default_rng(tc.seed if seed is None else seed)
        kind = "adam" if tc.optimizer == "adam" else "sgd"
        self.state = OptimizerState(kind=kind, momentum=tc.momentum)
        self.schedule = LrSchedule(tc.lr, tc.lr_decay, tc.lr_interval)
        self.step_count = 0
        buckets: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            buckets.setdefault(len(s.tokens), []).append(i)
        self._buckets = [np.array(buckets[k]) for k in sorted(buckets)]
        self._weights = np.array([len(b) for b in self._buckets], dtype=np.float64)
        self._weights /= self._weights.sum()

    def draw_batch(self) -> list[Sample]:
        bsz = self.cfg.training.batch_size
        k = int(self.rng.choice(len(self._buckets), p=self._weights)) if len(self._buckets) > 1 else 0
        pool = self._buckets[k]
        idx = self.rng.choice(pool, size=min(bsz, len(pool)), replace=False)
        return [self.samples[i] for i in idx]

    def step(self) -> tuple[float, LossParts]:
        lr = lr_at(self.schedule, self.step_count)
        samples = self.draw_batch()
        batch = make_batch(samples, self.model, self.cfg, self.rng, self.cfg.training.augment)
        parts = train_step(batch, self.model, self.cfg, self.state, lr, self.rng)
        self.step_count += 1
        return lr, parts

    def run(self, steps: int, log: TextIO | None = None,
            callback: Callable[[int, "Trainer"], None] | None = None) -> list[float]:
        losses = []
        t0 = time.perf_counter()
        if log is not None and self.step_count == 0:
            log.write(LOG_HEADER + "\n")
        for _ in range(steps):
            lr, parts = self.step()
            loss = parts.total.item()
            losses.append(loss)
            if log is not None:
                log.write(f"{self.step_count}\t{lr!r}\t{loss!r}\t{parts.cls!r}\t{parts.reg!r}"
                          f"\t{time.perf_counter() - t0:.3f}\n")
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {self.step_count}")
            if callback is not None:
                callback(self.step_count, self)
        return losses
