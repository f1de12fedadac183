"""The full translator: language subnet, video subnet and a clip head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import Config
from .heads import (ClipHead, anchor_arrays, anchor_grid, append_tef,
                    enumerate_segments, roi_pool)
from .language import LanguageSubnet
from .layers import Module
from .video import VideoSubnet


@dataclass
class Outputs:
    """Model outputs for one batch.

    ``scores`` holds ``(B, 21)`` segment scores (classification) or
    ``(B, A, K+1)`` logits (detection); ``d_c``/``d_l`` are ``(B, A)``.
    """

    scores: Tensor
    d_c: Tensor | None = None
    d_l: Tensor | None = None
    attention: list | None = None


class ASSTModel(Module):
    def __init__(self, cfg: Config, d_v: int, vocab_size: int,
                 embeddings: np.ndarray | None = None, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        lc, vc, mc = cfg.language, cfg.video, cfg.model
        d_w = embeddings.shape[1] if embeddings is not None else lc.d_w
        self.language = LanguageSubnet(vocab_size, d_w, lc.d, lc.n_layers,
                                       dropout=cfg.dropout.hidden, embeddings=embeddings,
                                       freeze_embeddings=lc.freeze_embeddings, rng=rng)
        self.video = VideoSubnet(d_v, lc.d, vc.c_dil, vc.c_se, vc.n_dilation, vc.n_squeeze,
                                 vc.n_expand, vc.attention_feed, vc.d_a or None,
                                 input_dropout=cfg.dropout.input, dropout=cfg.dropout.hidden,
                                 squeeze_expand=vc.squeeze_expand, rng=rng)
        head_in = vc.c_se + (2 if mc.tef != "none" else 0)
        self.head = ClipHead(head_in, mc.head_hidden, mc.mode, mc.num_classes, rng=rng)
        self.mode = mc.mode
        self.tef = mc.tef
        if mc.mode == "classification":
            segs = enumerate_segments(mc.n_segments, mc.segment_length)
            self.windows = np.array([w.as_list() for w in segs])
            self.tau = mc.n_segments * mc.segment_length
        else:
            self.tau = mc.window_seconds
            self.anchors = anchor_grid(self.tau)
            self.anchor_centers, self.anchor_lengths = anchor_arrays(self.anchors)
            self.windows = np.stack([self.anchor_centers - self.anchor_lengths / 2,
                                     self.anchor_centers + self.anchor_lengths / 2], axis=1)

    def representation(self, features: np.ndarray, tokens: np.ndarray | None,
                       rng: np.random.Generator | None = None, record: list | None = None) -> Tensor:
        x = Tensor(np.asarray(features, dtype=np.float64))
        lang = None
        if self.video.uses_language and tokens is not None:
            lang = self.language(np.asarray(tokens), rng=rng if self.training else None)
        drop_rng = rng if self.training else None
        rep = self.video(x, lang, rng=drop_rng, record=record)
        if self.tef == "frame":
            m = rep.shape[-2]
            pos = np.stack([np.arange(m) / m, np.arange(1, m + 1) / m], axis=1)
            pos = np.broadcast_to(pos, rep.shape[:-1] + (2,))
            rep = ag.concat([rep, Tensor(np.ascontiguousarray(pos))], axis=-1)
        return rep

    def __call__(self, features: np.ndarray, tokens: np.ndarray | None,
                 rng: np.random.Generator | None = None, record: list | None = None) -> Outputs:
        """``features`` is ``(B, m, d_v)`` spanning ``self.tau`` seconds; ``tokens`` is ``(B, n)``."""
        rep = self.representation(features, tokens, rng, record)
        pooled = roi_pool(rep, self.windows, self.tau)
        if self.tef == "pooled":
            pooled = append_tef(pooled, self.windows, self.tau)
        out = self.head(pooled)
        if self.mode == "classification":
            return Outputs(out, attention=record)
        logits, d_c, d_l = out
        return Outputs(logits, d_c, d_l, attention=record)
