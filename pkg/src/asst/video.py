"""Video subnet: attentive dilated stack followed by the squeeze/expand pyramid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .attention import CrossAttention
from .autograd import Tensor
from .config import ConfigError
from .layers import Conv1d, Module, RangeDropout, linear_interp_resize

FEEDS = ("none", "first_dilation", "last_dilation", "final_rep", "all")


@dataclass
class FeatureSequence:
    features: np.ndarray  # (m, d_v)
    duration: float
    frame_rate: float | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be (m >= 1, d_v), got {self.features.shape}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.frame_rate is None:
            self.frame_rate = self.m / self.duration

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def d_v(self) -> int:
        return self.features.shape[1]


def squeeze_lengths(m: int, n_squeeze: int) -> list[int]:
    lengths, cur = [], m
    for _ in range(n_squeeze):
        cur = -(-cur // 2)
        lengths.append(cur)
    return lengths


def min_squeeze_layers(m: int) -> int:
    return max(0, math.ceil(math.log2(m))) if m > 1 else 0


class VideoSubnet(Module):
    def __init__(self, d_v: int, d_lang: int, c_dil: int = 64, c_se: int = 32,
                 n_dilation: int = 4, n_squeeze: int = 6, n_expand: int = 6,
                 attention_feed: str = "all", d_a: int | None = None,
                 input_dropout: float = 1.0, dropout: float = 1.0,
                 squeeze_expand: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if n_dilation < 1:
            raise ConfigError("n_dilation must be >= 1")
        if n_expand > n_squeeze:
            raise ConfigError(f"n_expand ({n_expand}) cannot exceed n_squeeze ({n_squeeze})")
        if squeeze_expand and n_expand < 1:
            raise ConfigError("n_expand must be >= 1")
        if attention_feed not in FEEDS:
            raise ConfigError(f"attention_feed must be one of {FEEDS}, got {attention_feed!r}")
        self.n_dilation = n_dilation
        self.n_squeeze = n_squeeze
        self.n_expand = n_expand
        self.attention_feed = attention_feed
        self.squeeze_expand = squeeze_expand
        self.input_dropout = RangeDropout(input_dropout)
        self.dropout = RangeDropout(dropout)

        self.in_proj = Conv1d(d_v, c_dil, kernel=1, rng=rng)
        self.dilated = [Conv1d(c_dil, c_dil, kernel=3, dilation=2 ** i, rng=rng)
                        for i in range(n_dilation)]
        fed = self._fed_dilation_layers()
        self.dil_attention = [CrossAttention(d_lang, c_dil, d_a, rng=rng) if i in fed else None
                              for i in range(n_dilation)]
        if squeeze_expand:
            self.squeeze = [Conv1d(c_dil if j == 0 else c_se, c_se, kernel=3, stride=2, rng=rng)
                            for j in range(n_squeeze)]
            self.squeeze_attention = [CrossAttention(d_lang, c_se, d_a, rng=rng)
                                      if attention_feed == "all" else None
                                      for _ in range(n_squeeze)]
            self.connect = Conv1d(c_se, c_se, kernel=1, rng=rng)
            # lateral[0] reads the dilated output, lateral[j] the j-th squeeze map
            self.lateral = [Conv1d(c_dil if j == 0 else c_se, c_se, kernel=1, rng=rng)
                            for j in range(n_expand)]
        else:
            self.lateral = [Conv1d(c_dil, c_se, kernel=1, rng=rng)]
        self.final_attention = (CrossAttention(d_lang, c_se, d_a, rng=rng)
                                if attention_feed == "final_rep" else None)

    def _fed_dilation_layers(self) -> set[int]:
        feed = self.attention_feed
        if feed == "all":
            return set(range(self.n_dilation))
        if feed == "first_dilation":
            return {0}
        if feed == "last_dilation":
            return {self.n_dilation - 1}
        return set()

    @property
    def uses_language(self) -> bool:
        return self.attention_feed != "none"

    def check_length(self, m: int) -> None:
        if self.squeeze_expand and self.n_squeeze < min_squeeze_layers(m):
            raise ConfigError(
                f"{m} frames need at least {min_squeeze_layers(m)} squeezing layers, "
                f"configured {self.n_squeeze}")

    def dilation_stack(self, x: Tensor, lang: Tensor | None, rng=None, record=None) -> Tensor:
        h = self.in_proj(self.input_dropout(x, rng) if rng is not None else x)
        for conv, att in zip(self.dilated, self.dil_attention):
            v = ag.relu(conv(h))
            if rng is not None:
                v = self.dropout(v, rng)
            if att is not None and lang is not None:
                h = ag.add(h, att(lang, v, record))
            else:
                h = ag.add(h, v)
        return h

    def squeeze_phase(self, h: Tensor, lang: Tensor | None, record=None) -> list[Tensor]:
        self.check_length(h.shape[-2])
        maps = []
        cur = h
        for conv, att in zip(self.squeeze, self.squeeze_attention):
            cur = ag.relu(conv(cur))
            if att is not None and lang is not None:
                cur = ag.add(cur, att(lang, cur, record))
            maps.append(cur)
        return maps

    def expand_phase(self, dil_out: Tensor, maps: list[Tensor]) -> Tensor:
        feeds = [dil_out] + maps[: self.n_expand - 1]
        g = self.connect(maps[self.n_expand - 1])
        for src, lat in zip(reversed(feeds), reversed(self.lateral)):
            g = ag.add(linear_interp_resize(g, src.shape[-2]), lat(src))
        return g

    def __call__(self, x: Tensor, lang: Tensor | None = None, rng=None,
                 record: list | None = None) -> Tensor:
        """``x`` is ``(B, m, d_v)``; ``lang`` is ``(B, n, d)`` or None."""
        if not self.uses_language:
            lang = None
        h = self.dilation_stack(x, lang, rng, record)
        if self.squeeze_expand:
            rep = self.expand_phase(h, self.squeeze_phase(h, lang, record))
        else:
            rep = self.lateral[0](h)
        if self.final_attention is not None and lang is not None:
            rep = ag.add(rep, self.final_attention(lang, rep, record))
        return rep
