"""Word-to-frame cross-modal attention.

Scores are ``w_a . v_a / d_a`` (the divisor is the key width itself, not its
square root) and are normalised over the word axis, so each frame receives a
convex combination of the language value rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .layers import BatchNorm1d, Conv1d, Module


@dataclass
class AttentionMatrix:
    weights: Tensor  # (..., n, m), columns sum to one
    scores: Tensor   # raw scaled dot products


def attention_weights(w_a: Tensor, v_a: Tensor) -> AttentionMatrix:
    """``w_a`` is ``(..., n, d_a)``, ``v_a`` is ``(..., m, d_a)``."""
    d_a = w_a.shape[-1]
    if v_a.shape[-1] != d_a:
        raise ShapeError(f"key widths differ: {w_a.shape} vs {v_a.shape}")
    scores = ag.mul(ag.matmul(w_a, ag.swap_last(v_a)), 1.0 / d_a)
    return AttentionMatrix(ag.softmax_axis(scores, axis=-2), scores)


def attend_and_fuse(att: AttentionMatrix | Tensor, w_v: Tensor, v: Tensor) -> Tensor:
    """``u_j = (sum_i A_ij w_v_i) * v_j`` for every frame ``j``."""
    a = att.weights if isinstance(att, AttentionMatrix) else att
    if w_v.shape[-1] != v.shape[-1]:
        raise ShapeError(f"value width {w_v.shape[-1]} does not match visual width {v.shape[-1]}")
    attended = ag.matmul(ag.swap_last(a), w_v)  # (..., m, C)
    return ag.mul(attended, v)


class CrossAttention(Module):
    """Projections plus the normalise-and-project tail applied to ``u``.

    ``forward`` returns ``ReLU(BN(conv1x1(u)))``; the caller decides where
    the result is added.
    """

    def __init__(self, d_lang: int, channels: int, d_a: int | None = None,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        d_a = d_a or channels
        self.lang_key = Conv1d(d_lang, d_a, kernel=1, rng=rng)
        self.lang_value = Conv1d(d_lang, channels, kernel=1, rng=rng)
        self.vis_key = Conv1d(channels, d_a, kernel=1, rng=rng)
        self.out = Conv1d(channels, channels, kernel=1, rng=rng)
        self.norm = BatchNorm1d(channels)

    def matrix(self, lang: Tensor, v: Tensor) -> AttentionMatrix:
        return attention_weights(self.lang_key(lang), self.vis_key(v))

    def __call__(self, lang: Tensor, v: Tensor, record: list | None = None) -> Tensor:
        att = self.matrix(lang, v)
        if record is not None:
            record.append(att.weights.data.copy())
        u = attend_and_fuse(att, self.lang_value(lang), v)
        return ag.relu(self.norm(self.out(u)))
