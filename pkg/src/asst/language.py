"""Token queries, embedding tables and the residual biLSTM language encoder."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor
from .layers import BiLSTMResidual, Conv1d, Module


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class Vocabulary:
    """Token to row map over an embedding matrix; the last row is the unknown token."""

    index: dict[str, int]
    vectors: np.ndarray
    unk: int = field(init=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.unk = self.vectors.shape[0] - 1

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, token: str) -> np.ndarray:
        return self.vectors[self.index.get(token, self.unk)]

    def encode(self, tokens: Sequence[str | int]) -> list[int]:
        out = []
        for tok in tokens:
            if isinstance(tok, (int, np.integer)):
                if not 0 <= tok < self.size:
                    raise IndexError(f"token id {tok} outside vocabulary of {self.size}")
                out.append(int(tok))
            else:
                out.append(self.index.get(tok, self.unk))
        return out

    def tokens(self) -> list[str]:
        inv = sorted(self.index.items(), key=lambda kv: kv[1])
        return [t for t, _ in inv]


def load_embeddings(path: str | Path) -> Vocabulary:
    """Read a GloVe-style text file: ``token v1 v2 ... vd`` per line."""
    index: dict[str, int] = {}
    rows: list[list[float]] = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, vals = parts[0], parts[1:]
            if not vals:
                raise EmbeddingFormatError(f"line {lineno}: token {token!r} has no vector")
            if dim is None:
                dim = len(vals)
            elif len(vals) != dim:
                raise EmbeddingFormatError(
                    f"line {lineno}: expected {dim} values, found {len(vals)}")
            try:
                rows.append([float(v) for v in vals])
            except ValueError as exc:
                raise EmbeddingFormatError(f"line {lineno}: {exc}") from None
            index[token] = len(rows) - 1
    if dim is None:
        raise EmbeddingFormatError(f"{path}: empty embedding file")
    vectors = np.vstack([np.asarray(rows), np.zeros((1, dim))])
    return Vocabulary(index, vectors)


def write_embeddings(path: str | Path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.tokens():
            vec = " ".join(repr(float(v)) for v in vocab.vectors[vocab.index[tok]])
            fh.write(f"{tok} {vec}\n")


_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass
class TokenQuery:
    tokens: list[int]
    embedded: np.ndarray | None = None

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ContractError("a query needs at least one token")


class LanguageSubnet(Module):
    """Embedding lookup, optional width projection, ``p`` residual biLSTM layers."""

    def __init__(self, vocab_size: int, d_w: int, d: int, n_layers: int = 1,
                 dropout: float = 1.0, embeddings: np.ndarray | None = None,
                 freeze_embeddings: bool = False, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if n_layers < 1:
            raise ValueError("the language subnet needs at least one biLSTM layer")
        if embeddings is None:
            embeddings = rng.normal(0.0, 1.0, size=(vocab_size, d_w))
        self.embedding = Tensor(np.array(embeddings, dtype=np.float64),
                                requires_grad=not freeze_embeddings)
        self.in_proj = Conv1d(d_w, d, kernel=1, rng=rng) if d_w != d else None
        self.layers = [BiLSTMResidual(d, dropout=dropout, rng=rng) for _ in range(n_layers)]
        self.d = d

    def buffers(self, prefix: str = ""):
        yield from super().buffers(prefix)
        if not self.embedding.requires_grad:
            yield prefix + "embedding", self.embedding.data

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[-1] == 0:
            raise ContractError("a query needs at least one token")
        return ag.getitem(self.embedding, tokens)

    def __call__(self, tokens: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        """``tokens`` is ``(n,)`` or ``(B, n)``; returns ``(..., n, d)``."""
        w = self.embed(tokens)
        if self.in_proj is not None:
            w = self.in_proj(w)
        return encode_description(w, self.layers, rng=rng)


def encode_description(w0: Tensor, layers: Sequence[BiLSTMResidual], p: int | None = None,
                       rng: np.random.Generator | None = None) -> Tensor:
    if w0.shape[-2] == 0:
        raise ContractError("cannot encode an empty query")
    p = len(layers) if p is None else p
    if p < 1 or p > len(layers):
        raise ValueError(f"layer count {p} outside 1..{len(layers)}")
    w = w0
    for layer in layers[:p]:
        w = layer(w, rng if layer.training else None)
    return w


__all__ = [
    "EmbeddingFormatError", "LanguageSubnet", "TokenQuery", "Vocabulary",
    "encode_description", "load_embeddings", "tokenize", "write_embeddings",
]
