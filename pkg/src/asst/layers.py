"""Reusable layers built on :mod:`asst.autograd`.

Layers are small parameter containers.  ``Module.parameters()`` yields
``(name, Tensor)`` pairs with dotted names so checkpoints can be written and
read without pickling objects.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import ContractError, ShapeError, Tensor


class Module:
    """Base container; subclasses register Tensors and Modules as attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for mod in self.modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Non-trainable state (BatchNorm running statistics)."""
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.buffers(f"{name}.{i}.")


class Conv1d(Module):
    """Temporal convolution with Glorot-uniform weights and zero bias."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 1, dilation: int = 1,
                 stride: int = 1, padding: str = "same", rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if padding == "same" and kernel % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel, got k={kernel}")
        self.weight = ag.glorot(rng, (kernel, c_in, c_out), kernel * c_in, kernel * c_out)
        self.bias = ag.zeros_param((c_out,))
        self.dilation = dilation
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv1d(x, self.weight, self.bias, dilation=self.dilation,
                         stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = ag.glorot(rng, (d_in, d_out), d_in, d_out)
        self.bias = ag.zeros_param((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.bias_add(ag.matmul(x, self.weight), self.bias)


def glu(pre: Tensor) -> Tensor:
    """Gated linear unit ``q0 * sigmoid(q1)`` over the trailing axis halves."""
    d2 = pre.shape[-1]
    if d2 % 2:
        raise ShapeError(f"GLU needs an even trailing dimension, got {d2}")
    d = d2 // 2
    q0 = pre[..., :d]
    q1 = pre[..., d:]
    return ag.mul(q0, ag.sigmoid(q1))


class BatchNorm1d(Module):
    """Per-channel normalisation over every axis but the last.

    Train mode uses batch statistics (biased variance) and updates the
    running estimates as ``running = momentum * running + (1 - momentum) * batch``.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = ag.zeros_param((channels,))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            return batchnorm_train(x, self)
        scale = 1.0 / np.sqrt(self.running_var + self.eps)
        xhat = ag.scale_channels(ag.bias_add(x, Tensor(-self.running_mean)), Tensor(scale))
        return ag.bias_add(ag.scale_channels(xhat, self.gamma), self.beta)


def batchnorm_train(x: Tensor, state: BatchNorm1d) -> Tensor:
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    count = flat.shape[0]
    if count < 2:
        raise ContractError("train-mode batch norm needs at least two elements per channel")
    mu = flat.mean(axis=0)
    var = flat.var(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (flat - mu) * inv
    if ag.is_grad_enabled():
        mom = state.momentum
        state.running_mean[:] = mom * state.running_mean + (1 - mom) * mu
        state.running_var[:] = mom * state.running_var + (1 - mom) * var
    gamma, beta = state.gamma, state.beta
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def bw(g):
        g2 = g.reshape(-1, c)
        dgamma = (g2 * xhat).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g2 * gamma.data
        dx = inv / count * (count * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx.reshape(x.shape), dgamma, dbeta

    return ag._make(out, (x, gamma, beta), bw)


def batchnorm1d(x: Tensor, state: BatchNorm1d) -> Tensor:
    return state(x)


class RangeDropout(Module):
    """Dropout whose keep probability is redrawn from ``U[r, 1]`` every call.

    Follows the convention where the *rate* is the keep probability: an
    element survives with probability ``rho`` and is scaled by ``1 / rho``.
    Identity in eval mode.
    """

    def __init__(self, r: float):
        if not 0.0 < r <= 1.0:
            raise ValueError(f"range dropout floor must lie in (0, 1], got {r}")
        self.r = r

    def __call__(self, x: Tensor, rng: np.random.Generator) -> Tensor:
        return range_dropout(x, self.r, rng, training=self.training)


def range_dropout(x: Tensor, r: float, rng: np.random.Generator | None,
                  training: bool = True, rho: float | None = None) -> Tensor:
    if not 0.0 < r <= 1.0:
        raise ValueError(f"range dropout floor must lie in (0, 1], got {r}")
    if not training or r == 1.0 or rng is None:
        return x
    if rho is None:
        rho = float(rng.uniform(r, 1.0))
    mask = (rng.random(x.shape) < rho) / rho
    return ag.mul(x, Tensor(mask))


def linear_interp_resize(x: Tensor, target: int) -> Tensor:
    """Align-corners linear resampling of ``(..., m, C)`` to ``target`` frames."""
    m = x.shape[-2]
    if m < 1 or target < 1:
        raise ValueError("lengths must be >= 1")
    if target == m:
        return x
    if target == 1 or m == 1:
        coords = np.zeros(target)
    else:
        coords = np.arange(target) * ((m - 1) / (target - 1))
        coords[-1] = m - 1
    return ag.sample_frames(x, coords)


class LSTM(Module):
    """Single-direction LSTM; gate order (i, f, g, o), forget bias 1."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        self.w_x = ag.glorot(rng, (d_in, 4 * hidden), d_in, 4 * hidden)
        self.w_h = ag.glorot(rng, (hidden, 4 * hidden), hidden, 4 * hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor, reverse: bool = False) -> Tensor:
        """Run over axis -2 of ``(..., n, d_in)``; returns ``(..., n, hidden)``."""
        n = x.shape[-2]
        h_dim = self.hidden
        lead = x.shape[:-2]
        pre = ag.bias_add(ag.matmul(x, self.w_x), self.bias)
        h = Tensor(np.zeros(lead + (1, h_dim)))
        c = Tensor(np.zeros(lead + (1, h_dim)))
        outs: list[Tensor | None] = [None] * n
        steps = range(n - 1, -1, -1) if reverse else range(n)
        for t in steps:
            gates = ag.add(pre[..., t:t + 1, :], ag.matmul(h, self.w_h))
            i = ag.sigmoid(gates[..., :h_dim])
            f = ag.sigmoid(gates[..., h_dim:2 * h_dim])
            g = ag.tanh(gates[..., 2 * h_dim:3 * h_dim])
            o = ag.sigmoid(gates[..., 3 * h_dim:])
            c = ag.add(ag.mul(f, c), ag.mul(i, g))
            h = ag.mul(o, ag.tanh(c))
            outs[t] = h
        return ag.concat(outs, axis=-2)


class BiLSTMResidual(Module):
    """Bidirectional LSTM, GLU-gated kernel-1 projection, residual shortcut.

    ``out = x + GLU(conv1x1([fwd(x), bwd(x)]))``; the projection emits ``2d``
    channels so the gated result matches the input width ``d``.
    """

    def __init__(self, d: int, hidden: int | None = None, dropout: float = 1.0,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = hidden or d
        self.d = d
        self.fwd = LSTM(d, hidden, rng)
        self.bwd = LSTM(d, hidden, rng)
        self.proj = Conv1d(2 * hidden, 2 * d, kernel=1, rng=rng)
        self.dropout = RangeDropout(dropout)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return bilstm_residual_layer(x, self, rng)


def bilstm_residual_layer(w_in: Tensor, layer: BiLSTMResidual,
                          rng: np.random.Generator | None = None) -> Tensor:
    if w_in.shape[-1] != layer.d:
        raise ShapeError(f"residual layer expects width {layer.d}, got {w_in.shape[-1]}")
    hf = layer.fwd(w_in)
    hb = layer.bwd(w_in, reverse=True)
    both = ag.concat([hf, hb], axis=-1)
    if rng is not None:
        both = layer.dropout(both, rng)
    return ag.add(w_in, glu(layer.proj(both)))
