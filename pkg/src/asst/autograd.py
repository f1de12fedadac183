"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every value flowing through the model is a :class:`Tensor`.  Operations build
a graph on the fly; :func:`backward` orders it topologically (the tape) and
runs each node's backward rule exactly once.  All arithmetic is float64.

Binary elementwise operations require equal shapes or a scalar operand.
Anything else that looks like broadcasting (bias addition, batched matmul
against a shared weight) has its own explicit op.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an operation is evaluated outside its domain."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation precondition."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording the backward rule when any parent needs it."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ----------------------------------------------------------------------
# tape / backward
# ----------------------------------------------------------------------


def build_tape(root: Tensor) -> list[Tensor]:
    """Return the nodes reachable from ``root`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------


def _binary_operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"elementwise op needs equal shapes or a scalar, got {a.shape} and {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ----------------------------------------------------------------------
# reductions and shape plumbing
# ----------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)

    fancy = _is_fancy(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), bw)


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _make(np.stack([t.data for t in xs], axis=axis), xs, bw)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes.

    ``b`` may be 2-D and shared across every batch of ``a``, or carry the
    same batch axes as ``a``.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the trailing axis."""
    x = as_tensor(x)
    b = as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias of shape {b.shape} does not fit trailing axis of {x.shape}")
    return _make(x.data + b.data, (x, b),
                 lambda g: (g, g.reshape(-1, b.shape[0]).sum(axis=0)))


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a vector along the trailing axis."""
    x = as_tensor(x)
    s = as_tensor(s)
    if s.ndim != 1 or x.shape[-1] != s.shape[0]:
        raise ShapeError(f"scale of shape {s.shape} does not fit trailing axis of {x.shape}")
    return _make(x.data * s.data, (x, s),
                 lambda g: (g * s.data, (g * x.data).reshape(-1, s.shape[0]).sum(axis=0)))


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a ``(..., 1, C)`` tensor to ``(..., n, C)``."""
    x = as_tensor(x)
    if x.shape[-2] != 1:
        raise ShapeError(f"broadcast_rows needs a singleton row axis, got {x.shape}")
    shape = x.shape[:-2] + (n, x.shape[-1])
    return _make(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (g.sum(axis=-2, keepdims=True),))


# ----------------------------------------------------------------------
# softmax family
# ----------------------------------------------------------------------


def softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


# ----------------------------------------------------------------------
# convolution and resampling
# ----------------------------------------------------------------------


def conv_output_length(m: int, k: int, dilation: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-m // stride)
    span = (k - 1) * dilation + 1
    if m < span:
        raise ShapeError(f"valid conv with span {span} needs at least {span} frames, got {m}")
    return (m - span) // stride + 1


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, dilation: int = 1,
           stride: int = 1, padding: str = "same") -> Tensor:
    """Temporal cross-correlation over axis -2.

    ``x`` is ``(..., m, C_in)``, ``w`` is ``(k, C_in, C_out)``.  Same padding
    zero-pads ``(k // 2) * dilation`` frames on each side and yields
    ``ceil(m / stride)`` outputs centred on frames ``0, stride, 2*stride, ...``.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if w.ndim != 3 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"conv1d weight {w.shape} does not match input {x.shape}")
    if dilation < 1 or stride < 1:
        raise ValueError("dilation and stride must be >= 1")
    k = w.shape[0]
    if padding == "same":
        if k % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel, got k={k}")
        pad = (k // 2) * dilation
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    m = x.shape[-2]
    m_out = conv_output_length(m, k, dilation, stride, padding)
    lead = x.shape[:-2]
    c_in, c_out = w.shape[1], w.shape[2]

    xp = x.data
    if pad:
        widths = [(0, 0)] * len(lead) + [(pad, pad), (0, 0)]
        xp = np.pad(xp, widths)
    stop = (m_out - 1) * stride + 1
    taps = [xp[..., t * dilation: t * dilation + stop: stride, :] for t in range(k)]
    cols = np.concatenate(taps, axis=-1)  # (..., m_out, k*C_in)
    wmat = w.data.reshape(k * c_in, c_out)
    out = cols @ wmat
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, c_out)
        gw = (cols.reshape(-1, k * c_in).T @ g2).reshape(k, c_in, c_out)
        gcols = g @ wmat.T
        gxp = np.zeros(xp.shape)
        for t in range(k):
            gxp[..., t * dilation: t * dilation + stop: stride, :] += gcols[..., t * c_in:(t + 1) * c_in]
        gx = gxp[..., pad: pad + m, :] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, bw)


def interp_matrix(coords: np.ndarray, m: int) -> sp.csr_matrix:
    """Sparse linear-interpolation operator reading ``coords`` from ``m`` frames."""
    coords = np.clip(np.asarray(coords, dtype=DTYPE), 0.0, m - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, m - 1)
    frac = coords - lo
    n = coords.shape[0]
    rows = np.concatenate([np.arange(n), np.arange(n)])
    cols = np.concatenate([lo, hi])
    vals = np.concatenate([1.0 - frac, frac])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, m))


def sample_frames(x: Tensor, coords: np.ndarray) -> Tensor:
    """Linearly interpolate rows of ``x`` at fractional frame coordinates.

    ``x`` is ``(m, C)`` with ``coords`` of shape ``(P,)``, or ``(B, m, C)``
    with ``coords`` of shape ``(P,)`` (shared) or ``(B, P)`` (per batch item).
    Coordinates are clamped to ``[0, m - 1]``.
    """
    x = as_tensor(x)
    coords = np.asarray(coords, dtype=DTYPE)
    if x.ndim == 2:
        op = interp_matrix(coords.reshape(-1), x.shape[0])
        out_shape = coords.shape + (x.shape[1],)
        flat = x.data
    elif x.ndim == 3:
        bsz, m, c = x.shape
        if coords.ndim == 1:
            coords = np.broadcast_to(coords, (bsz, coords.shape[0]))
        if coords.shape[0] != bsz:
            raise ShapeError(f"coords {coords.shape} do not match batch of {x.shape}")
        clipped = np.clip(coords, 0.0, m - 1) + (np.arange(bsz) * m)[:, None]
        # offsets keep items apart; clamp happened per item above
        op = _offset_interp(clipped.reshape(-1), bsz * m, m)
        out_shape = coords.shape + (c,)
        flat = x.data.reshape(bsz * m, c)
    else:
        raise ShapeError(f"sample_frames needs a 2-D or 3-D input, got {x.shape}")
    out = (op @ flat).reshape(out_shape)
    opt = op.T.tocsr()

    def bw(g):
        return ((opt @ g.reshape(-1, x.shape[-1])).reshape(x.shape),)

    return _make(out, (x,), bw)


def _offset_interp(coords: np.ndarray, total: int, m: int) -> sp.csr_matrix:
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    # the upper neighbour must stay inside the same item
    at_end = (lo % m) == (m - 1)
    hi = np.where(at_end, lo, lo + 1)
    n = coords.shape[0]
    rows = np.concatenate([np.arange(n), np.arange(n)])
    cols = np.concatenate([lo, hi])
    vals = np.concatenate([1.0 - frac, frac])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, total))


# ----------------------------------------------------------------------
# losses used by training
# ----------------------------------------------------------------------


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Elementwise 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise, x = pred - target."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    d = pred.data - t
    ad = np.abs(d)
    quad = ad < 1.0
    out = np.where(quad, 0.5 * d * d, ad - 0.5)
    return _make(out, (pred,), lambda g: (g * np.where(quad, d, np.sign(d)),))


# ----------------------------------------------------------------------
# initialisation and gradient checking
# ----------------------------------------------------------------------


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4) -> float:
    """Max relative error between tape gradient and central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    xt = Tensor(x0.copy(), requires_grad=True)
    loss = f(xt)
    backward(loss)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(x0.copy())).item()
            flat[i] = orig - eps
            fm = f(Tensor(x0.copy())).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                      eps: float = 1e-4) -> float:
    """Like :func:`grad_check` but perturbs existing parameter tensors in place."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            numeric = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = loss_fn().item()
                flat[i] = orig - eps
                fm = loss_fn().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * eps)
            err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
            if err.size:
                worst = max(worst, float(err.max()))
    return worst
