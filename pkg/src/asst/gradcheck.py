"""Finite-difference checks for every differentiable building block."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .attention import CrossAttention
from .autograd import Tensor, grad_check, grad_check_params
from .config import Config
from .heads import ClipHead, ClipWindow, roi_pool
from .layers import LSTM, BatchNorm1d, BiLSTMResidual, glu, linear_interp_resize, range_dropout
from .model import ASSTModel
from .training import Annotation, Batch, compute_loss, softmax_ce

TOLERANCE = 1e-4
EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def _rng(seed=0):
    return np.random.default_rng(seed)


def _weighted(out: Tensor, seed: int = 1) -> Tensor:
    """Random projection to a scalar so every output coordinate matters."""
    w = _rng(seed).normal(size=out.shape)
    return ag.sum_(ag.mul(out, Tensor(w)))


def check_conv1d() -> float:
    r = _rng()
    x = r.normal(size=(2, 9, 3))
    errs = []
    for dil, stride, pad in [(1, 1, "same"), (2, 1, "same"), (4, 1, "same"), (1, 2, "same"), (1, 1, "valid")]:
        w = Tensor(r.normal(size=(3, 3, 4)), requires_grad=True)
        b = Tensor(r.normal(size=4), requires_grad=True)
        errs.append(grad_check(lambda t: _weighted(ag.conv1d(t, w, b, dil, stride, pad)), x, EPS))
        xt = Tensor(x)
        errs.append(grad_check_params(lambda: _weighted(ag.conv1d(xt, w, b, dil, stride, pad)), [w, b], EPS))
    return max(errs)


def check_elementwise() -> float:
    r = _rng()
    x = r.uniform(0.2, 2.0, size=(4, 3))
    y = Tensor(r.normal(size=(4, 3)))
    fns = [ag.sigmoid, ag.tanh, ag.exp, ag.log, ag.relu,
           lambda t: ag.mul(t, y), lambda t: ag.div(y, t), lambda t: ag.sub(t, y)]
    return max(grad_check(lambda t: _weighted(f(t)), x, EPS) for f in fns)


def check_matmul_softmax() -> float:
    r = _rng()
    b = Tensor(r.normal(size=(3, 2)))
    e1 = grad_check(lambda t: _weighted(ag.matmul(t, b)), r.normal(size=(2, 4, 3)), EPS)
    e2 = grad_check(lambda t: _weighted(ag.softmax_axis(t, axis=0)), r.normal(size=(4, 3)), EPS)
    e3 = grad_check(lambda t: _weighted(ag.log_softmax(t, axis=-1)), r.normal(size=(4, 3)), EPS)
    return max(e1, e2, e3)


def check_glu() -> float:
    return grad_check(lambda t: _weighted(glu(t)), _rng().normal(size=(3, 6)), EPS)


def check_batchnorm_train() -> float:
    bn = BatchNorm1d(3)
    bn.gamma.data[:] = [0.5, 1.5, -1.0]
    bn.beta.data[:] = [0.1, -0.2, 0.3]
    x = _rng().normal(size=(2, 4, 3))
    e1 = grad_check(lambda t: _weighted(bn(t)), x, EPS)
    xt = Tensor(x)
    e2 = grad_check_params(lambda: _weighted(bn(xt)), [bn.gamma, bn.beta], EPS)
    return max(e1, e2)


def check_batchnorm_infer() -> float:
    bn = BatchNorm1d(3).eval()
    bn.running_mean[:] = [0.2, -0.1, 0.5]
    bn.running_var[:] = [1.5, 0.7, 2.0]
    bn.gamma.data[:] = [0.5, 1.5, -1.0]
    x = _rng().normal(size=(2, 4, 3))
    e1 = grad_check(lambda t: _weighted(bn(t)), x, EPS)
    xt = Tensor(x)
    e2 = grad_check_params(lambda: _weighted(bn(xt)), [bn.gamma, bn.beta], EPS)
    return max(e1, e2)


def check_range_dropout() -> float:
    x = _rng().normal(size=(5, 4))
    return grad_check(lambda t: _weighted(range_dropout(t, 0.5, _rng(3), rho=0.7)), x, EPS)


def check_interp_resize() -> float:
    x = _rng().normal(size=(2, 5, 3))
    return max(grad_check(lambda t: _weighted(linear_interp_resize(t, n)), x, EPS) for n in (1, 3, 8, 13))


def check_lstm() -> float:
    cell = LSTM(3, 4, _rng(5))
    x = _rng().normal(size=(2, 3, 3))
    e1 = grad_check(lambda t: _weighted(cell(t)), x, EPS)
    e2 = grad_check(lambda t: _weighted(cell(t, reverse=True)), x, EPS)
    xt = Tensor(x)
    e3 = grad_check_params(lambda: _weighted(cell(xt)), cell.parameters(), EPS)
    return max(e1, e2, e3)


def check_bilstm() -> float:
    layer = BiLSTMResidual(4, rng=_rng(6))
    x = _rng().normal(size=(2, 3, 4))
    e1 = grad_check(lambda t: _weighted(layer(t)), x, EPS)
    xt = Tensor(x)
    e2 = grad_check_params(lambda: _weighted(layer(xt)), layer.parameters(), EPS)
    return max(e1, e2)


def check_attention() -> float:
    att = CrossAttention(4, 3, d_a=2, rng=_rng(7))
    lang = _rng(1).normal(size=(2, 3, 4))
    vis = _rng(2).normal(size=(2, 5, 3))
    lt = Tensor(lang)
    e1 = grad_check(lambda t: _weighted(att(lt, t)), vis, EPS)
    vt = Tensor(vis)
    e2 = grad_check(lambda t: _weighted(att(t, vt)), lang, EPS)
    e3 = grad_check_params(lambda: _weighted(att(lt, vt)), att.parameters(), EPS)
    return max(e1, e2, e3)


def check_roi_pool() -> float:
    x = _rng().normal(size=(2, 10, 3))
    wins = np.array([[0.0, 30.0], [3.3, 11.7], [20.0, 29.0]])
    e1 = grad_check(lambda t: _weighted(roi_pool(t, wins, 30.0)), x, EPS)
    e2 = grad_check(lambda t: _weighted(roi_pool(t, [ClipWindow(2.0, 9.5)], 30.0)), x[0], EPS)
    return max(e1, e2)


def check_heads() -> float:
    errs = []
    pooled = _rng().normal(size=(2, 3, 7, 4))
    for mode, k in (("classification", 1), ("detection", 1), ("detection", 3)):
        head = ClipHead(4, 5, mode, k, rng=_rng(8))

        def scalar(out):
            if mode == "classification":
                return _weighted(out)
            return ag.add(ag.add(_weighted(out[0]), _weighted(out[1], 2)), _weighted(out[2], 3))

        errs.append(grad_check(lambda t: scalar(head(t)), pooled, EPS))
        pt = Tensor(pooled)
        errs.append(grad_check_params(lambda: scalar(head(pt)), head.parameters(), EPS))
    return max(errs)


def check_losses() -> float:
    r = _rng()
    e1 = grad_check(lambda t: softmax_ce(t, np.array([0, 2, 1, 2])), r.normal(size=(4, 3)), EPS)
    e2 = grad_check(lambda t: softmax_ce(t, 4), r.normal(size=21), EPS)
    # keep every residual away from the |x| = 1 kink
    pred = np.array([0.3, -0.4, 2.5, -3.0, 0.1])
    tgt = np.array([0.0, 0.2, 0.1, 0.5, -0.6])
    e3 = grad_check(lambda t: ag.sum_(ag.smooth_l1(t, tgt)), pred, EPS)
    return max(e1, e2, e3)


def tiny_config(mode: str = "classification", feed: str = "all") -> Config:
    cfg = Config()
    for key, val in [("video.c_dil", 4), ("video.c_se", 3), ("video.n_expand", 3),
                     ("video.n_squeeze", 3), ("video.attention_feed", feed), ("language.d", 3),
                     ("language.d_w", 3), ("model.head_hidden", 3), ("model.mode", mode),
                     ("model.window_frames", 5)]:
        cfg.set(key, val)
    return cfg


def _toy_batch(mode: str):
    r = _rng(11)
    feats = r.normal(size=(2, 5, 4))
    tokens = np.array([[0, 3, 1], [2, 1, 4]])
    if mode == "classification":
        return Batch(feats, tokens, segments=np.array([3, 17]))
    anns = [[Annotation(ClipWindow(2.0, 13.0))], [Annotation(ClipWindow(14.0, 29.0))]]
    return Batch(feats, tokens, annotations=anns)


def full_model_error(mode: str = "classification", feed: str = "all") -> float:
    """Whole-loss check on a 5-frame, 3-token toy batch (range dropout active, fixed stream)."""
    cfg = tiny_config(mode, feed)
    model = ASSTModel(cfg, d_v=4, vocab_size=6, seed=3)
    model.train()
    batch = _toy_batch(mode)

    def loss():
        return compute_loss(model, batch, cfg, _rng(21)).total

    params = [p for n, p in model.named_parameters()]
    return grad_check_params(loss, params, EPS)


def check_full_classification() -> float:
    return full_model_error("classification")


def check_full_detection() -> float:
    return full_model_error("detection")


CHECKS: list[tuple[str, Callable[[], float]]] = [
    ("elementwise", check_elementwise),
    ("matmul+softmax", check_matmul_softmax),
    ("conv1d", check_conv1d),
    ("glu", check_glu),
    ("batchnorm/train", check_batchnorm_train),
    ("batchnorm/infer", check_batchnorm_infer),
    ("range_dropout", check_range_dropout),
    ("interp_resize", check_interp_resize),
    ("lstm", check_lstm),
    ("bilstm_residual", check_bilstm),
    ("attention", check_attention),
    ("roi_pool", check_roi_pool),
    ("heads", check_heads),
    ("losses", check_losses),
    ("model/classification", check_full_classification),
    ("model/detection", check_full_detection),
]


def run_suite(checks=None) -> list[CheckResult]:
    results = []
    for name, fn in (checks or CHECKS):
        t0 = time.perf_counter()
        try:
            err = float(fn())
        except Exception:  # a crashing check is a failing check
            err = float("inf")
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<24}{'max rel err':>14}{'time s':>9}  status"]
    for r in results:
        lines.append(f"{r.name:<24}{r.error:>14.3e}{r.seconds:>9.2f}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
