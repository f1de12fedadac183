"""Acceptance criteria.  Each test prints one ``PASS``/``FAIL criterion N`` line.

The end-to-end runs use the default desk-scale configuration and take a few
minutes on one core; they are marked ``slow``.
"""

import io
import math
import time

import numpy as np
import pytest

from asst import ClipLocalizer
from asst.attention import attend_and_fuse, attention_weights
from asst.autograd import Tensor
from asst.cli import main
from asst.config import Config
from asst.evaluation import evaluate
from asst.gradcheck import CHECKS, TOLERANCE
from asst.heads import ClipWindow, anchor_grid, decode_window, encode_targets, enumerate_segments
from asst.metrics import ScoredWindow, average_precision, iou, nms, rank_at_k
from asst.synthetic import generate_synthetic
from asst.video import VideoSubnet


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# -- shared training helpers -------------------------------------------------------

def build_config(**sets):
    cfg = Config()
    for k, v in sets.items():
        cfg.set(k.replace("__", "."), v)
    return cfg


def split_xy(videos, split, mode):
    X, y, ids = [], [], []
    for v in videos:
        if v.record.split != split:
            continue
        for q, d in enumerate(v.record.descriptions):
            X.append((v.features, v.record.duration, d.tokens))
            y.append(d.segment_index if mode == "classification" else [(c.start, c.end) for c in d.clips])
            ids.append((v.record.video_id, q))
    return X, (np.array(y) if mode == "classification" else y), ids


def train_and_score(cfg, log=None):
    """Fit on the train split, score the test split through the evaluation path."""
    mode = cfg.model.mode
    videos, ann, vocab, _ = generate_synthetic(cfg.synth)
    Xtr, ytr, _ = split_xy(videos, "train", mode)
    Xte, _, ids = split_xy(videos, "test", mode)
    t0 = time.perf_counter()
    est = ClipLocalizer(config=cfg, vocabulary=vocab).fit(Xtr, ytr, log=log)
    seconds = time.perf_counter() - t0
    ranked = est.predict_windows(Xte, video_ids=[v for v, _ in ids])
    preds = [(q, p) for (_, q), r in zip(ids, ranked) for p in r]
    rep = evaluate(preds, ann, split="test").metrics
    return est, rep, seconds


CLS_STEPS = 3000
_cache = {}


def classification_run():
    if "cls" not in _cache:
        log = io.StringIO()
        est, rep, sec = train_and_score(build_config(), log)
        _cache["cls"] = (est, rep, sec, log.getvalue())
    return _cache["cls"]


# -- 1: gradients ---------------------------------------------------------------------

def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    code = main(["gradcheck"])
    seconds = time.perf_counter() - t0
    table = capsys.readouterr().out
    rows = table.splitlines()[1:]
    worst = max(float(r.split()[-3]) for r in rows)
    ok = code == 0 and len(rows) == len(CHECKS) and worst < TOLERANCE and seconds < 60
    report(capsys, 1, ok, f"{len(rows)} checks, worst rel err {worst:.2e}, {seconds:.1f} s")


# -- 2: geometry -----------------------------------------------------------------------

def test_criterion_2_geometry(capsys):
    anchors = anchor_grid(30.0)
    counts = [sum(a.group == g for a in anchors) for g in range(6)]
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        a = anchors[int(rng.integers(len(anchors)))]
        s = rng.uniform(-5, 30)
        g = ClipWindow(s, s + rng.uniform(0.05, 40))
        back = decode_window(a, *encode_targets(a, g))
        worst = max(worst, abs(back.start - g.start), abs(back.end - g.end))
    segs = enumerate_segments(6, 5.0)

    net = VideoSubnet(d_v=4, d_lang=4, attention_feed="none", rng=np.random.default_rng(3)).eval()
    base = np.zeros((1, 64, 4))
    imp = base.copy()
    imp[0, 32] = 1.0
    diff = np.abs(net.dilation_stack(Tensor(imp), None).data - net.dilation_stack(Tensor(base), None).data)
    support = np.flatnonzero(diff.sum(-1)[0] > 0)
    field = support.max() - support.min() + 1

    ok = (counts == [1, 5, 13, 29, 61, 125] and len(anchors) == 234 and worst < 1e-9
          and len(segs) == 21 and len(set((s.start, s.end) for s in segs)) == 21 and field == 31)
    report(capsys, 2, ok, f"anchors {counts} total {len(anchors)}, round trip err {worst:.1e}, "
                          f"{len(segs)} segments, receptive field {field}")


# -- 3: metric oracles --------------------------------------------------------------------

def _reference_nms(ws, t):
    order = sorted(range(len(ws)), key=lambda i: (-ws[i].score, ws[i].window.start, -ws[i].window.length, i))
    kept = []
    for i in order:
        a = ws[i].window
        clash = False
        for j in kept:
            b = ws[j].window
            inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
            union = a.length + b.length - inter
            if ws[j].class_id == ws[i].class_id and inter / union > t:
                clash = True
                break
        if not clash:
            kept.append(i)
    return kept


def test_criterion_3_metric_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    nms_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 65))
        s = rng.uniform(0, 100, n)
        ws = [ScoredWindow(ClipWindow(float(a), float(a + rng.uniform(0.5, 30))),
                           float(rng.choice([rng.uniform(), 0.5])), int(rng.integers(3)), "v") for a in s]
        t = float(rng.uniform(0, 1))
        nms_ok &= [id(w) for w in nms(ws, t)] == [id(ws[i]) for i in _reference_nms(ws, t)]

    ap = average_precision([ScoredWindow(ClipWindow(0, 10), 0.9, None, "v"),
                            ScoredWindow(ClipWindow(40, 50), 0.8, None, "v"),
                            ScoredWindow(ClipWindow(20, 30), 0.7, None, "v")],
                           {"v": [ClipWindow(0, 10), ClipWindow(20, 30)]}, 0.5)

    ranked = [list(rng.permutation(21)) for _ in range(100)]
    r21 = rank_at_k(ranked, rng.integers(0, 21, 100).tolist(), 21)

    iou_ok = True
    for _ in range(10_000):
        a0, b0 = rng.uniform(0, 50, 2)
        a = ClipWindow(a0, a0 + rng.uniform(0.01, 20))
        b = ClipWindow(b0, b0 + rng.uniform(0.01, 20))
        iou_ok &= iou(a, b) == iou(b, a) and abs(iou(a, a) - 1.0) < 1e-15 and 0 <= iou(a, b) <= 1
    seconds = time.perf_counter() - t0
    ok = nms_ok and ap == 5 / 6 and r21 == 1.0 and iou_ok and seconds < 30
    report(capsys, 3, ok, f"nms oracle {'ok' if nms_ok else 'mismatch'}, AP {ap:.6f}, Rank@21 {r21}, "
                          f"iou {'ok' if iou_ok else 'broken'}, {seconds:.1f} s")


# -- 4: attention ---------------------------------------------------------------------------

def test_criterion_4_attention_invariants(capsys):
    rng = np.random.default_rng(42)
    col_err, hull_ok, argmax_ok = 0.0, True, True
    for _ in range(100):
        n, m, d = rng.integers(1, 7), rng.integers(1, 12), rng.integers(1, 6)
        wa, va = rng.normal(size=(n, d)) * 3, rng.normal(size=(m, d)) * 3
        att = attention_weights(Tensor(wa), Tensor(va))
        a = att.weights.data
        col_err = max(col_err, float(np.abs(a.sum(axis=0) - 1).max()))
        wv = rng.normal(size=(n, 4))
        up = attend_and_fuse(att, Tensor(wv), Tensor(np.ones((m, 4)))).data
        hull_ok &= bool(np.all(up >= wv.min(0) - 1e-12) and np.all(up <= wv.max(0) + 1e-12))
        scaled = attention_weights(Tensor(wa), Tensor(va * rng.uniform(0.05, 20))).weights.data
        argmax_ok &= bool(np.array_equal(a.argmax(0), scaled.argmax(0)))
    ok = col_err <= 1e-9 and hull_ok and argmax_ok
    report(capsys, 4, ok, f"max column-sum error {col_err:.1e}, convex hull {hull_ok}, "
                          f"argmax under key rescaling {argmax_ok}")


# -- 5: classification end to end ------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_classification(capsys):
    _, rep, sec, _ = classification_run()
    _, chance, _ = train_and_score(build_config(synth__amplitude=0.0, synth__n_test=400,
                                                training__steps=300))
    ok = rep["rank1"] >= 0.90 and rep["miou"] >= 0.80 and sec < 15 * 60 \
        and abs(chance["rank1"] - 1 / 21) < 0.05
    report(capsys, 5, ok, f"Rank@1 {rep['rank1']:.3f}, mIoU {rep['miou']:.3f} after {CLS_STEPS} steps "
                          f"({sec:.0f} s); amplitude-0 Rank@1 {chance['rank1']:.3f} vs chance {1 / 21:.3f}")


# -- 6: detection end to end ------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_detection(capsys):
    cfg = build_config(synth__mode="detection", model__mode="detection", training__steps=5000)
    _, rep, sec = train_and_score(cfg)
    ok = rep["map"] >= 0.70 and rep["rank1"] >= 0.80 and sec < 30 * 60
    report(capsys, 6, ok, f"mAP@0.5 {rep['map']:.3f}, Rank@1,IoU0.5 {rep['rank1']:.3f}, "
                          f"Rank@5 {rep['rank5']:.3f} after 5000 steps ({sec:.0f} s)")


# -- 7: attention feed ablation -----------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_distractor_ablation(capsys):
    res = {}
    for feed in ("all", "none"):
        cfg = build_config(synth__n_distractors=2, video__attention_feed=feed, training__steps=1500)
        res[feed] = train_and_score(cfg)[1]["rank1"]
    gap = res["all"] - res["none"]
    report(capsys, 7, gap >= 0.30, f"Rank@1 feed=all {res['all']:.3f}, feed=none {res['none']:.3f}, "
                                   f"gap {gap:.3f} (2 distractors, chance among planted 0.333)")


# -- 8: determinism ---------------------------------------------------------------------------------

def _strip_wall_time(log):
    out = []
    for line in log.splitlines():
        out.append(line if line.startswith("#") else "\t".join(line.split("\t")[:-1]))
    return out


@pytest.mark.slow
def test_criterion_8_determinism(capsys, tmp_path):
    est_a, _, _, log_a = classification_run()
    log = io.StringIO()
    est_b, _, _ = train_and_score(build_config(), log)
    est_a.save(tmp_path / "a.npz")
    est_b.save(tmp_path / "b.npz")
    same_ckpt = (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    same_log = _strip_wall_time(log_a) == _strip_wall_time(log.getvalue())
    report(capsys, 8, same_ckpt and same_log,
           f"checkpoints bit-identical {same_ckpt}, logs identical (wall_time excluded) {same_log}")


# -- 9: TEF ablation ---------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_tef_ablation(capsys):
    rows = []
    for tef in ("pooled", "none"):
        _, rep, sec = train_and_score(build_config(model__tef=tef, training__steps=1000))
        rows.append((tef, rep["rank1"], rep["miou"], sec))
    ok = all(math.isfinite(r) and math.isfinite(m) for _, r, m, _ in rows)
    detail = "; ".join(f"tef={t}: Rank@1 {r:.3f} mIoU {m:.3f} ({s:.0f} s)" for t, r, m, s in rows)
    report(capsys, 9, ok, detail)
