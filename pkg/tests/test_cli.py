import json
import math
import subprocess
import sys

import numpy as np
import pytest

from asst import autograd as ag
from asst import gradcheck
from asst.cli import EXIT_INTERNAL, EXIT_OK, EXIT_USER, main
from asst.heads import ClipWindow
from asst.io import AnnotationSet, Description, VideoRecord, write_annotations, write_predictions
from asst.metrics import ScoredWindow

SMALL = ["--set", "synth.n_test=10"]


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(d), "--seed", "3", "--videos", "50", *SMALL, "--force"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", str(dataset), "--out", str(out), "--steps", "200",
                 "--set", "training.checkpoint_every=100", "--force"])
    assert code == 0
    return out


def _losses(log_path):
    rows = [l.split("\t") for l in log_path.read_text().splitlines() if not l.startswith("#")]
    header, body = rows[0], rows[1:]
    return header, body


# -- synth ---------------------------------------------------------------------

def test_synth_manifest(dataset):
    man = json.loads((dataset / "manifest.json").read_text())
    assert man["n_videos"] == 60
    assert len(man["files"]) == 62
    assert man["provenance"]["synth.seed"] == "cli"


def test_synth_same_seed_same_hashes(tmp_path, dataset):
    assert main(["synth", "--out", str(tmp_path / "b"), "--seed", "3", "--videos", "50", *SMALL]) == 0
    a = json.loads((dataset / "manifest.json").read_text())["files"]
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())["files"]
    assert a == b


def test_synth_rejects_bad_input(tmp_path, capsys):
    code, _, err = _run(capsys, "synth", "--out", str(tmp_path / "x"), "--videos", "0")
    assert code == EXIT_USER and "--videos" in err
    (tmp_path / "full").mkdir()
    (tmp_path / "full" / "keep.txt").write_text("x")
    code, _, err = _run(capsys, "synth", "--out", str(tmp_path / "full"), "--videos", "2")
    assert code == EXIT_USER
    assert (tmp_path / "full" / "keep.txt").exists()


# -- train ------------------------------------------------------------------------

def test_train_outputs(trained):
    for name in ("train.log", "final.npz", "run.json", "ckpt_000100.npz", "ckpt_000200.npz"):
        assert (trained / name).exists()
    header, body = _losses(trained / "train.log")
    assert len(body) == 200
    loss = header.index("loss")
    assert float(body[-1][loss]) < math.log(21)
    text = (trained / "train.log").read_text()
    assert "# training.steps=cli" in text


def test_resume_matches_uninterrupted(dataset, trained, tmp_path):
    out = tmp_path / "resumed"
    code = main(["train", "--data", str(dataset), "--out", str(out), "--steps", "200",
                 "--resume", str(trained / "ckpt_000100.npz")])
    assert code == 0
    header, full = _losses(trained / "train.log")
    tail = [
        l.split("\t") for l in (out / "train.log").read_text().splitlines() if not l.startswith("#")]
    loss = header.index("loss")
    assert [r[loss] for r in tail] == [r[loss] for r in full[100:]]
    assert (out / "final.npz").read_bytes() == (trained / "final.npz").read_bytes()


def test_train_mode_mismatch(dataset, tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--data", str(dataset), "--out", str(tmp_path / "d"),
                        "--mode", "detection", "--steps", "1")
    assert code == EXIT_USER and "detection" in err


def test_train_detection_log_columns(tmp_path):
    data = tmp_path / "det"
    assert main(["synth", "--out", str(data), "--videos", "8", "--mode", "detection",
                 "--set", "synth.n_test=2"]) == 0
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(out), "--mode", "detection",
                 "--steps", "3", "--set", "training.batch_size=4"]) == 0
    header, body = _losses(out / "train.log")
    assert {"cls_loss", "reg_loss"} <= set(header)
    assert len(body) == 3


def test_train_detects_tampered_data(tmp_path):
    data = tmp_path / "d"
    assert main(["synth", "--out", str(data), "--videos", "2", "--set", "synth.n_test=1"]) == 0
    (data / "embeddings.txt").write_text("tampered 1.0\n")
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--steps", "1"]) == EXIT_USER


# -- eval --------------------------------------------------------------------------

@pytest.fixture
def hand_built(tmp_path):
    ann = AnnotationSet([VideoRecord("v", 60.0, "features/v.asst",
                                     [Description(["pattern_0"], [ClipWindow(0, 10), ClipWindow(20, 30)])])],
                        "detection")
    write_annotations(tmp_path / "annotations.json", ann)
    preds = [ScoredWindow(ClipWindow(0, 10), 0.9, None, "v"), ScoredWindow(ClipWindow(40, 50), 0.8, None, "v"),
             ScoredWindow(ClipWindow(20, 30), 0.7, None, "v")]
    write_predictions(tmp_path / "p.json", preds)
    return tmp_path


def test_eval_hand_built(hand_built, capsys):
    code, out, _ = _run(capsys, "eval", "--preds", str(hand_built / "p.json"), "--data", str(hand_built))
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["rank1"] == 1.0
    assert rep["map"] == pytest.approx(5 / 6, abs=1e-12)
    assert rep["miou"] == 1.0


def test_eval_fuse_self_is_identity(hand_built, capsys):
    p = hand_built / "p.json"
    _, plain, _ = _run(capsys, "eval", "--preds", str(p), "--data", str(hand_built))
    code, fused, _ = _run(capsys, "eval", "--fuse", f"{p}:0.5,{p}:0.5", "--data", str(hand_built))
    assert code == 0 and json.loads(fused) == json.loads(plain)


def test_eval_unknown_video(hand_built, capsys):
    write_predictions(hand_built / "bad.json", [ScoredWindow(ClipWindow(0, 1), 1.0, None, "ghost")])
    code, _, err = _run(capsys, "eval", "--preds", str(hand_built / "bad.json"), "--data", str(hand_built))
    assert code == EXIT_USER and "ghost" in err


def test_eval_needs_one_source(hand_built, capsys):
    code, _, _ = _run(capsys, "eval", "--data", str(hand_built))
    assert code == EXIT_USER


def test_eval_from_checkpoint(dataset, trained, tmp_path, capsys):
    code, out, _ = _run(capsys, "eval", "--ckpt", str(trained / "final.npz"), "--data", str(dataset))
    assert code == 0
    rep = json.loads(out)
    assert 0.0 <= rep["rank1"] <= rep["rank5"] <= 1.0
    preds = tmp_path / "p.json"
    assert main(["infer", "--ckpt", str(trained / "final.npz"), "--data", str(dataset),
                 "--out", str(preds)]) == 0
    capsys.readouterr()
    _, again, _ = _run(capsys, "eval", "--preds", str(preds), "--data", str(dataset))
    assert json.loads(again) == rep


def test_pure_metric_eval_skips_model_code(hand_built):
    script = (
        "import sys, json\n"
        "from asst.cli import main\n"
        f"code = main(['eval', '--preds', {str(hand_built / 'p.json')!r}, '--data', {str(hand_built)!r}])\n"
        "loaded = sorted(m for m in sys.modules if m in ('asst.model', 'asst.estimator', 'asst.training'))\n"
        "print('LOADED', json.dumps(loaded), code)\n"
    )
    res = subprocess.run([sys.executable, "-c", script], capture_output=True, text=True, check=True)
    line = [l for l in res.stdout.splitlines() if l.startswith("LOADED")][0]
    assert line == "LOADED [] 0"


# -- gradcheck ------------------------------------------------------------------------

def test_gradcheck_reports_corrupted_backward(monkeypatch, capsys):
    def bad():
        def f(t):
            return ag.sum_(ag._make(t.data ** 2, [t], lambda g: [g * t.data]))
        return ag.grad_check(f, np.linspace(1, 2, 5))

    monkeypatch.setattr(gradcheck, "CHECKS", [("glu", gradcheck.check_glu), ("corrupted", bad)])
    code, out, err = _run(capsys, "gradcheck")
    assert code == EXIT_INTERNAL
    rows = {l.split()[0]: l for l in out.splitlines()[1:]}
    assert rows["glu"].endswith("pass") and rows["corrupted"].endswith("FAIL")
    assert "corrupted" in err


def test_run_suite_counts_crash_as_failure():
    def boom():
        raise RuntimeError("x")

    (res,) = gradcheck.run_suite([("boom", boom)])
    assert not res.passed and math.isinf(res.error)


# -- inspect-attention -----------------------------------------------------------------

def test_attention_single_token_is_all_ones(dataset, trained, capsys):
    code, out, _ = _run(capsys, "inspect-attention", "--ckpt", str(trained / "final.npz"),
                        "--data", str(dataset), "--video", "v00000", "--query", "pattern_1")
    assert code == 0
    doc = json.loads(out[out.index("{"):])
    assert len(doc["layers"]) == 10
    for layer in doc["layers"]:
        m = np.array(layer["matrix"])
        assert m.shape[0] == 1
        np.testing.assert_allclose(m, 1.0, atol=1e-12)


def test_attention_columns_sum_to_one(dataset, trained, tmp_path):
    out = tmp_path / "att.json"
    assert main(["inspect-attention", "--ckpt", str(trained / "final.npz"), "--data", str(dataset),
                 "--video", "v00001", "--query", "pattern_0 filler_1 pattern_2", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    for layer in doc["layers"]:
        m = np.array(layer["matrix"])
        assert m.shape[0] == 3
        np.testing.assert_allclose(m.sum(axis=0), 1.0, atol=1e-12)


def test_attention_feed_none(dataset, tmp_path, capsys):
    run = tmp_path / "none"
    assert main(["train", "--data", str(dataset), "--out", str(run), "--steps", "2",
                 "--set", "video.attention_feed=none"]) == 0
    capsys.readouterr()
    code, out, _ = _run(capsys, "inspect-attention", "--ckpt", str(run / "final.npz"),
                        "--data", str(dataset), "--video", "v00000", "--query", "pattern_0")
    assert code == 0 and out.startswith("no attention layers")


def test_attention_unknown_video(dataset, trained, capsys):
    code, _, err = _run(capsys, "inspect-attention", "--ckpt", str(trained / "final.npz"),
                        "--data", str(dataset), "--video", "nope", "--query", "pattern_0")
    assert code == EXIT_USER and "nope" in err
