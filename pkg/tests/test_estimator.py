import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from asst import ClipLocalizer
from asst.config import Config, SynthConfig
from asst.synthetic import generate_synthetic


def _config(mode="classification", steps=120):
    cfg = Config()
    for k, v in [("video.c_dil", 8), ("video.c_se", 6), ("language.d", 4), ("language.d_w", 4),
                 ("model.head_hidden", 6), ("model.mode", mode), ("training.batch_size", 8),
                 ("training.steps", steps), ("model.window_frames", 16)]:
        cfg.set(k, v)
    return cfg


def _data(mode="classification"):
    spec = SynthConfig(n_videos=24, n_test=6, m=16, d_v=6, n_patterns=3, d_w=4, mode=mode,
                       noise_std=0.1, amplitude=2.0, seed=4)
    vids, _, vocab, _ = generate_synthetic(spec)
    X, y, wins = [], [], []
    for v in vids:
        for d in v.record.descriptions:
            X.append((v.features, v.record.duration, d.tokens))
            y.append(d.segment_index if mode == "classification" else d.clips[0])
    return X, (np.array(y) if mode == "classification" else y), vocab


@pytest.fixture(scope="module")
def fitted():
    X, y, vocab = _data()
    return ClipLocalizer(config=_config(), vocabulary=vocab).fit(X, y), X, y


def test_params_and_clone():
    cfg = _config()
    est = ClipLocalizer(config=cfg, steps=7, seed=3)
    params = est.get_params()
    assert params["steps"] == 7 and params["seed"] == 3 and params["config"] is cfg
    twin = clone(est)
    assert twin.get_params()["steps"] == 7
    twin.set_params(steps=9)
    assert twin.steps == 9 and est.steps == 7


def test_unfitted_predict_raises():
    X, _, vocab = _data()
    with pytest.raises(NotFittedError):
        ClipLocalizer(vocabulary=vocab).predict(X)


def test_fit_predict_shapes(fitted):
    est, X, y = fitted
    pred = est.predict(X)
    assert pred.shape == (len(X),)
    assert np.all((0 <= pred) & (pred < 21))
    proba = est.predict_proba(X)
    assert proba.shape == (len(X), 21)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert len(est.loss_curve_) == 120
    assert est.n_features_in_ == 6


def test_training_beats_chance(fitted):
    est, X, y = fitted
    assert est.score(X, y) > 3 / 21


def test_predict_windows_sorted(fitted):
    est, X, _ = fitted
    ranked = est.predict_windows(X[:3], ["a", "b", "c"])
    for r, vid in zip(ranked, "abc"):
        assert len(r) == 21
        assert all(p.video_id == vid for p in r)
        scores = [p.score for p in r]
        assert scores == sorted(scores, reverse=True)


def test_save_load_identical(fitted, tmp_path):
    est, X, _ = fitted
    est.save(tmp_path / "m.npz")
    back = ClipLocalizer.load(tmp_path / "m.npz")
    np.testing.assert_array_equal(back.decision_function(X), est.decision_function(X))


def test_seed_controls_init():
    X, y, vocab = _data()
    a = ClipLocalizer(config=_config(steps=3), vocabulary=vocab, seed=1).fit(X, y)
    b = ClipLocalizer(config=_config(steps=3), vocabulary=vocab, seed=1).fit(X, y)
    c = ClipLocalizer(config=_config(steps=3), vocabulary=vocab, seed=2).fit(X, y)
    assert a.loss_curve_ == b.loss_curve_
    assert a.loss_curve_ != c.loss_curve_


def test_validation_errors():
    X, y, vocab = _data()
    est = ClipLocalizer(config=_config(steps=1), vocabulary=vocab)
    with pytest.raises(ValueError, match="targets"):
        est.fit(X, y[:-1])
    with pytest.raises(ValueError, match="segment indices"):
        est.fit(X, np.full(len(X), 21))
    with pytest.raises(ValueError, match="no samples"):
        est.fit([], [])
    bad = [(np.full((4, 6), np.nan), 30.0, ["pattern_0"])]
    with pytest.raises(ValueError, match="non-finite"):
        est.fit(bad, [0])
    with pytest.raises(ValueError, match="at least one token"):
        est.fit([(np.ones((4, 6)), 30.0, [])], [0])
    with pytest.raises(ValueError, match="vocabulary"):
        ClipLocalizer(config=_config(steps=1)).fit([(np.ones((4, 6)), 30.0, ["x"])], [0])


def test_detection_fit_predict():
    X, y, vocab = _data("detection")
    est = ClipLocalizer(config=_config("detection", steps=30), vocabulary=vocab).fit(X, y)
    wins = est.predict(X[:4])
    assert len(wins) == 4
    for w in wins:
        assert w is None or 0 <= w.start < w.end <= 30.0
    assert 0.0 <= est.score(X, y) <= 1.0
    with pytest.raises(AttributeError):
        est.predict_proba(X)
    assert est.decision_function(X[:2]).shape[0] == 2
