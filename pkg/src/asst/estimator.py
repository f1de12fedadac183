"""scikit-learn style front end for the translator.

>>> loc = ClipLocalizer(config=cfg).fit(X, y)      # doctest: +SKIP
>>> loc.predict(X_test)                            # doctest: +SKIP

``X`` is a sequence of ``(features, tokens)`` or ``(features, duration,
tokens)`` samples, where ``features`` is an ``(m, d_v)`` array or a
:class:`~asst.video.FeatureSequence`.  ``y`` holds segment indices for the
classification model and windows (optionally with class labels) for the
detection model.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import __version__
from . import autograd as ag
from .config import Config, parse_config
from .heads import ClipWindow, decode_arrays
from .io import load_checkpoint, save_checkpoint
from .language import Vocabulary
from .metrics import ScoredWindow, iou, nms, sliding_inference, window_offsets, crop_window
from .model import ASSTModel
from .training import Sample, Trainer, fit_to_window, lr_at
from .validation import check_samples, check_segment_targets, check_window_targets

_PREDICT_BATCH = 64


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ClipLocalizer(BaseEstimator):
    """Localise the clip of a feature sequence described by a token query.

    Parameters
    ----------
    config : Config, optional
        Full run configuration; desk-scale defaults when omitted.
    steps : int, optional
        Training steps; overrides ``config.training.steps``.
    seed : int, optional
        Seed for initialisation and the training stream; overrides
        ``config.training.seed``.
    vocabulary : Vocabulary, optional
        Maps string tokens to embedding rows.  Without it tokens must be
        integer ids and embeddings start random.
    """

    def __init__(self, config: Config | None = None, steps: int | None = None,
                 seed: int | None = None, vocabulary: Vocabulary | None = None):
        self.config = config
        self.steps = steps
        self.seed = seed
        self.vocabulary = vocabulary

    # -- helpers ---------------------------------------------------------
    def _resolved_config(self) -> Config:
        cfg = self.config.copy() if self.config is not None else Config()
        if self.steps is not None:
            cfg.training.steps = int(self.steps)
        if self.seed is not None:
            cfg.training.seed = int(self.seed)
        return cfg

    def _token_ids(self, tokens) -> np.ndarray:
        vocab = getattr(self, "vocabulary_", None) or self.vocabulary
        if vocab is not None:
            return np.array(vocab.encode(tokens), dtype=np.int64)
        ids = np.asarray(tokens)
        if not np.issubdtype(ids.dtype, np.integer):
            raise ValueError("string tokens need a vocabulary")
        return ids.astype(np.int64)

    def _samples(self, X, y=None) -> list[Sample]:
        checked = check_samples(X)
        mode = self.config_.model.mode if hasattr(self, "config_") else self._resolved_config().model.mode
        samples = []
        if y is not None:
            if mode == "classification":
                targets = check_segment_targets(y, self._n_windows(mode))
            else:
                targets = check_window_targets(y)
            if len(targets) != len(checked):
                raise ValueError(f"{len(checked)} samples but {len(targets)} targets")
        for i, (fs, tokens) in enumerate(checked):
            s = Sample(fs.features, fs.duration, self._token_ids(tokens))
            if y is not None:
                if mode == "classification":
                    s.segment = int(targets[i])
                else:
                    s.annotations = targets[i]
            samples.append(s)
        return samples

    def _n_windows(self, mode: str) -> int:
        n = self._resolved_config().model.n_segments if not hasattr(self, "config_") \
            else self.config_.model.n_segments
        return n * (n + 1) // 2

    # -- estimator API ---------------------------------------------------
    def fit(self, X, y, log: TextIO | None = None, callback=None) -> "ClipLocalizer":
        cfg = self._resolved_config()
        self.config_ = cfg
        samples = self._samples(X, y)
        d_v = samples[0].features.shape[1]
        if self.vocabulary is not None:
            vocab_size, emb = self.vocabulary.size, self.vocabulary.vectors
        else:
            vocab_size, emb = int(max(int(s.tokens.max()) for s in samples)) + 2, None
        self.vocabulary_ = self.vocabulary
        self.n_features_in_ = d_v
        self.vocab_size_ = vocab_size
        self.model_ = ASSTModel(cfg, d_v, vocab_size, embeddings=emb, seed=cfg.training.seed)
        self.trainer_ = Trainer(self.model_, cfg, samples, seed=cfg.training.seed)
        self.loss_curve_ = self.trainer_.run(cfg.training.steps, log=log, callback=callback)
        return self

    def continue_fit(self, steps: int, log: TextIO | None = None, callback=None) -> "ClipLocalizer":
        check_is_fitted(self, "model_")
        self.loss_curve_ = list(getattr(self, "loss_curve_", [])) + \
            self.trainer_.run(steps, log=log, callback=callback)
        return self

    def _forward_groups(self, feats: list[np.ndarray], tokens: list[np.ndarray], record=False):
        """Eval-mode forward in batches of equal query length and frame count."""
        model = self.model_
        model.eval()
        results: list = [None] * len(feats)
        groups: dict = {}
        for i, (f, t) in enumerate(zip(feats, tokens)):
            groups.setdefault((len(t), f.shape[0]), []).append(i)
        with ag.no_grad():
            for key in sorted(groups):
                idx = groups[key]
                for s in range(0, len(idx), _PREDICT_BATCH):
                    chunk = idx[s:s + _PREDICT_BATCH]
                    rec = [] if record else None
                    out = model(np.stack([feats[i] for i in chunk]),
                                np.stack([tokens[i] for i in chunk]), record=rec)
                    for j, i in enumerate(chunk):
                        if model.mode == "classification":
                            results[i] = (out.scores.data[j],)
                        else:
                            results[i] = (out.scores.data[j], out.d_c.data[j], out.d_l.data[j])
                        if record:
                            results[i] = results[i] + ([a[j] for a in rec],)
        return results

    def decision_function(self, X) -> np.ndarray:
        """Segment scores ``(N, n_windows)`` (classification) or foreground scores per anchor."""
        check_is_fitted(self, "model_")
        samples = self._samples(X)
        if self.model_.mode == "classification":
            res = self._forward_groups([s.features for s in samples], [s.tokens for s in samples])
            return np.stack([r[0] for r in res])
        mc = self.config_.model
        feats = [fit_to_window(s.features, mc.window_frames) for s in samples]
        res = self._forward_groups(feats, [s.tokens for s in samples])
        return np.stack([1.0 - _softmax(r[0])[:, 0] for r in res])

    def predict_proba(self, X) -> np.ndarray:
        if self.config_.model.mode != "classification":
            raise AttributeError("predict_proba is only defined for the classification model")
        return _softmax(self.decision_function(X))

    def predict_windows(self, X, video_ids: Sequence[str] | None = None) -> list[list[ScoredWindow]]:
        """Ranked windows per sample in video time (best first)."""
        check_is_fitted(self, "model_")
        samples = self._samples(X)
        vids = list(video_ids) if video_ids is not None else [""] * len(samples)
        if self.model_.mode == "classification":
            scores = self.decision_function(X)
            out = []
            for s, sc, vid in zip(samples, scores, vids):
                scale = s.duration / self.model_.tau
                order = np.argsort(-sc, kind="stable")
                out.append([ScoredWindow(ClipWindow(*(self.model_.windows[k] * scale)), float(sc[k]),
                                         None, vid) for k in order])
            return out
        return self._detect(samples, vids)

    def _detect(self, samples: list[Sample], vids: list[str]) -> list[list[ScoredWindow]]:
        cfg = self.config_
        mc, ec = cfg.model, cfg.eval
        stride = ec.stride or mc.window_seconds / 2
        crops, toks, owner, offsets = [], [], [], []
        for i, s in enumerate(samples):
            for off in window_offsets(s.duration, mc.window_seconds, stride):
                crops.append(crop_window(s.features, s.duration, off, mc.window_frames, mc.window_seconds))
                toks.append(s.tokens)
                owner.append(i)
                offsets.append(off)
        res = self._forward_groups(crops, toks)
        model = self.model_
        per_sample: list[list[ScoredWindow]] = [[] for _ in samples]
        for (logits, d_c, d_l), i, off in zip(res, owner, offsets):
            prob = _softmax(logits)
            fg = prob[:, 1:]
            cls = fg.argmax(axis=1)
            score = fg.max(axis=1)
            wins = decode_arrays(model.anchor_centers, model.anchor_lengths, d_c, d_l,
                                 mc.window_seconds) + off
            dur = samples[i].duration
            wins = np.clip(wins, 0.0, dur)
            multi = mc.num_classes > 1
            for a in range(len(wins)):
                if wins[a, 1] - wins[a, 0] <= 0:
                    continue
                per_sample[i].append(ScoredWindow(ClipWindow(float(wins[a, 0]), float(wins[a, 1])),
                                                  float(score[a]), int(cls[a]) if multi else None,
                                                  vids[i]))
        out = []
        for preds in per_sample:
            kept = nms(preds, ec.nms)
            out.append(sorted(kept, key=lambda p: -p.score))
        return out

    def predict(self, X) -> np.ndarray | list[ClipWindow]:
        """Best segment index (classification) or best window (detection) per sample."""
        check_is_fitted(self, "model_")
        if self.model_.mode == "classification":
            return np.argmax(self.decision_function(X), axis=1)
        return [r[0].window if r else None for r in self.predict_windows(X)]

    def score(self, X, y) -> float:
        """Rank@1 (classification) or Rank@1 at IoU 0.5 (detection)."""
        if self.config_.model.mode == "classification":
            return float(np.mean(self.predict(X) == np.asarray(y)))
        targets = check_window_targets(y)
        hits = [p is not None and any(iou(p, a.window) >= 0.5 for a in t)
                for p, t in zip(self.predict(X), targets)]
        return float(np.mean(hits))

    def attention_maps(self, X) -> list[list[np.ndarray]]:
        """Per sample, the ``(n, m)`` attention matrix of every fed layer."""
        check_is_fitted(self, "model_")
        samples = self._samples(X)
        res = self._forward_groups([s.features for s in samples], [s.tokens for s in samples], record=True)
        return [r[-1] for r in res]

    # -- persistence -----------------------------------------------------
    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "model_")
        state = self.trainer_.state
        meta = {
            "version": __version__,
            "config": self.config_.to_text(),
            "provenance": self.config_.provenance,
            "d_v": self.n_features_in_,
            "vocab_size": self.vocab_size_,
            "vocab_tokens": self.vocabulary_.tokens() if self.vocabulary_ is not None else None,
            "step": self.trainer_.step_count,
            "lr": lr_at(self.trainer_.schedule, self.trainer_.step_count),
            "optimizer": {"kind": state.kind, "step": state.step},
            "rng": self.trainer_.rng.bit_generator.state,
        }
        save_checkpoint(path, {n: p.data for n, p in self.model_.named_parameters()}, dict(self.model_.buffers()),
                        state.slots, json.loads(json.dumps(meta)))

    @classmethod
    def load(cls, path: str | Path, samples: Sequence | None = None, y=None) -> "ClipLocalizer":
        """Restore a checkpoint; pass training ``samples``/``y`` to resume training."""
        params, buffers, slots, meta = load_checkpoint(path)
        cfg = parse_config(meta["config"])
        cfg.provenance.update(meta.get("provenance", {}))
        vocab = None
        if meta.get("vocab_tokens") is not None:
            toks = meta["vocab_tokens"]
            emb = params.get("language.embedding", buffers.get("language.embedding"))
            vocab = Vocabulary({t: i for i, t in enumerate(toks)}, emb)
        est = cls(config=cfg, vocabulary=vocab)
        est.config_ = cfg
        est.vocabulary_ = vocab
        est.n_features_in_ = int(meta["d_v"])
        est.vocab_size_ = int(meta["vocab_size"])
        est.model_ = ASSTModel(cfg, est.n_features_in_, est.vocab_size_, seed=cfg.training.seed)
        own = dict(est.model_.named_parameters())
        missing = set(own) - set(params)
        if missing:
            raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, p in own.items():
            if p.shape != params[name].shape:
                raise ValueError(f"{name}: checkpoint shape {params[name].shape} != model {p.shape}")
            p.data[...] = params[name]
        for name, buf in est.model_.buffers():
            buf[...] = buffers[name]
        train_samples = est._samples(samples, y) if samples is not None else \
            [Sample(np.zeros((1, est.n_features_in_)), 1.0, np.zeros(1, np.int64))]
        est.trainer_ = Trainer(est.model_, cfg, train_samples)
        est.trainer_.step_count = int(meta["step"])
        est.trainer_.state.step = int(meta["optimizer"]["step"])
        est.trainer_.state.slots = {k: [a.copy() for a in v] for k, v in slots.items()}
        est.trainer_.rng.bit_generator.state = meta["rng"]
        return est
