"""On-disk formats: binary feature files, JSON annotations/predictions, checkpoints.

Feature file layout (little endian)::

    magic   4 bytes  b"ASST"
    version u32      1
    m       u32      frames (>= 1)
    d_v     u32      channels
    rate    f64      frames per second
    tau     f64      duration in seconds
    payload m * d_v f64, row major
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .heads import ClipWindow
from .metrics import ScoredWindow

MAGIC = b"ASST"
VERSION = 1
_HEADER = struct.Struct("<4sIIIdd")


class FormatError(ValueError):
    pass


@dataclass
class FeatureFile:
    features: np.ndarray
    frame_rate: float
    duration: float

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def d_v(self) -> int:
        return self.features.shape[1]


def encode_features(ff: FeatureFile) -> bytes:
    feats = np.asarray(ff.features)
    if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
        raise FormatError(f"feature matrix must be (m >= 1, d_v >= 1), got {feats.shape}")
    header = _HEADER.pack(MAGIC, VERSION, feats.shape[0], feats.shape[1],
                          float(ff.frame_rate), float(ff.duration))
    return header + np.ascontiguousarray(feats, dtype="<f8").tobytes()


def decode_features(raw: bytes) -> FeatureFile:
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(raw)}")
    magic, version, m, d_v, rate, tau = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if m < 1:
        raise FormatError("feature file must hold at least one frame")
    expected = m * d_v * 8
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise FormatError(f"payload size mismatch: expected {expected} bytes, got {actual}")
    feats = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(m, d_v).astype(np.float64)
    return FeatureFile(feats, rate, tau)


def write_features(path: str | Path, ff: FeatureFile) -> None:
    Path(path).write_bytes(encode_features(ff))


def read_features(path: str | Path) -> FeatureFile:
    return decode_features(Path(path).read_bytes())


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------------------------------------------------
# annotations
# ----------------------------------------------------------------------


@dataclass
class Description:
    tokens: list
    clips: list[ClipWindow]
    segment_index: int | None = None
    label: int = 0

    def to_dict(self) -> dict:
        d = {"tokens": list(self.tokens), "clips": [c.as_list() for c in self.clips],
             "label": self.label}
        if self.segment_index is not None:
            d["segment_index"] = self.segment_index
        return d


@dataclass
class VideoRecord:
    video_id: str
    duration: float
    features: str
    descriptions: list[Description] = field(default_factory=list)
    split: str = "train"


@dataclass
class AnnotationSet:
    videos: list[VideoRecord]
    mode: str = "classification"
    n_segments: int = 6
    segment_length: float = 5.0

    def by_id(self) -> dict[str, VideoRecord]:
        return {v.video_id: v for v in self.videos}

    def split(self, name: str) -> list[VideoRecord]:
        return [v for v in self.videos if v.split == name]


def annotations_to_dict(ann: AnnotationSet) -> dict:
    return {
        "version": 1,
        "mode": ann.mode,
        "n_segments": ann.n_segments,
        "segment_length": ann.segment_length,
        "videos": [{"video_id": v.video_id, "duration": v.duration, "features": v.features,
                    "split": v.split, "descriptions": [d.to_dict() for d in v.descriptions]}
                   for v in ann.videos],
    }


def annotations_from_dict(d: dict) -> AnnotationSet:
    n_seg = int(d.get("n_segments", 6))
    videos = []
    for v in d["videos"]:
        dur = float(v["duration"])
        descs = []
        for desc in v.get("descriptions", []):
            clips = [ClipWindow(float(s), float(e)) for s, e in desc.get("clips", [])]
            for c in clips:
                if not (0 <= c.start < c.end <= dur + 1e-9):
                    raise FormatError(f"{v['video_id']}: clip {c.as_list()} outside [0, {dur}]")
            seg = desc.get("segment_index")
            if seg is not None and not 0 <= seg < n_seg * (n_seg + 1) // 2:
                raise FormatError(f"{v['video_id']}: segment_index {seg} out of range")
            descs.append(Description(desc["tokens"], clips, seg, int(desc.get("label", 0))))
        videos.append(VideoRecord(str(v["video_id"]), dur, v.get("features", ""), descs,
                                  v.get("split", "train")))
    return AnnotationSet(videos, d.get("mode", "classification"), n_seg,
                         float(d.get("segment_length", 5.0)))


def write_annotations(path: str | Path, ann: AnnotationSet) -> None:
    Path(path).write_text(json.dumps(annotations_to_dict(ann), indent=1), encoding="utf-8")


def read_annotations(path: str | Path) -> AnnotationSet:
    return annotations_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ----------------------------------------------------------------------
# predictions
# ----------------------------------------------------------------------


def write_predictions(path: str | Path, preds: Sequence[ScoredWindow],
                      query_ids: Sequence[int] | None = None) -> None:
    recs = []
    for i, p in enumerate(preds):
        d = p.to_dict()
        d["query_id"] = 0 if query_ids is None else int(query_ids[i])
        recs.append(d)
    Path(path).write_text(json.dumps({"predictions": recs}, indent=1), encoding="utf-8")


def read_predictions(path: str | Path) -> list[tuple[int, ScoredWindow]]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    recs = d["predictions"] if isinstance(d, dict) else d
    return [(int(r.get("query_id", 0)), ScoredWindow.from_dict(r)) for r in recs]


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray],
                    optimizer: dict[str, Sequence[np.ndarray]], meta: dict[str, Any]) -> None:
    """Named little-endian f64 arrays plus a JSON metadata blob, stored as npz."""
    arrays = {}
    for name, a in params.items():
        arrays[f"param/{name}"] = np.asarray(a, dtype="<f8")
    for name, a in buffers.items():
        arrays[f"buffer/{name}"] = np.asarray(a, dtype="<f8")
    for name, slots in optimizer.items():
        for i, a in enumerate(slots):
            arrays[f"opt/{name}/{i}"] = np.asarray(a, dtype="<f8")
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    arrays["meta"] = np.frombuffer(blob, dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path):
    with np.load(path) as z:
        params, buffers, opt = {}, {}, {}
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        for key in z.files:
            if key.startswith("param/"):
                params[key[6:]] = z[key].astype(np.float64)
            elif key.startswith("buffer/"):
                buffers[key[7:]] = z[key].astype(np.float64)
            elif key.startswith("opt/"):
                name, idx = key[4:].rsplit("/", 1)
                opt.setdefault(name, {})[int(idx)] = z[key].astype(np.float64)
    optimizer = {k: [v[i] for i in sorted(v)] for k, v in opt.items()}
    return params, buffers, optimizer, meta
