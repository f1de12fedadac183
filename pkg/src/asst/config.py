"""Run configuration: typed sections with desk-scale defaults.

Files are ``key = value`` lines under ``[section]`` headers.  Keys before the
first header may be written with a dotted prefix (``training.lr = 5e-4``).
Unknown sections or keys are rejected.  Full-scale values are documented
per field and can be set from a file.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class VideoConfig:
    n_dilation: int = 4
    n_squeeze: int = 6
    n_expand: int = 6
    c_dil: int = 64          # full scale: 1024
    c_se: int = 32           # full scale: 512
    attention_feed: str = "all"
    d_a: int = 0             # 0 means "same as the visual channel count"
    squeeze_expand: bool = True


@dataclass
class LanguageConfig:
    d: int = 32              # full scale: 512
    n_layers: int = 1
    d_w: int = 16            # full scale: 300 (GloVe)
    freeze_embeddings: bool = False
    embeddings: str = ""


@dataclass
class ModelConfig:
    mode: str = "classification"
    head_hidden: int = 32
    tef: str = "pooled"      # none | pooled | frame
    num_classes: int = 1
    n_segments: int = 6
    segment_length: float = 5.0
    window_frames: int = 64
    window_seconds: float = 30.0


@dataclass
class DropoutConfig:
    input: float = 0.5
    hidden: float = 0.8


@dataclass
class TrainingConfig:
    optimizer: str = "adam"  # adam | sgd
    lr: float = 5e-4
    lr_decay: float = 0.9
    lr_interval: int = 2500
    momentum: float = 0.9
    batch_size: int = 16     # full scale: 128
    steps: int = 3000
    pos_iou: float = 0.5
    neg_ratio: float = 1.0
    mohem: bool = False
    reg_weight: float = 1.0
    augment: bool = True
    scale_min: float = 0.8
    scale_max: float = 1.25
    min_visible: float = 0.5
    seed: int = 0
    checkpoint_every: int = 1000


@dataclass
class EvalConfig:
    nms: float = 0.8
    stride: float = 0.0      # seconds; 0 means half the model window
    top_k: int = 5
    ap_mode: str = "every_point"


@dataclass
class SynthConfig:
    n_videos: int = 500
    n_test: int = 100
    m: int = 64
    d_v: int = 16
    duration: float = 30.0
    n_patterns: int = 8
    noise_std: float = 0.3
    amplitude: float = 1.0
    mode: str = "classification"
    n_distractors: int = 0
    query_fillers: int = 0
    d_w: int = 16
    seed: int = 0


SECTIONS = {
    "video": VideoConfig,
    "language": LanguageConfig,
    "model": ModelConfig,
    "dropout": DropoutConfig,
    "training": TrainingConfig,
    "eval": EvalConfig,
    "synth": SynthConfig,
}


@dataclass
class Config:
    video: VideoConfig = field(default_factory=VideoConfig)
    language: LanguageConfig = field(default_factory=LanguageConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.provenance:
            self.provenance = {f"{s}.{f.name}": "default"
                               for s, cls in SECTIONS.items() for f in fields(cls)}

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}

    def set(self, dotted: str, value: Any, source: str = "override") -> None:
        section, key = _split_key(dotted)
        target = getattr(self, section)
        setattr(target, key, _coerce(dotted, value, _field_type(SECTIONS[section], key)))
        self.provenance[dotted] = source
        validate(self)

    def copy(self) -> "Config":
        new = Config(**{s: dataclasses.replace(getattr(self, s)) for s in SECTIONS})
        new.provenance = dict(self.provenance)
        return new

    def to_text(self) -> str:
        lines = []
        for s in SECTIONS:
            lines.append(f"[{s}]")
            for k, v in dataclasses.asdict(getattr(self, s)).items():
                lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)


def _split_key(dotted: str) -> tuple[str, str]:
    if "." not in dotted:
        raise ConfigError(f"key {dotted!r} needs a section prefix")
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown section {section!r}")
    if key not in {f.name for f in fields(SECTIONS[section])}:
        raise ConfigError(f"unknown key {dotted!r}")
    return section, key


def _field_type(cls, key: str) -> type:
    return {f.name: f.type for f in fields(cls)}[key]


def _coerce(name: str, value: Any, typ) -> Any:
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
    if not isinstance(value, str):
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
            return value
        value = str(value)
    text = value.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: expected {typ.__name__}, got {value!r}") from None


def validate(cfg: Config) -> None:
    v, lang, mdl, tr = cfg.video, cfg.language, cfg.model, cfg.training
    checks = [
        (v.n_dilation >= 1, "video.n_dilation must be >= 1"),
        (v.n_squeeze >= 0, "video.n_squeeze must be >= 0"),
        (0 <= v.n_expand <= v.n_squeeze, "video.n_expand must lie in [0, n_squeeze]"),
        (not v.squeeze_expand or v.n_expand >= 1, "video.n_expand must be >= 1 with squeeze_expand"),
        (v.c_dil >= 1 and v.c_se >= 1, "video channel counts must be >= 1"),
        (v.attention_feed in ("none", "first_dilation", "last_dilation", "final_rep", "all"),
         f"video.attention_feed has unknown value {v.attention_feed!r}"),
        (lang.d >= 1 and lang.d_w >= 1, "language widths must be >= 1"),
        (lang.n_layers >= 1, "language.n_layers must be >= 1"),
        (mdl.mode in ("classification", "detection"), f"model.mode has unknown value {mdl.mode!r}"),
        (mdl.tef in ("none", "pooled", "frame"), f"model.tef has unknown value {mdl.tef!r}"),
        (mdl.num_classes >= 1, "model.num_classes must be >= 1"),
        (mdl.n_segments >= 1, "model.n_segments must be >= 1"),
        (mdl.window_frames >= 1 and mdl.window_seconds > 0, "model window must be positive"),
        (0 < cfg.dropout.input <= 1 and 0 < cfg.dropout.hidden <= 1, "dropout floors must lie in (0, 1]"),
        (tr.optimizer in ("adam", "sgd"), f"training.optimizer has unknown value {tr.optimizer!r}"),
        (tr.lr > 0, "training.lr must be positive"),
        (tr.lr_interval >= 1, "training.lr_interval must be >= 1"),
        (tr.batch_size >= 1, "training.batch_size must be >= 1"),
        (tr.steps >= 0, "training.steps must be >= 0"),
        (0 < tr.scale_min <= tr.scale_max, "training scale range invalid"),
        (0.0 <= cfg.eval.nms <= 1.0, "eval.nms must lie in [0, 1]"),
        (cfg.eval.ap_mode in ("every_point", "11point"), "eval.ap_mode must be every_point or 11point"),
        (cfg.synth.n_videos >= 1, "synth.n_videos must be >= 1"),
        (cfg.synth.n_patterns >= 2, "synth.n_patterns must be >= 2"),
        (cfg.synth.amplitude >= 0, "synth.amplitude must be >= 0"),
        (cfg.synth.mode in ("classification", "detection"), "synth.mode must be classification or detection"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def parse_config(text: str) -> Config:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string("[__root__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = Config()
    for section in parser.sections():
        for key, value in parser.items(section):
            dotted = key if section == "__root__" else f"{section}.{key}"
            if section != "__root__" and section not in SECTIONS:
                raise ConfigError(f"unknown section {section!r}")
            sec, k = _split_key(dotted)
            setattr(getattr(cfg, sec), k, _coerce(dotted, value, _field_type(SECTIONS[sec], k)))
            cfg.provenance[dotted] = "file"
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text(encoding="utf-8"))
