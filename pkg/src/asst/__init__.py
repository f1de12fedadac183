"""Attentive sequence-to-sequence translation for localizing clips by token queries."""

__version__ = "0.1.0"

from .config import Config, load_config, parse_config  # noqa: E402
from .heads import Anchor, ClipWindow  # noqa: E402

__all__ = ["Anchor", "ClipLocalizer", "ClipWindow", "Config", "FeatureSequence",
           "load_config", "parse_config", "__version__"]

# model code loads on first use so metric-only tools stay light
_LAZY = {"ClipLocalizer": "estimator", "FeatureSequence": "video"}


def __getattr__(name):
    if name in _LAZY:
        import importlib

        value = getattr(importlib.import_module(f".{_LAZY[name]}", __name__), name)
        globals()[name] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
