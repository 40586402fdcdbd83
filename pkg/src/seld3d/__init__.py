"""Sound event localization, detection and distance estimation toolkit.

Modules: ``core`` (events, metadata, geometry), ``features`` (FOA and
binaural input tensors), ``codec`` (multi-ACCDDOA and multi-task targets),
``losses``, ``metrics``, ``simulate`` (synthetic scenes), ``model`` (a small
trainable baseline) and ``cli``.
"""
from .core import CLASS_NAMES, NUM_CLASSES, NUM_TRACKS, ClipSpec, EventRecord

__version__ = "0.1.0"

__all__ = ["CLASS_NAMES", "NUM_CLASSES", "NUM_TRACKS", "ClipSpec", "EventRecord", "__version__"]
