"""pQRNN: embedding-free projection QRNN for joint intent and slot parsing.

Submodules are imported lazily so the CLI can pin thread-count environment
variables before numpy loads.
"""
import importlib

_SUBMODULES = ("tensor", "projection", "encoder", "model", "training", "data", "cli", "errors")

__all__ = list(_SUBMODULES)
__version__ = "0.1.0"


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
