"""Dual-student weakly-supervised segmentation on a minimal numpy autodiff kernel.

Submodules are imported lazily so the CLI can cap BLAS threads before numpy
loads (see the DUPL_THREADS environment variable).
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff", "optim", "gradcheck", "model", "cam", "filtering",
    "losses", "data", "metrics", "config", "train", "cli", "errors",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
