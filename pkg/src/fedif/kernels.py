"""Backend selection for the hot loops.

The compiled Cython module is used when it was built; otherwise (or when the
environment variable ``FEDIF_PURE_PYTHON`` is set to a non-empty value other
than ``0``) the numpy implementation is used. Both expose the same functions:
``forward``, ``loss_grad``, ``input_grad``, ``train_epochs`` and
``pairwise_sq_dists``.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def available() -> list[str]:
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "compiled")
    return names


def get(name: str) -> ModuleType:
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def _select() -> ModuleType:
    if os.environ.get("FEDIF_PURE_PYTHON", "") not in ("", "0"):
        return _kernels_py
    return _compiled if _compiled is not None else _kernels_py


impl = _select()
BACKEND = impl.NAME


def use(name: str) -> None:
    """Switch the process-wide backend (mainly for tests and benchmarks)."""
    global impl, BACKEND
    impl = get(name)
    BACKEND = impl.NAME
