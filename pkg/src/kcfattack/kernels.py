"""Backend selection for the closed-loop step kernel.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels`` takes over.  Set ``KCFATTACK_BACKEND``
to ``python`` or ``compiled`` to force a choice.
"""
import os

from . import _pykernels
from .errors import ConfigurationError

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = ("compiled", "python")


def available_backends():
    return [b for b in BACKENDS if b == "python" or _ckernels is not None]


def get_backend(name=None):
    """Return the kernel module for ``name`` (``None`` means the default)."""
    name = name or DEFAULT_BACKEND
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _ckernels is None:
            raise ConfigurationError("the compiled kernel is not built; reinstall the package or use 'python'")
        return _ckernels
    raise ConfigurationError(f"unknown backend {name!r}; choose from {BACKENDS}")


def _default():
    requested = os.environ.get("KCFATTACK_BACKEND", "").strip().lower()
    if requested:
        get_backend(requested)
        return requested
    return "compiled" if _ckernels is not None else "python"


DEFAULT_BACKEND = _default()
