"""Select the kernel implementation at import time.

The compiled extension is used when it imports cleanly, unless the
environment variable ``SIMTRAJ_PURE_PYTHON`` is set to a non-empty value
other than ``0``.
"""

import os

from . import _pykernels

_force_python = os.environ.get("SIMTRAJ_PURE_PYTHON", "") not in ("", "0")

try:
    from . import _ckernels as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and not _force_python:
    kernels = compiled
    NAME = "cython"
else:
    kernels = _pykernels
    NAME = "python"


def get(name=None):
    """Return the kernel module called ``name`` (``"cython"`` or ``"python"``)."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython":
        if compiled is None:
            raise ImportError("the compiled kernel extension simtraj._ckernels is not available")
        return compiled
    raise ValueError(f"unknown kernel backend {name!r}")
