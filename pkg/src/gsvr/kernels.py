"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy twin.
Set ``GSVR_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

logger = logging.getLogger(__name__)

if os.environ.get("GSVR_PURE_PYTHON", "") not in ("", "0"):
    from . import _core_py as backend
    BACKEND = "python"
else:
    try:
        from . import _core as backend
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        logger.warning("compiled kernels unavailable, using numpy fallback")
        from . import _core_py as backend
        BACKEND = "python"

from . import _core_py as python_backend  # noqa: E402

build_cells = backend.build_cells
field_forward = backend.field_forward
field_backward = backend.field_backward

__all__ = ["BACKEND", "backend", "python_backend", "build_cells",
           "field_forward", "field_backward"]
