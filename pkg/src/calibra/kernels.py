"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback is used. ``CALIBRA_PURE=1`` forces the fallback.
"""
import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

_impl = _kernels_py
BACKEND = "python"

if os.environ.get("CALIBRA_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels_c as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        logger.debug("compiled kernels unavailable, using numpy fallback")

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
