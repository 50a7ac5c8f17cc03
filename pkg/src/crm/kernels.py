"""Kernel backend selection.

The compiled Cython module is used when it was built and imports cleanly;
otherwise the numpy versions are used. Set ``CRM_PURE_PYTHON=1`` to force the
fallback.
"""
import logging
import os

from crm import _kernels_py

logger = logging.getLogger(__name__)

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CRM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from crm import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        logger.debug("compiled kernels unavailable, using numpy fallback")
        _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
conv2d_padded = getattr(_impl, "conv2d_padded", None)
conv2d_weight_grad_padded = getattr(_impl, "conv2d_weight_grad_padded", None)

# The direct loops beat im2col + BLAS for narrow layers only; wide ones and
# channel counts off the 8-wide tile go through BLAS.
DIRECT_MAX_CHANNEL_PRODUCT = 2048


def use_direct_conv(k: int, cin: int, cout: int) -> bool:
    return (
        conv2d_padded is not None
        and k > 1
        and cin % 8 == 0
        and cout % 8 == 0
        and cin * cout <= DIRECT_MAX_CHANNEL_PRODUCT
    )


__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool2_forward",
    "maxpool2_backward",
    "conv2d_padded",
    "conv2d_weight_grad_padded",
    "use_direct_conv",
]
