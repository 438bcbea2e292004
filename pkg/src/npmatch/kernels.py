"""Hot-kernel dispatch.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy implementations in ``_kernels_py`` are used. Setting the environment
variable ``NPMATCH_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py as python

try:
    from . import _kernels as native
except ImportError:
    native = None

if native is not None and not os.environ.get("NPMATCH_PURE_PYTHON"):
    _impl = native
    BACKEND = "cython"
else:
    _impl = python
    BACKEND = "python"

softmax_rows = _impl.softmax_rows
log_softmax_rows = _impl.log_softmax_rows
logistic = _impl.logistic
relu = _impl.relu
relu_grad = _impl.relu_grad
row_entropy = _impl.row_entropy
pair_relu = _impl.pair_relu
pair_relu_grad = _impl.pair_relu_grad
im2col = _impl.im2col
col2im = _impl.col2im

__all__ = [
    "BACKEND",
    "native",
    "python",
    "softmax_rows",
    "log_softmax_rows",
    "logistic",
    "relu",
    "relu_grad",
    "row_entropy",
    "pair_relu",
    "pair_relu_grad",
    "im2col",
    "col2im",
]
