"""Hot conv/pool kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Set ``VOXBAYES_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("VOXBAYES_PURE_PYTHON", "") not in ("1", "true"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

im2col3d = _impl.im2col3d
col2im3d = _impl.col2im3d
maxpool3d_forward = _impl.maxpool3d_forward
maxpool3d_backward = _impl.maxpool3d_backward

__all__ = ["BACKEND", "im2col3d", "col2im3d", "maxpool3d_forward", "maxpool3d_backward"]
