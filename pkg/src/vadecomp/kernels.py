"""Backend selection for the voxel kernels.

The compiled extension is used when importable; set ``VADECOMP_PURE_PYTHON=1``
to force the numpy fallback.  ``BACKEND`` names the active one.
"""

import os

from . import _pykernels

if os.environ.get("VADECOMP_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

scatter_trilinear = _impl.scatter_trilinear
scatter_nearest = _impl.scatter_nearest
gather_trilinear = _impl.gather_trilinear
crosstalk = _impl.crosstalk
