"""Backend selection for the hot loops.

The compiled extension is used when it imports; ``EMSBRQ_PURE_PYTHON=1`` forces the
numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("EMSBRQ_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

scatter_convolve = _impl.scatter_convolve
suffix_discount = _impl.suffix_discount
feinstein_batch = _impl.feinstein_batch
