"""Select the compiled kernels or the numpy fallback at import time.

Set ``JOINTPLAN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from jointplan import _pykernels

kernels = _pykernels
COMPILED = False

if not os.environ.get("JOINTPLAN_PURE_PYTHON"):
    try:
        from jointplan import _ckernels
    except ImportError:
        pass
    else:
        kernels = _ckernels
        COMPILED = True

BACKEND = "cython" if COMPILED else "python"
