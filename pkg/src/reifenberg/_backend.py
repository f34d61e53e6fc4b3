"""Pick the compiled kernels when they were built, otherwise the numpy fallback.

Set ``REIFENBERG_FORCE_PYTHON=1`` to force the fallback (used by the
benchmark and by the backend-equivalence tests).
"""
import os

from . import _fallback

BACKEND = "python"
project_union = _fallback.project_union

if os.environ.get("REIFENBERG_FORCE_PYTHON", "") != "1":
    try:
        from . import _kernels

        project_union = _kernels.project_union
        BACKEND = "cython"
    except ImportError:  # extension not built
        pass
