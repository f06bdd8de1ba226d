"""Backend selection for the propagation kernels.

Prefers the compiled extension when it was built; falls back to the
pure-numpy implementation otherwise.  Set STOCHLM_PURE_PYTHON=1 to force
the fallback (used by the benchmark and the equivalence tests).
"""

import os

from . import _lorenz_py

if os.environ.get("STOCHLM_PURE_PYTHON"):
    _impl = _lorenz_py
    BACKEND = "python"
else:
    try:
        from . import _lorenz_cy as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _lorenz_py
        BACKEND = "python"

lorenz_trajectory = _impl.lorenz_trajectory
lorenz_trajectory_batch = _impl.lorenz_trajectory_batch
