"""Kernel backend selection.

The hot kernels exist twice: numba-compiled (_kernels_numba) and pure
numpy/scipy (_kernels_numpy). The HANDPOSE_BACKEND environment variable
picks one at import time:

    auto   (default) numba when importable, else numpy
    numba  require numba, fail loudly if missing
    numpy  force the fallback

`handpose bench --compare-backends` times both implementations side by
side regardless of this setting.
"""

from __future__ import annotations

import os

from .errors import ConfigError

_ENV_VAR = "HANDPOSE_BACKEND"
_requested = os.environ.get(_ENV_VAR, "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ConfigError(
        f"{_ENV_VAR}={_requested!r} not understood; use auto, numba or numpy"
    )

if _requested == "numpy":
    from . import _kernels_numpy as _impl
else:
    try:
        from . import _kernels_numba as _impl
    except ImportError:
        if _requested == "numba":
            raise
        from . import _kernels_numpy as _impl

BACKEND = _impl.BACKEND_NAME

pair_responses = _impl.pair_responses
node_split = _impl.node_split
route_forest = _impl.route_forest
route_tree = _impl.route_tree
edt_sq = _impl.edt_sq
nearest_joint = _impl.nearest_joint
trace_loop = _impl.trace_loop


def available_backends():
    """Names of importable kernel implementations."""
    names = ["numpy"]
    try:
        from . import _kernels_numba  # noqa: F401

        names.insert(0, "numba")
    except ImportError:
        pass
    return names
