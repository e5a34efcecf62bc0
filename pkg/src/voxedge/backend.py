"""Kernel backend selection.

The hot numeric kernels in :mod:`voxedge.kernels` come in two variants: explicit
loops compiled with numba's ``@njit``, and vectorized pure-numpy equivalents.
The active variant is chosen once, at import time, from the ``VOXEDGE_BACKEND``
environment variable:

* ``numba``: require numba; raise if it cannot be imported.
* ``numpy``: use the pure-numpy fallback even when numba is installed.
* unset or ``auto``: use numba when importable, numpy otherwise.

When numba is installed, the loop variants are always defined (compilation is
lazy), so ``python -m voxedge.benchmark`` can time both variants side by side
regardless of which one is active.
"""

import os

_requested = os.environ.get("VOXEDGE_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"VOXEDGE_BACKEND must be 'numba', 'numpy' or 'auto', got {_requested!r}"
    )

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    _njit = None
    HAVE_NUMBA = False

if _requested == "numba" and not HAVE_NUMBA:
    raise ImportError("VOXEDGE_BACKEND=numba but numba is not importable")

#: Name of the active kernel backend, either "numba" or "numpy".
ACTIVE = "numba" if (HAVE_NUMBA and _requested != "numpy") else "numpy"


def compile_loops(fn):
    """Return the numba-compiled version of a loop kernel, or fn unchanged.

    Compilation is deferred to the first call, so merely importing the kernels
    costs nothing even when numba is present.
    """
    if HAVE_NUMBA:
        return _njit(cache=True)(fn)
    return fn
