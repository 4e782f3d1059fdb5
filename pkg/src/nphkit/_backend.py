"""Numba/numpy backend selection.

Hot loops (trial simulation, quasi Monte Carlo integration) are written
twice: a scalar kernel decorated with ``@njit`` and a vectorized numpy
fallback. Which one runs is decided once at import time:

* ``NPHKIT_BACKEND=numba``  require numba, raise if it will not import
* ``NPHKIT_BACKEND=numpy``  force the fallback even if numba is present
* ``NPHKIT_BACKEND=auto``   (default) use numba when importable

Both paths produce bit-identical simulated datasets; aggregate statistics
can differ in the last few ulps because summation order differs.
"""

import os

_choice = os.environ.get("NPHKIT_BACKEND", "auto").lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"NPHKIT_BACKEND must be one of auto|numba|numpy, got {_choice!r}"
    )

if _choice == "numpy":
    HAVE_NUMBA = False
else:
    try:
        import numba  # noqa: F401

        HAVE_NUMBA = True
    except ImportError:
        if _choice == "numba":
            raise ImportError(
                "NPHKIT_BACKEND=numba but numba is not installed"
            ) from None
        HAVE_NUMBA = False

USING_NUMBA = HAVE_NUMBA  # alias kept for introspection in benchmarks

if HAVE_NUMBA:
    from numba import njit
else:

    def njit(*args, **kwargs):
        """No-op stand-in so kernel modules import unchanged."""

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap


def backend_name() -> str:
    return "numba" if USING_NUMBA else "numpy"
