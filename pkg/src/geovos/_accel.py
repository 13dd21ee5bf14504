"""Numba acceleration shim.

Hot kernels in :mod:`geovos.kernels` exist in two lanes: a numba ``@njit``
loop and a vectorized numpy fallback. The lane is picked once at import:

* ``GEOVOS_NUMBA=0`` (or ``false``/``off``/``no``) forces the numpy lane.
* If numba is not importable, the numpy lane is used silently.

Both lanes compute the same IEEE-754 arithmetic expression per element, so
results agree bit-for-bit on the same inputs.
"""

import os


def _env_wants_numba() -> bool:
    val = os.environ.get("GEOVOS_NUMBA", "1").strip().lower()
    return val not in ("0", "false", "off", "no")


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    numba = None
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and _env_wants_numba()


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise.

    The decorated python function stays usable either way; without numba it
    simply runs as interpreted python (the dispatchers in ``kernels`` never
    call that slow path, they switch to the numpy lane instead).
    """
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)

    def _identity(fn):
        return fn

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return _identity
