"""Hot inner loops behind a numba/plain-numpy switch.

The decode path (connected components, RLE) runs per interactive prompt and
has a millisecond budget, so the default implementations are numba ``@njit``
kernels. Setting ``VOXELPROMPT_PURE_NUMPY=1`` (or running without numba
installed) selects the numpy/scipy fallbacks instead. Both paths implement
identical contracts; ``voxelprompt kernel-bench`` times them side by side.
"""

import os

PURE_NUMPY_ENV = "VOXELPROMPT_PURE_NUMPY"


def _numba_wanted() -> bool:
    if os.environ.get(PURE_NUMPY_ENV, "").strip().lower() in ("1", "true", "yes", "on"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


NUMBA_ACTIVE = _numba_wanted()

if NUMBA_ACTIVE:
    from . import _numba as _impl
else:
    from . import _numpy as _impl

label_components = _impl.label_components
rle_encode_flat = _impl.rle_encode_flat
rle_decode_flat = _impl.rle_decode_flat

ACTIVE_PATH = "numba" if NUMBA_ACTIVE else "numpy"

__all__ = [
    "ACTIVE_PATH",
    "NUMBA_ACTIVE",
    "PURE_NUMPY_ENV",
    "label_components",
    "rle_encode_flat",
    "rle_decode_flat",
]
