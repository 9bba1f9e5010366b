"""Fallback kernel implementations (numpy + scipy), used when numba is off."""

import numpy as np
from scipy import ndimage

# 4-connectivity: no diagonal neighbors
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.int32)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 4-connected components of a binary 2D mask.

    Returns (labels, count) where labels is int32, 0 = background and
    components are numbered 1..count. Numbering is an implementation detail;
    only the partition is contractual.
    """
    labels, count = ndimage.label(mask, structure=_CROSS)
    return labels.astype(np.int32, copy=False), int(count)


def rle_encode_flat(flat: np.ndarray) -> np.ndarray:
    """Run lengths of a flat binary array, alternating and starting with a
    0-run (length 0 if the array starts with 1)."""
    n = flat.size
    if n == 0:
        return np.zeros(1, dtype=np.uint32)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.empty(change.size + 2, dtype=np.int64)
    bounds[0] = 0
    bounds[1:-1] = change
    bounds[-1] = n
    runs = np.diff(bounds)
    if flat[0] != 0:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def rle_decode_flat(runs: np.ndarray, n: int) -> np.ndarray:
    """Expand alternating run lengths (0-run first) to a flat uint8 array.

    Assumes the runs were validated (sum == n); see protocol.rle_decode.
    """
    vals = np.zeros(runs.size, dtype=np.uint8)
    vals[1::2] = 1
    return np.repeat(vals, runs.astype(np.int64))
