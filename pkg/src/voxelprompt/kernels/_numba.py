"""Numba-jitted kernel implementations (default path)."""

import numpy as np
from numba import njit


@njit(cache=True)
def _label_components_impl(mask, labels):
    rows, cols = mask.shape
    stack = np.empty(rows * cols, dtype=np.int64)
    current = 0
    for r0 in range(rows):
        for c0 in range(cols):
            if mask[r0, c0] == 0 or labels[r0, c0] != 0:
                continue
            current += 1
            top = 0
            stack[top] = r0 * cols + c0
            top += 1
            labels[r0, c0] = current
            while top > 0:
                top -= 1
                idx = stack[top]
                r = idx // cols
                c = idx - r * cols
                if r > 0 and mask[r - 1, c] != 0 and labels[r - 1, c] == 0:
                    labels[r - 1, c] = current
                    stack[top] = idx - cols
                    top += 1
                if r + 1 < rows and mask[r + 1, c] != 0 and labels[r + 1, c] == 0:
                    labels[r + 1, c] = current
                    stack[top] = idx + cols
                    top += 1
                if c > 0 and mask[r, c - 1] != 0 and labels[r, c - 1] == 0:
                    labels[r, c - 1] = current
                    stack[top] = idx - 1
                    top += 1
                if c + 1 < cols and mask[r, c + 1] != 0 and labels[r, c + 1] == 0:
                    labels[r, c + 1] = current
                    stack[top] = idx + 1
                    top += 1
    return current


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 4-connected components; see the fallback twin for the contract."""
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    labels = np.zeros(m.shape, dtype=np.int32)
    count = _label_components_impl(m, labels)
    return labels, int(count)


@njit(cache=True)
def _rle_encode_impl(flat, out):
    n = flat.size
    k = 0
    prev = np.uint8(0)
    run = np.uint32(0)
    for i in range(n):
        v = flat[i]
        if v == prev:
            run += np.uint32(1)
        else:
            out[k] = run
            k += 1
            prev = v
            run = np.uint32(1)
    out[k] = run
    return k + 1


def rle_encode_flat(flat: np.ndarray) -> np.ndarray:
    f = np.ascontiguousarray(flat, dtype=np.uint8)
    if f.size == 0:
        return np.zeros(1, dtype=np.uint32)
    out = np.empty(f.size + 1, dtype=np.uint32)
    k = _rle_encode_impl(f, out)
    return out[:k].copy()


@njit(cache=True)
def _rle_decode_impl(runs, out):
    pos = np.int64(0)
    val = np.uint8(0)
    for i in range(runs.size):
        length = np.int64(runs[i])
        if val == 1:
            for j in range(pos, pos + length):
                out[j] = 1
        pos += length
        val = np.uint8(1) - val


def rle_decode_flat(runs: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.uint8)
    _rle_decode_impl(np.ascontiguousarray(runs, dtype=np.uint32), out)
    return out
