"""Independent reference implementations the tests compare against.

Everything here is deliberately written the slow, obvious way (pure Python
loops, BFS with explicit queues, histogram scans) and shares no code with
the package. When a test asserts impl == oracle, the two sides must have
arrived at the answer along different routes.
"""

from collections import deque
from typing import List, Optional, Sequence, Tuple

import numpy as np

Point = Tuple[int, int]


def naive_rle_encode(flat: Sequence[int]) -> List[int]:
    """Alternating run lengths starting with a (possibly empty) zero-run."""
    runs = []
    current = 0
    count = 0
    for v in flat:
        bit = 1 if v else 0
        if bit == current:
            count += 1
        else:
            runs.append(count)
            current = bit
            count = 1
    runs.append(count)
    if not flat:
        return [0]
    return runs


def naive_rle_decode(runs: Sequence[int], n: int) -> List[int]:
    out = []
    bit = 0
    for r in runs:
        out.extend([bit] * r)
        bit ^= 1
    assert len(out) == n, f"runs decode to {len(out)} values, wanted {n}"
    return out


def bfs_components(mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """4-connected labeling with breadth-first search, labels 1..n."""
    rows, cols = mask.shape
    labels = np.zeros((rows, cols), dtype=np.int32)
    nxt = 0
    for sr in range(rows):
        for sc in range(cols):
            if not mask[sr, sc] or labels[sr, sc]:
                continue
            nxt += 1
            q = deque([(sr, sc)])
            labels[sr, sc] = nxt
            while q:
                r, c = q.popleft()
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < rows and 0 <= cc < cols \
                            and mask[rr, cc] and not labels[rr, cc]:
                        labels[rr, cc] = nxt
                        q.append((rr, cc))
    return labels, nxt


def rect_sum_direct(plane: np.ndarray, r0: int, c0: int, r1: int, c1: int) -> int:
    """Inclusive-bound sum by plain iteration, exact integers."""
    total = 0
    for r in range(r0, r1 + 1):
        for c in range(c0, c1 + 1):
            total += int(plane[r, c])
    return total


def brute_otsu(hist: Sequence[int]) -> Optional[int]:
    """Between-class argmax over thresholds 1..255, first maximum wins.

    hist has 256 integer bins. Returns None when no threshold separates
    two nonempty classes.
    """
    n = sum(hist)
    s = sum(i * h for i, h in enumerate(hist))
    best_t = None
    best_obj = -1.0
    w0 = 0
    s0 = 0
    for t in range(1, 256):
        w0 += hist[t - 1]
        s0 += (t - 1) * hist[t - 1]
        if w0 == 0 or w0 == n:
            continue
        a = n * s0 - s * w0
        obj = float(a) ** 2 / float(w0 * (n - w0))
        if obj > best_obj:
            best_obj = obj
            best_t = t
    return best_t


def brute_decode(q8: np.ndarray, positive: Sequence[Point] = (),
                 negative: Sequence[Point] = (),
                 bbox: Optional[Tuple[int, int, int, int]] = None
                 ) -> Tuple[np.ndarray, float]:
    """Flood-fill reference segmentation over an 8-bit plane.

    Returns (bitmap uint8, score). Mirrors the documented decode contract
    step by step, with plain loops everywhere.
    """
    rows, cols = q8.shape
    if bbox is not None:
        r0, c0, r1, c1 = bbox
    else:
        r0, c0, r1, c1 = 0, 0, rows - 1, cols - 1

    def in_region(r: int, c: int) -> bool:
        return r0 <= r <= r1 and c0 <= c <= c1

    region_points = [(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]
    n = len(region_points)
    total = sum(int(q8[r, c]) for r, c in region_points)
    total_sq = sum(int(q8[r, c]) ** 2 for r, c in region_points)

    bitmap = np.zeros((rows, cols), dtype=np.uint8)

    # flat region: everything in R is the object
    if n * total_sq - total * total < n * n:
        for r, c in region_points:
            bitmap[r, c] = 1
        return bitmap, 0.5

    hist = [0] * 256
    for r, c in region_points:
        hist[int(q8[r, c])] += 1
    t = brute_otsu(hist)
    assert t is not None, "non-flat region must have a separating threshold"

    if positive:
        seed = positive[0]
    else:
        seed = ((r0 + r1) // 2, (c0 + c1) // 2)
    seed_high = int(q8[seed[0], seed[1]]) >= t

    def on_side(r: int, c: int) -> bool:
        v = int(q8[r, c])
        return v >= t if seed_high else v < t

    # union of candidate components holding the seed or any positive point
    seeds = [p for p in [seed] + list(positive)
             if in_region(*p) and on_side(*p)]
    visited = set()
    selected = set()
    for start in seeds:
        if start in visited:
            continue
        q = deque([start])
        visited.add(start)
        comp = [start]
        while q:
            r, c = q.popleft()
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if (rr, cc) not in visited and in_region(rr, cc) and on_side(rr, cc):
                    visited.add((rr, cc))
                    q.append((rr, cc))
                    comp.append((rr, cc))
        selected.update(comp)

    # each negative point inside the mask removes its whole component
    for p in negative:
        if p in selected:
            q = deque([p])
            selected.discard(p)
            while q:
                r, c = q.popleft()
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if (rr, cc) in selected:
                        selected.discard((rr, cc))
                        q.append((rr, cc))

    for r, c in selected:
        bitmap[r, c] = 1

    inside_sum = sum(int(q8[r, c]) for r, c in selected)
    inside_n = len(selected)
    outside_n = n - inside_n
    outside_sum = total - inside_sum
    mean_in = inside_sum / inside_n if inside_n else 0.0
    mean_out = outside_sum / outside_n if outside_n else 0.0
    score = (mean_in - mean_out) / 255.0
    score = min(1.0, max(0.0, score))
    return bitmap, score


def sweep_box_oracle(decode_slice, dims: Tuple[int, int, int], axis: int,
                     bounds: Tuple[int, int, int, int, int, int],
                     label: int) -> np.ndarray:
    """Sequential per-slice 2D-bbox segmentation into a fresh label volume.

    decode_slice(axis, index, rect) must return a full-slice uint8 bitmap;
    rect is the in-plane (r0, c0, r1, c1) of the 3D box. Voxel layout of
    the result is (nz, ny, nx).
    """
    nx, ny, nz = dims
    i0, j0, k0, i1, j1, k1 = bounds
    i0, j0, k0 = max(i0, 0), max(j0, 0), max(k0, 0)
    i1, j1, k1 = min(i1, nx - 1), min(j1, ny - 1), min(k1, nz - 1)
    assert i0 <= i1 and j0 <= j1 and k0 <= k1, "clamped box must be nonempty"
    labels = np.zeros((nz, ny, nx), dtype=np.uint16)
    if axis == 2:
        lo, hi, rect = k0, k1, (j0, i0, j1, i1)
    elif axis == 1:
        lo, hi, rect = j0, j1, (k0, i0, k1, i1)
    else:
        lo, hi, rect = i0, i1, (k0, j0, k1, j1)
    for index in range(lo, hi + 1):
        bitmap = decode_slice(axis, index, rect)
        if axis == 2:
            view = labels[index]
        elif axis == 1:
            view = labels[:, index, :]
        else:
            view = labels[:, :, index]
        rr0, cc0, rr1, cc1 = rect
        block = view[rr0: rr1 + 1, cc0: cc1 + 1]
        bits = bitmap[rr0: rr1 + 1, cc0: cc1 + 1]
        block[block == label] = 0
        block[(bits != 0) & (block == 0)] = label
    return labels


def mesh_edge_census(triangles: np.ndarray) -> dict:
    """Edge -> incident triangle count; closed meshes map everything to 2."""
    census = {}
    for tri in triangles:
        a, b, c = int(tri[0]), int(tri[1]), int(tri[2])
        for e in ((a, b), (b, c), (c, a)):
            key = (min(e), max(e))
            census[key] = census.get(key, 0) + 1
    return census


def sphere_mask(radius: int, size: int) -> np.ndarray:
    """Boolean ball centered in a size^3 grid, <= radius in voxel distance."""
    center = (size - 1) / 2.0
    zz, yy, xx = np.mgrid[0:size, 0:size, 0:size].astype(np.float64)
    d2 = (xx - center) ** 2 + (yy - center) ** 2 + (zz - center) ** 2
    return d2 <= radius * radius
