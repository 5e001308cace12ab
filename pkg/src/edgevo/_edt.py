"""Exact Euclidean distance transform with nearest-edge labels.

Two-pass scheme: per-row 1-D nearest edge column, then per-column lower
envelope of parabolas over rows. Squared distances are integers, so exact
ties resolve deterministically toward the smaller linear (row-major) pixel
index: the row pass keeps the smaller column, the column pass keeps the
earlier parabola (smaller row) when a boundary lands exactly on a pixel.
"""

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


_BIG = 1 << 30  # farther than any pixel distance, squares still fit int64


@njit(cache=True)
def _row_pass(mask, row_d, row_x):
    h, w = mask.shape
    for v in range(h):
        d = _BIG
        lab = -1
        for u in range(w):
            if mask[v, u]:
                d = 0
                lab = u
            elif d < _BIG:
                d += 1
            row_d[v, u] = d
            row_x[v, u] = lab
        d = _BIG
        lab = -1
        for u in range(w - 1, -1, -1):
            if mask[v, u]:
                d = 0
                lab = u
            elif d < _BIG:
                d += 1
            # strict improvement keeps the smaller column on ties
            if d < row_d[v, u]:
                row_d[v, u] = d
                row_x[v, u] = lab
    return row_d, row_x


@njit(cache=True)
def _column_pass(row_d, row_x, nnf, dist_sq):
    h, w = row_d.shape
    v_idx = np.empty(h, np.int64)
    z = np.empty(h + 1, np.float64)
    for u in range(w):
        k = -1
        for q in range(h):
            fq = row_d[q, u]
            if fq >= _BIG:
                continue
            fq2 = fq * fq + q * q
            s = 0.0
            while k >= 0:
                r = v_idx[k]
                fr = row_d[r, u]
                s = (fq2 - (fr * fr + r * r)) / (2.0 * (q - r))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            if k < 0:
                k = 0
                v_idx[0] = q
                z[0] = -np.inf
                z[1] = np.inf
            else:
                k += 1
                v_idx[k] = q
                z[k] = s
                z[k + 1] = np.inf
        k = 0
        for p in range(h):
            while z[k + 1] < p:
                k += 1
            r = v_idx[k]
            dr = row_d[r, u]
            dist_sq[p, u] = (p - r) * (p - r) + dr * dr
            nnf[p, u, 0] = row_x[r, u]
            nnf[p, u, 1] = r
    return nnf, dist_sq


def distance_transform(mask):
    """Exact EDT of a boolean mask.

    Returns (nnf (H,W,2) int32 as (u, v), dist_sq (H,W) int64). The mask
    must contain at least one True pixel.
    """
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    h, w = m.shape
    row_d = np.empty((h, w), np.int64)
    row_x = np.empty((h, w), np.int64)
    _row_pass(m, row_d, row_x)
    nnf = np.empty((h, w, 2), np.int64)
    dist_sq = np.empty((h, w), np.int64)
    _column_pass(row_d, row_x, nnf, dist_sq)
    return nnf.astype(np.int32), dist_sq
