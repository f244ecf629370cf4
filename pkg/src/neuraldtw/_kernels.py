"""Numba kernels for the quadratic dynamic programs.

Cost kinds are passed as integers: 0 = absolute difference, 1 = squared.
"""

import math
import warnings

import numba
import numpy as np

# an old system TBB makes numba fall back to another threading layer; the notice is just noise
warnings.filterwarnings("ignore", message="The TBB threading layer")

ABSOLUTE = 0
SQUARED = 1


@numba.njit(cache=True, inline="always")
def _cost(a, b, kind):
    d = a - b
    if kind == SQUARED:
        return d * d
    return abs(d)


@numba.njit(cache=True, nogil=True)
def dtw_value(x, y, kind):
    """Cumulative DTW cost with two rolling rows."""
    n, m = x.shape[0], y.shape[0]
    prev = np.full(m + 1, np.inf)
    cur = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        xi = x[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = _cost(xi, y[j - 1], kind) + best
        prev, cur = cur, prev
    return prev[m]


@numba.njit(cache=True, nogil=True)
def dtw_matrix(x, y, kind):
    n, m = x.shape[0], y.shape[0]
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        xi = x[i - 1]
        for j in range(1, m + 1):
            best = D[i - 1, j - 1]
            if D[i - 1, j] < best:
                best = D[i - 1, j]
            if D[i, j - 1] < best:
                best = D[i, j - 1]
            D[i, j] = _cost(xi, y[j - 1], kind) + best
    return D


@numba.njit(cache=True)
def backtrack(D):
    """Recover the path from a padded accumulated-cost matrix.

    Ties prefer the diagonal, then (i-1, j), then (i, j-1). Returned
    indices are 0-based, in forward order.
    """
    i, j = D.shape[0] - 1, D.shape[1] - 1
    out = np.empty((i + j, 2), dtype=np.int64)
    k = 0
    while True:
        out[k, 0] = i - 1
        out[k, 1] = j - 1
        k += 1
        if i == 1 and j == 1:
            break
        diag = D[i - 1, j - 1]
        up = D[i - 1, j]
        left = D[i, j - 1]
        if diag <= up and diag <= left:
            i -= 1
            j -= 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
    return out[:k][::-1].copy()


@numba.njit(cache=True, nogil=True, parallel=True)
def dtw_pairs(flat, offsets, lengths, a_idx, b_idx, kind):
    """DTW values for many (a, b) pairs of signals packed into one array."""
    out = np.empty(a_idx.shape[0])
    for p in numba.prange(a_idx.shape[0]):
        a, b = a_idx[p], b_idx[p]
        x = flat[offsets[a]:offsets[a] + lengths[a]]
        y = flat[offsets[b]:offsets[b] + lengths[b]]
        out[p] = dtw_value(x, y, kind)
    return out


@numba.njit(cache=True, inline="always")
def _softmin3(a, b, c, gamma):
    lo = min(a, min(b, c))
    if lo == np.inf:
        return np.inf
    s = math.exp((lo - a) / gamma) + math.exp((lo - b) / gamma) + math.exp((lo - c) / gamma)
    return lo - gamma * math.log(s)


@numba.njit(cache=True, nogil=True)
def soft_dtw_value(x, y, gamma, kind):
    n, m = x.shape[0], y.shape[0]
    prev = np.full(m + 1, np.inf)
    cur = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        xi = x[i - 1]
        for j in range(1, m + 1):
            cur[j] = _cost(xi, y[j - 1], kind) + _softmin3(prev[j - 1], prev[j], cur[j - 1], gamma)
        prev, cur = cur, prev
    return prev[m]


@numba.njit(cache=True, nogil=True, parallel=True)
def soft_dtw_pairs(flat, offsets, lengths, a_idx, b_idx, gamma, kind):
    out = np.empty(a_idx.shape[0])
    for p in numba.prange(a_idx.shape[0]):
        a, b = a_idx[p], b_idx[p]
        x = flat[offsets[a]:offsets[a] + lengths[a]]
        y = flat[offsets[b]:offsets[b] + lengths[b]]
        out[p] = soft_dtw_value(x, y, gamma, kind)
    return out


@numba.njit(cache=True, nogil=True)
def soft_dtw_grad(x, y, gamma, kind):
    """Soft-DTW value and gradient with respect to ``x``.

    The forward table R is kept in full; the expectation table is swept
    backwards one row at a time.
    """
    n, m = x.shape[0], y.shape[0]
    R = np.full((n + 2, m + 2), np.inf)
    R[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            R[i, j] = _cost(x[i - 1], y[j - 1], kind) + _softmin3(
                R[i - 1, j - 1], R[i - 1, j], R[i, j - 1], gamma
            )
    value = R[n, m]

    grad = np.zeros(n)
    # e_next holds row i+1 of the expectation table; e_cur row i
    e_next = np.zeros(m + 2)
    e_cur = np.zeros(m + 2)
    for i in range(n, 0, -1):
        e_cur[:] = 0.0
        for j in range(m, 0, -1):
            if i == n and j == m:
                e = 1.0
            else:
                r = R[i, j]
                e = 0.0
                if i < n:
                    c = _cost(x[i], y[j - 1], kind)
                    e += e_next[j] * math.exp((R[i + 1, j] - c - r) / gamma)
                if j < m:
                    c = _cost(x[i - 1], y[j], kind)
                    e += e_cur[j + 1] * math.exp((R[i, j + 1] - c - r) / gamma)
                if i < n and j < m:
                    c = _cost(x[i], y[j], kind)
                    e += e_next[j + 1] * math.exp((R[i + 1, j + 1] - c - r) / gamma)
            e_cur[j] = e
            d = x[i - 1] - y[j - 1]
            if kind == SQUARED:
                grad[i - 1] += e * 2.0 * d
            elif d > 0:
                grad[i - 1] += e
            elif d < 0:
                grad[i - 1] -= e
        e_next, e_cur = e_cur, e_next
    return value, grad


@numba.njit(cache=True, nogil=True)
def windowed_dtw(x, y, lo, hi, kind):
    """DTW restricted to per-row column ranges ``lo[i]..hi[i]`` (inclusive).

    Returns the value and the 0-based path. Storage is linear in the
    number of window cells.
    """
    n = x.shape[0]
    starts = np.empty(n + 1, dtype=np.int64)
    starts[0] = 0
    for i in range(n):
        starts[i + 1] = starts[i] + (hi[i] - lo[i] + 1)
    D = np.full(starts[n], np.inf)

    for i in range(n):
        for j in range(lo[i], hi[i] + 1):
            if i == 0 and j == 0:
                best = 0.0
            else:
                best = np.inf
                if i > 0:
                    if lo[i - 1] <= j - 1 <= hi[i - 1]:
                        v = D[starts[i - 1] + j - 1 - lo[i - 1]]
                        if v < best:
                            best = v
                    if lo[i - 1] <= j <= hi[i - 1]:
                        v = D[starts[i - 1] + j - lo[i - 1]]
                        if v < best:
                            best = v
                if j > lo[i]:
                    v = D[starts[i] + j - 1 - lo[i]]
                    if v < best:
                        best = v
            D[starts[i] + j - lo[i]] = _cost(x[i], y[j], kind) + best

    m = y.shape[0]
    value = D[starts[n - 1] + (m - 1) - lo[n - 1]]
    path = np.empty((n + m, 2), dtype=np.int64)
    i, j = n - 1, m - 1
    k = 0
    while True:
        path[k, 0] = i
        path[k, 1] = j
        k += 1
        if i == 0 and j == 0:
            break
        diag = np.inf
        up = np.inf
        left = np.inf
        if i > 0 and j > 0 and lo[i - 1] <= j - 1 <= hi[i - 1]:
            diag = D[starts[i - 1] + j - 1 - lo[i - 1]]
        if i > 0 and lo[i - 1] <= j <= hi[i - 1]:
            up = D[starts[i - 1] + j - lo[i - 1]]
        if j > lo[i]:
            left = D[starts[i] + j - 1 - lo[i]]
        if diag <= up and diag <= left:
            i -= 1
            j -= 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
    return value, path[:k][::-1].copy()
