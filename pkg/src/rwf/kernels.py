"""Hot row-wise kernels with a numba path and a pure-numpy twin.

The active backend is chosen once at import time. Set ``RWF_BACKEND=numpy``
to force the numpy path (numba is also skipped when it cannot be imported).
Both variants of every kernel stay importable as ``<name>_numba`` /
``<name>_numpy`` so tests and the benchmark can compare them directly.
"""

import os
from functools import lru_cache

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("RWF_BACKEND", "numba").lower() != "numpy"
BACKEND = "numba" if USE_NUMBA else "numpy"


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)


# ---------------------------------------------------------------------------
# softmax over the last axis of a 2-D array
# ---------------------------------------------------------------------------


def softmax_rows_numpy(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@_njit
def softmax_rows_numba(x):
    n, k = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, k):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(k):
            e = np.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        for j in range(k):
            out[i, j] /= s
    return out


# ---------------------------------------------------------------------------
# layer norm over the last axis of a 2-D array
# ---------------------------------------------------------------------------


def layer_norm_rows_numpy(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0]


@_njit
def layer_norm_rows_numba(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv_std = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / np.sqrt(var + eps)
        inv_std[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, inv_std


def layer_norm_backward_rows_numpy(dy, xhat, inv_std, gain):
    """Input gradient of a row layer norm; gain/bias grads are plain sums."""
    g = dy * gain
    d = xhat.shape[1]
    mean_g = g.sum(axis=1, keepdims=True) / d
    mean_gx = (g * xhat).sum(axis=1, keepdims=True) / d
    return (g - mean_g - xhat * mean_gx) * inv_std[:, None]


@_njit
def layer_norm_backward_rows_numba(dy, xhat, inv_std, gain):
    n, d = dy.shape
    dx = np.empty_like(dy)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            g = dy[i, j] * gain[j]
            s1 += g
            s2 += g * xhat[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            dx[i, j] = (dy[i, j] * gain[j] - s1 - xhat[i, j] * s2) * inv_std[i]
    return dx


# ---------------------------------------------------------------------------
# exhaustive simplex grid search of the routing free energy
# ---------------------------------------------------------------------------


def _xlogx(p):
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


@lru_cache(maxsize=8)
def simplex_grid(length, n_div):
    """Integer lattice {n : sum(n) = n_div, n >= 0} in lexicographic order (read-only, cached)."""
    if length == 1:
        return np.array([[n_div]], dtype=np.int64)
    rows = []
    for first in range(n_div + 1):
        rest = simplex_grid(length - 1, n_div - first)
        rows.append(np.column_stack([np.full(len(rest), first, dtype=np.int64), rest]))
    return np.vstack(rows)


def simplex_grid_argmin_numpy(scores, beta, n_div):
    """Minimize -<p, s> + sum(p ln p) / beta over the lattice; returns (point, value)."""
    grid = simplex_grid(scores.shape[0], n_div)
    p = grid / float(n_div)
    energy = -(p @ scores) + _xlogx(p).sum(axis=1) / beta
    # argmin returns the first (lexicographically smallest) minimizer
    best = int(np.argmin(energy))
    return p[best].copy(), float(energy[best])


@_njit
def _lattice_energy(counts, scores, beta, n_div):
    e = 0.0
    for i in range(counts.shape[0]):
        if counts[i] > 0:
            p = counts[i] / n_div
            e += -p * scores[i] + p * np.log(p) / beta
    return e


@_njit
def simplex_grid_argmin_numba(scores, beta, n_div):
    length = scores.shape[0]
    counts = np.zeros(length, dtype=np.int64)
    best_counts = np.zeros(length, dtype=np.int64)
    best = np.inf
    # odometer over compositions of n_div into `length` parts, lexicographic
    counts[length - 1] = n_div
    while True:
        e = _lattice_energy(counts, scores, beta, n_div)
        if e < best:
            best = e
            best_counts[:] = counts
        # advance: find the rightmost position (excluding last) that can grow
        j = length - 2
        while j >= 0:
            used = 0
            for i in range(j):
                used += counts[i]
            if used + counts[j] < n_div:
                break
            j -= 1
        if j < 0:
            break
        counts[j] += 1
        for i in range(j + 1, length):
            counts[i] = 0
        used = 0
        for i in range(length - 1):
            used += counts[i]
        counts[length - 1] = n_div - used
    out = np.empty(length)
    for i in range(length):
        out[i] = best_counts[i] / n_div
    return out, best


if USE_NUMBA:
    softmax_rows = softmax_rows_numba
    layer_norm_rows = layer_norm_rows_numba
    layer_norm_backward_rows = layer_norm_backward_rows_numba
    simplex_grid_argmin = simplex_grid_argmin_numba
else:
    softmax_rows = softmax_rows_numpy
    layer_norm_rows = layer_norm_rows_numpy
    layer_norm_backward_rows = layer_norm_backward_rows_numpy
    simplex_grid_argmin = simplex_grid_argmin_numpy
