"""Pure-numpy fallback for the stencil correlation kernels.

Same contracts as the compiled module: sliding windows over a padded copy,
contracted with einsum.  Batches are chunked so the window views never
materialize more than ~64 fields at once.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_CHUNK = 64


def _padded(u, r, wrap):
    if r == 0:
        return u
    mode = "wrap" if wrap else "constant"
    pad = [(0, 0)] * (u.ndim - 2) + [(r, r), (r, r)]
    return np.pad(u, pad, mode=mode)


def corr_many(u, filt, wrap):
    B, H, W = u.shape
    F, n, _ = filt.shape
    r = n // 2
    out = np.empty((B, F, H, W))
    for lo in range(0, B, _CHUNK):
        hi = min(lo + _CHUNK, B)
        win = sliding_window_view(_padded(u[lo:hi], r, wrap), (n, n), axis=(1, 2))
        out[lo:hi] = np.einsum("byxac,fac->bfyx", win, filt, optimize=True)
    return out


def corr_accum(g, filt, wrap):
    B, F, H, W = g.shape
    n = filt.shape[1]
    r = n // 2
    out = np.empty((B, H, W))
    for lo in range(0, B, _CHUNK):
        hi = min(lo + _CHUNK, B)
        win = sliding_window_view(_padded(g[lo:hi], r, wrap), (n, n), axis=(2, 3))
        out[lo:hi] = np.einsum("bfyxac,fac->byx", win, filt, optimize=True)
    return out


def corr_wgrad(g, u, n, wrap):
    B, F, H, W = g.shape
    r = n // 2
    out = np.zeros((F, n, n))
    for lo in range(0, B, _CHUNK):
        hi = min(lo + _CHUNK, B)
        win = sliding_window_view(_padded(u[lo:hi], r, wrap), (n, n), axis=(1, 2))
        out += np.einsum("bfyx,byxac->fac", g[lo:hi], win, optimize=True)
    return out
