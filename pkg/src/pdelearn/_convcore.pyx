# Batched 2D stencil correlation kernels (compiled core).
#
# All three entry points share the same geometry: filters are (F, n, n) with
# odd n, offsets centered at r = n // 2, fields are (B, H, W) row-major with
# x as the fast axis.  `wrap=True` gives periodic boundaries, `wrap=False`
# treats out-of-domain samples as zero.  Inner loops are arranged as
# contiguous row AXPY / dot operations so the C compiler can vectorize them;
# the batch dimension is parallelized with a static schedule, and the weight
# gradient reduces per-thread partials in thread order, so results are
# reproducible for a fixed thread count.

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange

cimport openmp

cnp.import_array()


cdef inline void _pad(const double[:, ::1] src, double[:, ::1] dst,
                      Py_ssize_t r, bint wrap) noexcept nogil:
    # dst has shape (H + 2r, W + 2r); requires r < H and r < W.
    cdef Py_ssize_t H = src.shape[0]
    cdef Py_ssize_t W = src.shape[1]
    cdef Py_ssize_t y, x, sy, sx
    for y in range(H + 2 * r):
        sy = y - r
        if sy < 0:
            sy = sy + H if wrap else -1
        elif sy >= H:
            sy = sy - H if wrap else -1
        for x in range(W + 2 * r):
            sx = x - r
            if sx < 0:
                sx = sx + W if wrap else -1
            elif sx >= W:
                sx = sx - W if wrap else -1
            if sy < 0 or sx < 0:
                dst[y, x] = 0.0
            else:
                dst[y, x] = src[sy, sx]


def corr_many(const double[:, :, ::1] u, const double[:, :, ::1] filt,
              bint wrap, int threads=1):
    """out[b, f, y, x] = sum_{a,c} filt[f, a, c] * u[b, y+a-r, x+c-r]."""
    cdef Py_ssize_t B = u.shape[0], H = u.shape[1], W = u.shape[2]
    cdef Py_ssize_t F = filt.shape[0], n = filt.shape[1]
    cdef Py_ssize_t r = n // 2
    cdef int nt = min(max(threads, 1), <int> B) if B > 0 else 1
    out_arr = np.empty((B, F, H, W), dtype=np.float64)
    pad_arr = np.empty((nt, H + 2 * r, W + 2 * r), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, ::1] pads = pad_arr
    cdef Py_ssize_t b, f, y, x, a, c
    cdef int tid
    cdef double w
    cdef const double* src
    cdef double* dst
    for b in prange(B, nogil=True, schedule="static", num_threads=nt):
        tid = openmp.omp_get_thread_num()
        _pad(u[b], pads[tid], r, wrap)
        for f in range(F):
            for y in range(H):
                dst = &out[b, f, y, 0]
                for x in range(W):
                    dst[x] = 0.0
                for a in range(n):
                    for c in range(n):
                        w = filt[f, a, c]
                        if w == 0.0:
                            continue
                        src = &pads[tid, y + a, c]
                        for x in range(W):
                            dst[x] += w * src[x]
    return out_arr


def corr_accum(const double[:, :, :, ::1] g, const double[:, :, ::1] filt,
               bint wrap, int threads=1):
    """out[b, y, x] = sum_f sum_{a,c} filt[f, a, c] * g[b, f, y+a-r, x+c-r]."""
    cdef Py_ssize_t B = g.shape[0], F = g.shape[1], H = g.shape[2], W = g.shape[3]
    cdef Py_ssize_t n = filt.shape[1]
    cdef Py_ssize_t r = n // 2
    cdef int nt = min(max(threads, 1), <int> B) if B > 0 else 1
    out_arr = np.zeros((B, H, W), dtype=np.float64)
    pad_arr = np.empty((nt, H + 2 * r, W + 2 * r), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] pads = pad_arr
    cdef Py_ssize_t b, f, y, x, a, c
    cdef int tid
    cdef double w
    cdef const double* src
    cdef double* dst
    for b in prange(B, nogil=True, schedule="static", num_threads=nt):
        tid = openmp.omp_get_thread_num()
        for f in range(F):
            _pad(g[b, f], pads[tid], r, wrap)
            for y in range(H):
                dst = &out[b, y, 0]
                for a in range(n):
                    for c in range(n):
                        w = filt[f, a, c]
                        if w == 0.0:
                            continue
                        src = &pads[tid, y + a, c]
                        for x in range(W):
                            dst[x] += w * src[x]
    return out_arr


def corr_wgrad(const double[:, :, :, ::1] g, const double[:, :, ::1] u,
               Py_ssize_t n, bint wrap, int threads=1):
    """out[f, a, c] = sum_{b,y,x} g[b, f, y, x] * u[b, y+a-r, x+c-r]."""
    cdef Py_ssize_t B = g.shape[0], F = g.shape[1], H = g.shape[2], W = g.shape[3]
    cdef Py_ssize_t r = n // 2
    cdef int nt = min(max(threads, 1), <int> B) if B > 0 else 1
    part_arr = np.zeros((nt, F, n, n), dtype=np.float64)
    pad_arr = np.empty((nt, H + 2 * r, W + 2 * r), dtype=np.float64)
    cdef double[:, :, :, ::1] part = part_arr
    cdef double[:, :, ::1] pads = pad_arr
    cdef Py_ssize_t b, f, y, x, a, c
    cdef int tid
    cdef double s
    cdef const double* grow
    cdef const double* urow
    for b in prange(B, nogil=True, schedule="static", num_threads=nt):
        tid = openmp.omp_get_thread_num()
        _pad(u[b], pads[tid], r, wrap)
        for f in range(F):
            for y in range(H):
                grow = &g[b, f, y, 0]
                for a in range(n):
                    urow = &pads[tid, y + a, 0]
                    for c in range(n):
                        s = 0.0
                        for x in range(W):
                            s += grow[x] * urow[c + x]
                        part[tid, f, a, c] += s
    return part_arr.sum(axis=0)
