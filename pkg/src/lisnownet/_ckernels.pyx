# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Summation order matches the numpy fallback, so both backends agree bit for bit.
"""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

from lisnownet._pykernels import pad_index

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, str vertical="replicate"):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t[::1] ridx = pad_index(h, kh // 2, vertical == "circular")
    cdef Py_ssize_t pw = kw // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c * kh * kw, h * w), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, y, row, r, s, head
    cdef size_t item = sizeof(real)
    if pw >= w:
        raise ValueError("kernel wider than the image")
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        # column xx reads source column (xx + s) mod w
                        s = j - pw
                        if s < 0:
                            s += w
                        head = w - s
                        for y in range(h):
                            r = ridx[y + i]
                            memcpy(&out[b, row, y * w], &x[b, ci, r, s], head * item)
                            if s:
                                memcpy(&out[b, row, y * w + head], &x[b, ci, r, 0], s * item)
    return out_arr


def conv_gemm(const real[:, ::1] w2, const real[:, :, ::1] cols):
    cdef Py_ssize_t n = cols.shape[0], k = cols.shape[1], p = cols.shape[2], c_out = w2.shape[0]
    if w2.shape[1] != k:
        raise ValueError("conv_gemm: inner dimensions differ")
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c_out, p), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, j, q, start, stop
    cdef Py_ssize_t block = 1024
    cdef real w0, w1, w2_, w3
    cdef real* op
    cdef const real* c0
    cdef const real* c1
    cdef const real* c2
    cdef const real* c3
    if p == 0 or c_out == 0:
        return out_arr
    with nogil:
        for b in range(n):
            # pixel tiles keep the patch rows in cache across output channels
            start = 0
            while start < p:
                stop = min(start + block, p)
                for o in range(c_out):
                    op = &out[b, o, 0]
                    j = 0
                    # four terms per pass; evaluated left to right, so the
                    # summation order is still term by term in increasing j
                    while j + 4 <= k:
                        w0 = w2[o, j]
                        w1 = w2[o, j + 1]
                        w2_ = w2[o, j + 2]
                        w3 = w2[o, j + 3]
                        c0 = &cols[b, j, 0]
                        c1 = &cols[b, j + 1, 0]
                        c2 = &cols[b, j + 2, 0]
                        c3 = &cols[b, j + 3, 0]
                        for q in range(start, stop):
                            op[q] = op[q] + w0 * c0[q] + w1 * c1[q] + w2_ * c2[q] + w3 * c3[q]
                        j += 4
                    while j < k:
                        w0 = w2[o, j]
                        c0 = &cols[b, j, 0]
                        for q in range(start, stop):
                            op[q] = op[q] + w0 * c0[q]
                        j += 1
                start = stop
    return out_arr


def col2im(real[:, :, ::1] cols, shape, int kh, int kw, str vertical="replicate"):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    dtype = np.float32 if real is float else np.float64
    # accumulate on the padded grid first, then fold, exactly like the fallback
    gp_arr = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dtype)
    cdef real[:, :, :, ::1] gp = gp_arr
    cdef Py_ssize_t b, ci, i, j, y, xx, row
    for b in range(n):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    for y in range(h):
                        for xx in range(w):
                            gp[b, ci, y + i, xx + j] += cols[b, row, y * w + xx]
    from lisnownet._pykernels import _fold
    g = _fold(gp_arr, w, pw, True, axis=3)
    return _fold(g, h, ph, vertical == "circular", axis=2)


cdef inline double _select(double* a, int n, int k) noexcept nogil:
    # Wirth's selection: afterwards a[:k] <= a[k] <= a[k+1:]
    cdef int lo = 0, hi = n - 1, i, j
    cdef double x, t
    while lo < hi:
        x = a[k]
        i = lo
        j = hi
        while True:
            while a[i] < x:
                i += 1
            while x < a[j]:
                j -= 1
            if i <= j:
                t = a[i]
                a[i] = a[j]
                a[j] = t
                i += 1
                j -= 1
            if i > j:
                break
        if j < k:
            lo = i
        if k < i:
            hi = j
    return a[k]


cdef inline double _median(double* buf, int m) noexcept nogil:
    cdef int a
    cdef double upper = _select(buf, m, m // 2), lower
    if m % 2:
        return upper
    lower = buf[0]
    for a in range(1, m // 2):
        if buf[a] > lower:
            lower = buf[a]
    return (lower + upper) / 2


def bucket_order(const Py_ssize_t[::1] flat, const double[::1] d, Py_ssize_t npix):
    cdef Py_ssize_t n = flat.shape[0], i, p, a, b, cur
    offsets_arr = np.zeros(npix + 1, dtype=np.intp)
    order_arr = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] offsets = offsets_arr
    cdef Py_ssize_t[::1] order = order_arr
    cdef Py_ssize_t[::1] fill = np.empty(npix, dtype=np.intp)
    with nogil:
        for i in range(n):
            offsets[flat[i] + 1] += 1
        for p in range(npix):
            offsets[p + 1] += offsets[p]
            fill[p] = offsets[p]
        # counting sort keeps points of one pixel in input order
        for i in range(n):
            p = flat[i]
            order[fill[p]] = i
            fill[p] += 1
        # stable insertion sort by range inside each pixel
        for p in range(npix):
            for a in range(offsets[p] + 1, offsets[p + 1]):
                cur = order[a]
                b = a - 1
                while b >= offsets[p] and d[order[b]] > d[cur]:
                    order[b + 1] = order[b]
                    b -= 1
                order[b + 1] = cur
    return order_arr, offsets_arr


def masked_median_flags(const double[:, :, :] data, valid, int half, double tau_d, double tau_i):
    cdef Py_ssize_t h = data.shape[0], w = data.shape[1]
    cdef int k = 2 * half + 1
    cdef cnp.uint8_t[:, ::1] ok = np.ascontiguousarray(valid, dtype=np.uint8)
    cdef Py_ssize_t[::1] ridx = pad_index(h, half, False)
    cdef Py_ssize_t[::1] cidx = pad_index(w, half, True)
    flags_arr = np.zeros((h, w), dtype=bool)
    cdef cnp.uint8_t[:, ::1] flags = flags_arr.view(np.uint8)
    cdef double[::1] buf = np.empty(k * k, dtype=np.float64)
    cdef double taus[2]
    taus[0] = tau_d
    taus[1] = tau_i
    cdef Py_ssize_t y, x, i, j, r, cc
    cdef int ch, m
    cdef bint dark
    with nogil:
        for y in range(h):
            for x in range(w):
                if not ok[y, x]:
                    continue
                dark = True
                for ch in range(2):
                    m = 0
                    for i in range(k):
                        r = ridx[y + i]
                        for j in range(k):
                            cc = cidx[x + j]
                            if ok[r, cc]:
                                buf[m] = data[r, cc, ch]
                                m += 1
                    if not data[y, x, ch] < _median(&buf[0], m) - taus[ch]:
                        dark = False
                        break
                flags[y, x] = dark
    return flags_arr
