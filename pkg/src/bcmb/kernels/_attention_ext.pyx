# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled varlen attention.

float32 walks each (sequence, head) in query blocks: scores and the value
sum are BLAS sgemm calls over just the key band a block can see, and the
masked softmax between them is fused in C with a vectorizable exp. No
Python runs per sequence, so many short documents cost no interpreter
overhead. float64 (used for gradient checks) takes a plain per-row path
with double accumulators.
"""

import numpy as np

from libc.math cimport exp
from libc.stdlib cimport free, malloc
from libc.string cimport memset
from scipy.linalg.cython_blas cimport sgemm

cdef extern from *:
    """
    #include <string.h>
    #include <stdint.h>

    /* exp for x <= 0, relative error ~2e-7; inputs below -87 flush to ~1e-38 */
    static inline void bcmb_exp_neg(float* x, long n) {
        for (long j = 0; j < n; j++) {
            float v = x[j] < -87.0f ? -87.0f : x[j];
            float t = v * 1.44269504088896341f;
            float fn = (t + 12582912.0f) - 12582912.0f;  /* round to nearest */
            float r = v - fn * 0.693145751953125f - fn * 1.428606765330187e-06f;
            float p = 1.0f + r * (1.0f + r * (0.5f + r * (0.16666667f + r * (0.041666668f
                      + r * (0.008333334f + r * 0.0013888889f)))));
            union { float f; int32_t i; } u;
            u.i = ((int32_t)fn + 127) << 23;
            x[j] = p * u.f;
        }
    }

    /* row <- exp(row - max over [vlo, vhi)) on [vlo, vhi), 0 elsewhere; every
       entry goes through exp, as in dense masked attention. Returns 1 / sum. */
    static float bcmb_softmax_row(float* row, long m, long vlo, long vhi) {
        float mx[8];
        long j = vlo;
        for (int k = 0; k < 8; k++) mx[k] = row[vlo];
        for (; j + 8 <= vhi; j += 8)
            for (int k = 0; k < 8; k++) mx[k] = row[j + k] > mx[k] ? row[j + k] : mx[k];
        float mm = mx[0];
        for (int k = 1; k < 8; k++) mm = mx[k] > mm ? mx[k] : mm;
        for (; j < vhi; j++) mm = row[j] > mm ? row[j] : mm;
        for (j = 0; j < m; j++) row[j] -= mm;
        bcmb_exp_neg(row, m);
        for (j = 0; j < vlo; j++) row[j] = 0.0f;
        for (j = vhi; j < m; j++) row[j] = 0.0f;
        float part[8] = {0, 0, 0, 0, 0, 0, 0, 0};
        for (j = 0; j + 8 <= m; j += 8)
            for (int k = 0; k < 8; k++) part[k] += row[j + k];
        float total = 0.0f;
        for (int k = 0; k < 8; k++) total += part[k];
        for (; j < m; j++) total += row[j];
        return 1.0f / total;
    }
    """
    void bcmb_exp_neg(float* x, long n) nogil
    float bcmb_softmax_row(float* row, long m, long vlo, long vhi) nogil


ctypedef fused real:
    float
    double


cdef void _attend_row(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
                      real[:, :, ::1] out, Py_ssize_t i, Py_ssize_t h,
                      Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t kend, double scale,
                      double* buf, double* acc) noexcept nogil:
    # keys in [kend, hi) are padding: scored like the rest, then masked
    cdef Py_ssize_t hd = q.shape[2]
    cdef Py_ssize_t j, d
    cdef double dot, m = -1e300, total = 0.0, w
    for j in range(lo, hi):
        dot = 0.0
        for d in range(hd):
            dot = dot + <double>q[i, h, d] * <double>k[j, h, d]
        dot = dot * scale
        if j >= kend:
            dot = -1e300
        buf[j - lo] = dot
        if dot > m:
            m = dot
    for d in range(hd):
        acc[d] = 0.0
    for j in range(lo, hi):
        w = exp(buf[j - lo] - m)
        total = total + w
        for d in range(hd):
            acc[d] = acc[d] + w * <double>v[j, h, d]
    if kend <= lo:
        # padding query with no visible key
        for d in range(hd):
            out[i, h, d] = 0
        return
    for d in range(hd):
        out[i, h, d] = <real>(acc[d] / total)


def _generic(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
             const long long[::1] cu_seqlens, long half_window, double scale,
             const long long[::1] key_lengths):
    cdef Py_ssize_t T = q.shape[0], H = q.shape[1], hd = q.shape[2]
    cdef Py_ssize_t n_seq = cu_seqlens.shape[0] - 1
    cdef Py_ssize_t s, h, i, a, b, kb, lo, hi, longest = 1
    cdef bint has_kl = key_lengths is not None
    for s in range(n_seq):
        if cu_seqlens[s + 1] - cu_seqlens[s] > longest:
            longest = cu_seqlens[s + 1] - cu_seqlens[s]
    dtype = np.float32 if real is float else np.float64
    result = np.empty((T, H, hd), dtype=dtype)
    cdef real[:, :, ::1] out = result
    cdef double* buf = <double*> malloc(longest * sizeof(double))
    cdef double* acc = <double*> malloc(hd * sizeof(double))
    if buf == NULL or acc == NULL:
        free(buf)
        free(acc)
        raise MemoryError()
    try:
        with nogil:
            for s in range(n_seq):
                a = cu_seqlens[s]
                b = cu_seqlens[s + 1]
                kb = a + key_lengths[s] if has_kl else b
                for h in range(H):
                    for i in range(a, b):
                        if half_window < 0:
                            lo = a
                            hi = b
                        else:
                            lo = i - half_window if i - half_window > a else a
                            hi = i + half_window + 1 if i + half_window + 1 < b else b
                        _attend_row(q, k, v, out, i, h, lo, hi, kb, scale, buf, acc)
    finally:
        free(buf)
        free(acc)
    return result


cdef int GLOBAL_BLOCK = 256  # query rows per sgemm on global layers
cdef int LOCAL_BLOCK = 64  # smaller on local layers to keep the key band tight


cdef void _block_f32(float* q, float* k, float* v, float* o, int n, int hd,
                     long hw, long klen, float scale, float* S, float* inv_sum, int block) noexcept nogil:
    # q, k, v, o: [n, hd] row-major for one (sequence, head); S: scratch
    cdef int i0, i1, lo, hi, m, qb, r, i, vis_lo, vis_hi, d
    cdef float zero = 0.0, one = 1.0
    cdef float* row
    cdef char tr = b'T', nt = b'N'
    i0 = 0
    while i0 < n:
        i1 = i0 + block if i0 + block < n else n
        qb = i1 - i0
        if hw < 0:
            lo = 0
            hi = n
        else:
            lo = i0 - hw if i0 - hw > 0 else 0
            hi = i1 + hw if i1 + hw < n else n
        m = hi - lo
        # S[qb, m] = scale * Q[i0:i1] . K[lo:hi]^T   (column-major view: S^T = K Q^T)
        sgemm(&tr, &nt, &m, &qb, &hd, &scale, k + lo * hd, &hd, q + i0 * hd, &hd, &zero, S, &m)
        for r in range(qb):
            i = i0 + r
            row = S + r * m
            vis_lo = i - hw if hw >= 0 and i - hw > lo else lo
            vis_hi = i + hw + 1 if hw >= 0 and i + hw + 1 < hi else hi
            if klen < vis_hi:
                vis_hi = klen
            if vis_hi <= vis_lo:
                # padding query with no visible key: score work is spent, output is zero
                memset(row, 0, m * sizeof(float))
                inv_sum[r] = 0
                continue
            inv_sum[r] = bcmb_softmax_row(row, m, vis_lo - lo, vis_hi - lo)
        # O[i0:i1] = P . V[lo:hi]   (column-major view: O^T = V^T P^T)
        sgemm(&nt, &nt, &hd, &qb, &m, &one, v + lo * hd, &hd, S, &m, &zero, o + i0 * hd, &hd)
        for r in range(qb):
            for d in range(hd):
                o[(i0 + r) * hd + d] *= inv_sum[r]
        i0 = i1


def _fast_f32(q, k, v, const long long[::1] cu_seqlens, long half_window, double scale,
              const long long[::1] key_lengths):
    cdef Py_ssize_t T = q.shape[0], H = q.shape[1]
    cdef int hd = q.shape[2]
    cdef Py_ssize_t n_seq = cu_seqlens.shape[0] - 1
    cdef Py_ssize_t s, h, a, longest = 1, width
    cdef int n
    cdef long klen
    cdef bint has_kl = key_lengths is not None
    for s in range(n_seq):
        if cu_seqlens[s + 1] - cu_seqlens[s] > longest:
            longest = cu_seqlens[s + 1] - cu_seqlens[s]
    cdef int block = GLOBAL_BLOCK if half_window < 0 else LOCAL_BLOCK
    width = longest if half_window < 0 else min(longest, block + 2 * half_window)
    cdef float[:, :, ::1] qh = np.ascontiguousarray(q.transpose(1, 0, 2))
    cdef float[:, :, ::1] kh = np.ascontiguousarray(k.transpose(1, 0, 2))
    cdef float[:, :, ::1] vh = np.ascontiguousarray(v.transpose(1, 0, 2))
    oh_arr = np.empty((H, T, hd), dtype=np.float32)
    cdef float[:, :, ::1] oh = oh_arr
    cdef float* S = <float*> malloc(block * width * sizeof(float))
    cdef float* inv_sum = <float*> malloc(block * sizeof(float))
    if S == NULL or inv_sum == NULL:
        free(S)
        free(inv_sum)
        raise MemoryError()
    try:
        with nogil:
            for s in range(n_seq):
                a = cu_seqlens[s]
                n = <int>(cu_seqlens[s + 1] - a)
                klen = key_lengths[s] if has_kl else n
                for h in range(H):
                    _block_f32(&qh[h, a, 0], &kh[h, a, 0], &vh[h, a, 0], &oh[h, a, 0],
                               n, hd, half_window, klen, <float>scale, S, inv_sum, block)
    finally:
        free(S)
        free(inv_sum)
    return oh_arr.transpose(1, 0, 2).copy()


def varlen_attention(q, k, v, cu_seqlens, long half_window, double scale, key_lengths=None):
    if q.dtype == np.float32 and q.shape[0] and q.shape[1] and q.shape[2]:
        return _fast_f32(q, k, v, cu_seqlens, half_window, scale, key_lengths)
    return _generic(q, k, v, cu_seqlens, half_window, scale, key_lengths)
