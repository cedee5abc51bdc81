# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scan kernels. Same contract as ``_scan_py``.

Built without fast-math or FMA contraction so results match the numpy
fallback operation for operation in double precision.
"""

import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def linear_scan_fwd(real[:, :, ::1] a, real[:, :, ::1] b, real[:, ::1] h0):
    cdef Py_ssize_t B = b.shape[0], L = b.shape[1], D = b.shape[2]
    cdef Py_ssize_t bi, i, c
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, L, D), dtype=dtype)
    cdef real[:, :, ::1] h = out
    cdef real prev
    with nogil:
        for bi in range(B):
            for c in range(D):
                h[bi, 0, c] = a[bi, 0, c] * h0[bi, c] + b[bi, 0, c]
            for i in range(1, L):
                for c in range(D):
                    h[bi, i, c] = a[bi, i, c] * h[bi, i - 1, c] + b[bi, i, c]
    return out


def linear_scan_bwd(real[:, :, ::1] a, real[:, :, ::1] h, real[:, ::1] h0, real[:, :, ::1] gh):
    cdef Py_ssize_t B = a.shape[0], L = a.shape[1], D = a.shape[2]
    cdef Py_ssize_t bi, i, c
    dtype = np.float32 if real is float else np.float64
    ga_arr = np.empty((B, L, D), dtype=dtype)
    gb_arr = np.empty((B, L, D), dtype=dtype)
    lam_arr = np.zeros((B, D), dtype=dtype)
    cdef real[:, :, ::1] ga = ga_arr
    cdef real[:, :, ::1] gb = gb_arr
    cdef real[:, ::1] lam = lam_arr
    cdef real v
    with nogil:
        for bi in range(B):
            for i in range(L - 1, -1, -1):
                for c in range(D):
                    v = gh[bi, i, c] + lam[bi, c]
                    gb[bi, i, c] = v
                    if i > 0:
                        ga[bi, i, c] = v * h[bi, i - 1, c]
                    else:
                        ga[bi, i, c] = v * h0[bi, c]
                    lam[bi, c] = a[bi, i, c] * v
    return ga_arr, gb_arr, lam_arr


def selective_scan_fwd(real[:, :, ::1] decay, real[:, :, ::1] drive,
                       real[:, :, ::1] Bm, real[:, :, ::1] C, bint store_states=True):
    # state kept as [N, D] so the innermost loop runs over contiguous channels
    cdef Py_ssize_t B = drive.shape[0], L = drive.shape[1], D = drive.shape[2], N = Bm.shape[2]
    cdef Py_ssize_t bi, i, c, n
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((B, L, D), dtype=dtype)
    h_arr = np.zeros((N, D), dtype=dtype)
    cdef real[:, :, ::1] y = y_arr
    cdef real[:, ::1] h = h_arr
    cdef real[:, :, :, ::1] hs
    if store_states:
        hs_arr = np.empty((B, L, N, D), dtype=dtype)
        hs = hs_arr
    else:
        hs_arr = None
    cdef real bn, cn, v
    cdef real *hrow
    cdef real *yrow
    cdef const real *arow
    cdef const real *urow
    with nogil:
        for bi in range(B):
            h[:, :] = 0
            for i in range(L):
                arow = &decay[bi, i, 0]
                urow = &drive[bi, i, 0]
                yrow = &y[bi, i, 0]
                for c in range(D):
                    yrow[c] = 0
                for n in range(N):
                    bn = Bm[bi, i, n]
                    cn = C[bi, i, n]
                    hrow = &h[n, 0]
                    for c in range(D):
                        v = arow[c] * hrow[c] + urow[c] * bn
                        hrow[c] = v
                        yrow[c] = yrow[c] + cn * v
                    if store_states:
                        for c in range(D):
                            hs[bi, i, n, c] = hrow[c]
    return y_arr, hs_arr


cdef inline real _lane_dot(const real *x, const real *w, Py_ssize_t D) noexcept nogil:
    # fixed 8-lane partial sums: deterministic, and vectorizable without reassociation
    cdef real acc[8]
    cdef Py_ssize_t c, k, stop = D - D % 8
    for k in range(8):
        acc[k] = 0
    for c in range(0, stop, 8):
        for k in range(8):
            acc[k] = acc[k] + x[c + k] * w[c + k]
    for c in range(stop, D):
        acc[0] = acc[0] + x[c] * w[c]
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))


def selective_scan_bwd(real[:, :, ::1] decay, real[:, :, ::1] drive, real[:, :, ::1] Bm,
                       real[:, :, ::1] C, real[:, :, :, ::1] hs, real[:, :, ::1] gy):
    cdef Py_ssize_t B = drive.shape[0], L = drive.shape[1], D = drive.shape[2], N = Bm.shape[2]
    cdef Py_ssize_t bi, i, c, n
    dtype = np.float32 if real is float else np.float64
    gdecay_arr = np.zeros((B, L, D), dtype=dtype)
    gdrive_arr = np.zeros((B, L, D), dtype=dtype)
    gB_arr = np.empty((B, L, N), dtype=dtype)
    gC_arr = np.empty((B, L, N), dtype=dtype)
    carry_arr = np.zeros((N, D), dtype=dtype)
    lam_arr = np.zeros(D, dtype=dtype)
    zeros_arr = np.zeros(D, dtype=dtype)
    cdef real[:, :, ::1] gdecay = gdecay_arr
    cdef real[:, :, ::1] gdrive = gdrive_arr
    cdef real[:, :, ::1] gB = gB_arr
    cdef real[:, :, ::1] gC = gC_arr
    cdef real[:, ::1] carry = carry_arr
    cdef real[::1] lam = lam_arr
    cdef real[::1] zeros = zeros_arr
    cdef real bn, cn
    cdef const real *grow
    cdef const real *arow
    cdef const real *urow
    cdef const real *hrow
    cdef const real *prow
    cdef real *crow
    cdef real *sdrow
    cdef real *surow
    with nogil:
        for bi in range(B):
            carry[:, :] = 0
            for i in range(L - 1, -1, -1):
                grow = &gy[bi, i, 0]
                arow = &decay[bi, i, 0]
                urow = &drive[bi, i, 0]
                sdrow = &gdecay[bi, i, 0]
                surow = &gdrive[bi, i, 0]
                for n in range(N):
                    bn = Bm[bi, i, n]
                    cn = C[bi, i, n]
                    hrow = &hs[bi, i, n, 0]
                    prow = &hs[bi, i - 1, n, 0] if i > 0 else &zeros[0]
                    crow = &carry[n, 0]
                    for c in range(D):
                        lam[c] = grow[c] * cn + crow[c]
                    gC[bi, i, n] = _lane_dot(grow, hrow, D)
                    gB[bi, i, n] = _lane_dot(&lam[0], urow, D)
                    for c in range(D):
                        sdrow[c] = sdrow[c] + lam[c] * prow[c]
                        surow[c] = surow[c] + lam[c] * bn
                        crow[c] = arow[c] * lam[c]
    return gdecay_arr, gdrive_arr, gB_arr, gC_arr
