"""Pure-numpy scan kernels; the reference fallback for ``_scan``.

All arrays are C-contiguous with a leading batch axis:
``a, b, h: [B, L, D]``, ``h0: [B, D]``, selective-scan ``Bm, C: [B, L, N]``.
"""

import numpy as np


def linear_scan_fwd(a, b, h0):
    h = np.empty_like(b)
    prev = h0
    for i in range(b.shape[1]):
        prev = a[:, i] * prev + b[:, i]
        h[:, i] = prev
    return h


def linear_scan_bwd(a, h, h0, gh):
    L = a.shape[1]
    ga = np.empty_like(a)
    gb = np.empty_like(a)
    lam = np.zeros_like(h0)
    for i in range(L - 1, -1, -1):
        lam = gh[:, i] + lam
        gb[:, i] = lam
        ga[:, i] = lam * (h[:, i - 1] if i > 0 else h0)
        lam = a[:, i] * lam
    return ga, gb, lam


def selective_scan_fwd(decay, drive, Bm, C, store_states=True):
    Bsz, L, D = drive.shape
    N = Bm.shape[2]
    y = np.empty_like(drive)
    hs = np.empty((Bsz, L, N, D), dtype=drive.dtype) if store_states else None
    h = np.zeros((Bsz, N, D), dtype=drive.dtype)
    for i in range(L):
        h = decay[:, i, None, :] * h + drive[:, i, None, :] * Bm[:, i, :, None]
        y[:, i] = np.einsum("bnd,bn->bd", h, C[:, i])
        if hs is not None:
            hs[:, i] = h
    return y, hs


def selective_scan_bwd(decay, drive, Bm, C, hs, gy):
    Bsz, L, D = drive.shape
    N = Bm.shape[2]
    gdecay = np.empty_like(decay)
    gdrive = np.empty_like(drive)
    gB = np.empty_like(Bm)
    gC = np.empty_like(C)
    carry = np.zeros((Bsz, N, D), dtype=drive.dtype)
    zero = np.zeros((Bsz, N, D), dtype=drive.dtype)
    for i in range(L - 1, -1, -1):
        lam = gy[:, i, None, :] * C[:, i, :, None] + carry
        gC[:, i] = np.einsum("bd,bnd->bn", gy[:, i], hs[:, i])
        prev = hs[:, i - 1] if i > 0 else zero
        gdecay[:, i] = (lam * prev).sum(axis=1)
        gdrive[:, i] = (lam * Bm[:, i, :, None]).sum(axis=1)
        gB[:, i] = np.einsum("bnd,bd->bn", lam, drive[:, i])
        carry = decay[:, i, None, :] * lam
    return gdecay, gdrive, gB, gC
