# Compiled kernel core. Mirrors lidarmos._pure: float32 tensors in and out,
# float64 accumulation inside the loops.
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, floor

cnp.import_array()

BACKEND = "native"


def conv2d(cnp.ndarray[cnp.float32_t, ndim=3] x,
           cnp.ndarray[cnp.float32_t, ndim=4] kernel,
           int stride, bint circular_w):
    cdef int c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef int o = kernel.shape[0], kh = kernel.shape[2], kw = kernel.shape[3]
    cdef int ph = (kh - 1) // 2, pw = (kw - 1) // 2
    cdef int ho = (h + stride - 1) // stride
    cdef int wo = (w + stride - 1) // stride
    # pad once so the hot loops run branch-free; per output pixel the
    # accumulation order stays (ic, ki, kj)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] xp = np.zeros(
        (c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, ph:ph + h, pw:pw + w] = x
    if circular_w and pw:
        xp[:, ph:ph + h, :pw] = x[:, :, w - pw:]
        xp[:, ph:ph + h, pw + w:] = x[:, :, :pw]
    cdef cnp.ndarray[cnp.float32_t, ndim=3] out = np.empty((o, ho, wo), dtype=np.float32)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] acc = np.empty((ho, wo), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] xpv = xp
    cdef cnp.float32_t[:, :, :, ::1] kv = np.ascontiguousarray(kernel)
    cdef cnp.float32_t[:, :, ::1] ov = out
    cdef cnp.float64_t[:, ::1] av = acc
    cdef int oc, oh, ow, ic, ki, kj, ihp
    cdef double kval
    cdef double *arow
    cdef double *xrow
    for oc in range(o):
        acc[:, :] = 0.0
        for ic in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    kval = <double> kv[oc, ic, ki, kj]
                    if stride == 1:
                        for oh in range(ho):
                            arow = &av[oh, 0]
                            xrow = &xpv[ic, oh + ki, kj]
                            for ow in range(wo):
                                arow[ow] += kval * xrow[ow]
                    else:
                        for oh in range(ho):
                            ihp = oh * stride + ki
                            for ow in range(wo):
                                av[oh, ow] += kval * xpv[ic, ihp, ow * stride + kj]
        for oh in range(ho):
            for ow in range(wo):
                ov[oc, oh, ow] = <cnp.float32_t> av[oh, ow]
    return out


def maxpool2(cnp.ndarray[cnp.float32_t, ndim=3] x):
    cdef int c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef int ho = h // 2, wo = w // 2
    cdef cnp.ndarray[cnp.float32_t, ndim=3] out = np.empty((c, ho, wo), dtype=np.float32)
    cdef cnp.float32_t[:, :, :] xv = x
    cdef cnp.float32_t[:, :, :] ov = out
    cdef int ic, oh, ow
    cdef cnp.float32_t m, v
    for ic in range(c):
        for oh in range(ho):
            for ow in range(wo):
                m = xv[ic, 2 * oh, 2 * ow]
                v = xv[ic, 2 * oh, 2 * ow + 1]
                if v > m:
                    m = v
                v = xv[ic, 2 * oh + 1, 2 * ow]
                if v > m:
                    m = v
                v = xv[ic, 2 * oh + 1, 2 * ow + 1]
                if v > m:
                    m = v
                ov[ic, oh, ow] = m
    return out


def selective_scan(cnp.ndarray[cnp.float32_t, ndim=2] u,
                   cnp.ndarray[cnp.float32_t, ndim=2] delta,
                   cnp.ndarray[cnp.float32_t, ndim=2] a,
                   cnp.ndarray[cnp.float32_t, ndim=2] b,
                   cnp.ndarray[cnp.float32_t, ndim=2] c,
                   cnp.ndarray[cnp.float32_t, ndim=1] d):
    cdef int cd = u.shape[0], ln = u.shape[1], n = a.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] h = np.zeros((cd, n), dtype=np.float64)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] y = np.empty((cd, ln), dtype=np.float32)
    cdef cnp.float32_t[:, :] uv = u, dv = delta, av = a, bv = b, cv = c
    cdef cnp.float32_t[:] skip = d
    cdef cnp.float64_t[:, :] hv = h
    cdef cnp.float32_t[:, :] yv = y
    cdef int t, ch, j
    cdef double dt, du, acc
    for t in range(ln):
        for ch in range(cd):
            dt = <double> dv[ch, t]
            du = dt * <double> uv[ch, t]
            acc = 0.0
            for j in range(n):
                hv[ch, j] = exp(dt * <double> av[ch, j]) * hv[ch, j] + du * <double> bv[j, t]
                acc += <double> cv[j, t] * hv[ch, j]
            yv[ch, t] = <cnp.float32_t> (acc + <double> skip[ch] * <double> uv[ch, t])
    return y


def bilinear_gather(cnp.ndarray[cnp.float32_t, ndim=3] feat,
                    cnp.ndarray[cnp.float32_t, ndim=1] u,
                    cnp.ndarray[cnp.float32_t, ndim=1] v,
                    bint wrap_w):
    cdef int c = feat.shape[0], h = feat.shape[1], w = feat.shape[2]
    cdef int k = u.shape[0]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] out = np.empty((c, k), dtype=np.float32)
    cdef cnp.float32_t[:, :, :] fv = feat
    cdef cnp.float32_t[:] uv = u, vv = v
    cdef cnp.float32_t[:, :] ov = out
    cdef int i, ic, u0, v0, u1, v1
    cdef double uu, vvd, fu, fvd, w00, w01, w10, w11
    for i in range(k):
        uu = <double> uv[i]
        vvd = <double> vv[i]
        u0 = <int> floor(uu)
        v0 = <int> floor(vvd)
        fu = uu - u0
        fvd = vvd - v0
        if wrap_w:
            u1 = u0 + 1
            u0 = u0 % w
            if u0 < 0:
                u0 += w
            u1 = u1 % w
            if u1 < 0:
                u1 += w
        else:
            u1 = u0 + 1
            if u0 < 0:
                u0 = 0
            if u0 > w - 1:
                u0 = w - 1
            if u1 < 0:
                u1 = 0
            if u1 > w - 1:
                u1 = w - 1
        v1 = v0 + 1
        if v0 < 0:
            v0 = 0
        if v0 > h - 1:
            v0 = h - 1
        if v1 < 0:
            v1 = 0
        if v1 > h - 1:
            v1 = h - 1
        w00 = (1.0 - fvd) * (1.0 - fu)
        w01 = (1.0 - fvd) * fu
        w10 = fvd * (1.0 - fu)
        w11 = fvd * fu
        for ic in range(c):
            ov[ic, i] = <cnp.float32_t> (
                w00 * <double> fv[ic, v0, u0] + w01 * <double> fv[ic, v0, u1]
                + w10 * <double> fv[ic, v1, u0] + w11 * <double> fv[ic, v1, u1])
    return out
