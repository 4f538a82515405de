"""Pure numpy implementations of the hot kernels.

Semantics mirror ``lidarmos._native`` exactly (same padding rules, same
float64 accumulation, float32 results). This backend is selected when the
compiled extension is missing or ``LIDARMOS_PURE=1`` is set.
"""

import numpy as np

BACKEND = "python"


def conv2d(x, kernel, stride, circular_w):
    """Raw 2D convolution with 'same' padding at stride 1.

    x: (C, H, W) float32, kernel: (O, C, kh, kw) float32 with odd kh/kw.
    Height is always zero padded; the width axis wraps when circular_w
    is true and is zero padded otherwise. Output: (O, ceil(H/s), ceil(W/s)).
    """
    c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, ph:ph + h, pw:pw + w] = x
    if circular_w and pw:
        xp[:, ph:ph + h, :pw] = x[:, :, w - pw:]
        xp[:, ph:ph + h, pw + w:] = x[:, :, :pw]
    ho = -(-h // stride)
    wo = -(-w // stride)
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (c, kh, kw, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False)
    out = np.tensordot(kernel.astype(np.float64), win, axes=([1, 2, 3], [0, 1, 2]))
    with np.errstate(over="ignore"):
        # out-of-range values become inf here; callers reject non-finite output
        return np.ascontiguousarray(out, dtype=np.float32)


def maxpool2(x):
    """2x2 max pooling, stride 2. Requires even H and W."""
    c, h, w = x.shape
    return np.ascontiguousarray(
        x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4)), dtype=np.float32)


def selective_scan(u, delta, a, b, c, d):
    """Input-dependent linear state-space recurrence over one sequence.

    u, delta: (C, L); a: (C, N) negative decay rates; b, c: (N, L);
    d: (C,) skip gains. Step t:
        h_t = exp(delta_t * a) * h_{t-1} + delta_t * b_t * u_t
        y_t = <c_t, h_t> + d * u_t
    """
    cd, ln = u.shape
    n = a.shape[1]
    uf = u.astype(np.float64)
    df = delta.astype(np.float64)
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    cf = c.astype(np.float64)
    h = np.zeros((cd, n), dtype=np.float64)
    y = np.empty((cd, ln), dtype=np.float64)
    for t in range(ln):
        dt = df[:, t]
        h = np.exp(dt[:, None] * af) * h + (dt * uf[:, t])[:, None] * bf[None, :, t]
        y[:, t] = h @ cf[:, t]
    y += d.astype(np.float64)[:, None] * uf
    return np.ascontiguousarray(y, dtype=np.float32)


def bilinear_gather(feat, u, v, wrap_w):
    """Bilinear samples of feat (C, H, W) at fractional (u, v) pixel coords.

    u indexes the width axis and wraps around when wrap_w is true; v is
    clamped to the height range. Returns (C, K) float32.
    """
    _, h, w = feat.shape
    ff = feat.astype(np.float64)
    uu = u.astype(np.float64)
    vv = v.astype(np.float64)
    u0 = np.floor(uu).astype(np.int64)
    v0 = np.floor(vv).astype(np.int64)
    fu = uu - u0
    fv = vv - v0
    if wrap_w:
        u0m = u0 % w
        u1m = (u0 + 1) % w
    else:
        u0m = np.clip(u0, 0, w - 1)
        u1m = np.clip(u0 + 1, 0, w - 1)
    v0m = np.clip(v0, 0, h - 1)
    v1m = np.clip(v0 + 1, 0, h - 1)
    out = ((1.0 - fv) * (1.0 - fu) * ff[:, v0m, u0m]
           + (1.0 - fv) * fu * ff[:, v0m, u1m]
           + fv * (1.0 - fu) * ff[:, v1m, u0m]
           + fv * fu * ff[:, v1m, u1m])
    return np.ascontiguousarray(out, dtype=np.float32)
