"""Dense-tensor kernels for the network forward pass.

Tensors are contiguous float32 numpy arrays, row-major, 1 to 3 axes; the
3-axis layout is (channel, row, column). Every op validates that its output
is finite and raises KernelError otherwise. All ops are pure and
deterministic.

The heavy inner loops (convolution, selective scan, bilinear gather) live in
a compiled extension when available; ``lidarmos._pure`` provides a numpy
fallback with identical semantics. Set LIDARMOS_PURE=1 to force the
fallback.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import _pure

try:
    from . import _native
except ImportError:
    _native = None

BN_EPS = 1e-5


class KernelError(ValueError):
    """Contract violation inside a tensor kernel."""


class _Dispatch:
    """Per-kernel backend table.

    'auto' (the default) routes each kernel to the faster implementation
    measured by benchmarks/bench_kernels.py: the sequential scan, pooling
    and gathering go to the compiled core, while convolution stays on the
    BLAS-backed numpy path. 'native' and 'python' force one side.
    """

    def __init__(self, mode):
        self.set_mode(mode)

    def set_mode(self, mode):
        if mode not in ("auto", "native", "python"):
            raise KernelError(f"unknown kernel backend mode {mode!r}")
        if _native is None and mode != "python":
            mode = "python"
        self.mode = mode
        self.conv2d = _native.conv2d if mode == "native" else _pure.conv2d
        fast = _pure if mode == "python" else _native
        self.maxpool2 = fast.maxpool2
        self.selective_scan = fast.selective_scan
        self.bilinear_gather = fast.bilinear_gather


def _initial_mode():
    if os.environ.get("LIDARMOS_PURE", "") == "1":
        return "python"
    return os.environ.get("LIDARMOS_BACKEND", "auto").lower() or "auto"


_backend = _Dispatch(_initial_mode())


def backend_name():
    """Active kernel backend mode: 'auto', 'native' or 'python'."""
    return _backend.mode


def set_backend_mode(mode):
    """Switch kernel routing at runtime (benchmarking and tests)."""
    _backend.set_mode(mode)


def _f32(x, name="input"):
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > 3:
        raise KernelError(f"{name}: expected 1-3 axes, got {arr.ndim}")
    return arr


def _finite(out, op):
    if not np.isfinite(out).all():
        raise KernelError(f"{op}: non-finite values in output")
    return out


@dataclass
class ConvParams:
    """Learned parameters of one conv + batch-norm + activation unit.

    kernel: (outC, inC, kH, kW) with odd kH, kW; bias: (outC,).
    Batch norm is inference-form: (v - mean) / sqrt(var + eps) * scale + shift.
    """

    kernel: np.ndarray
    bias: np.ndarray
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    relu: bool = True

    def __post_init__(self):
        self.kernel = np.ascontiguousarray(self.kernel, dtype=np.float32)
        for name in ("bias", "bn_scale", "bn_shift", "bn_mean", "bn_var"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))
        if self.kernel.ndim != 4:
            raise KernelError("ConvParams: kernel must be (outC, inC, kH, kW)")
        out_c, _, kh, kw = self.kernel.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise KernelError(f"ConvParams: kernel extents must be odd, got {kh}x{kw}")
        for name in ("bias", "bn_scale", "bn_shift", "bn_mean", "bn_var"):
            if getattr(self, name).shape != (out_c,):
                raise KernelError(f"ConvParams: {name} must have shape ({out_c},)")
        if not (self.bn_var > 0).all():
            raise KernelError("ConvParams: bn_var must be strictly positive")

    @property
    def in_channels(self):
        return self.kernel.shape[1]

    @property
    def out_channels(self):
        return self.kernel.shape[0]


def identity_conv_params(channels, relu=False):
    """1x1 unit-kernel ConvParams whose full composite is an exact identity."""
    kernel = np.zeros((channels, channels, 1, 1), dtype=np.float32)
    kernel[np.arange(channels), np.arange(channels), 0, 0] = 1.0
    zeros = np.zeros(channels, dtype=np.float32)
    ones = np.ones(channels, dtype=np.float32)
    # var = 1 - eps so that sqrt(var + eps) is exactly 1
    return ConvParams(kernel, zeros, ones, zeros, zeros,
                      np.full(channels, 1.0 - BN_EPS, dtype=np.float32), relu=relu)


def conv2d_circular(x, params, stride=1, pad_mode="circular"):
    """Convolution + inference batch-norm + optional ReLU.

    pad_mode 'circular' wraps the width (azimuth) axis and zero pads height;
    'zero' zero pads both axes. Output extents: (outC, ceil(H/s), ceil(W/s)).
    """
    x = _f32(x, "conv input")
    if x.ndim != 3:
        raise KernelError("conv2d_circular: input must be (C, H, W)")
    if x.shape[0] != params.in_channels:
        raise KernelError(
            f"conv2d_circular: input has {x.shape[0]} channels, "
            f"kernel expects {params.in_channels}")
    if stride not in (1, 2):
        raise KernelError(f"conv2d_circular: stride must be 1 or 2, got {stride}")
    if pad_mode not in ("circular", "zero"):
        raise KernelError(f"conv2d_circular: unknown pad_mode {pad_mode!r}")
    out = _backend.conv2d(x, params.kernel, stride, pad_mode == "circular")
    out = out + params.bias[:, None, None]
    inv = 1.0 / np.sqrt(params.bn_var + np.float32(BN_EPS))
    out = (out - params.bn_mean[:, None, None]) * (params.bn_scale * inv)[:, None, None] \
        + params.bn_shift[:, None, None]
    if params.relu:
        out = np.maximum(out, 0.0, dtype=np.float32)
    return _finite(np.ascontiguousarray(out, dtype=np.float32), "conv2d_circular")


def maxpool2(x):
    """2x2 window max, stride 2. Extents halve; odd extents are rejected."""
    x = _f32(x, "maxpool input")
    if x.ndim != 3:
        raise KernelError("maxpool2: input must be (C, H, W)")
    if x.size == 0:
        raise KernelError("maxpool2: empty tensor")
    _, h, w = x.shape
    if h % 2 or w % 2:
        raise KernelError(f"maxpool2: extents must be even, got {h}x{w}")
    return _finite(_backend.maxpool2(x), "maxpool2")


def avgpool(x, over="spatial"):
    """Arithmetic mean over the spatial axes -> (C,1,1), or over the
    channel axis -> (1,H,W)."""
    x = _f32(x, "avgpool input")
    if x.ndim != 3 or x.size == 0:
        raise KernelError("avgpool: input must be a non-empty (C, H, W) tensor")
    if over == "spatial":
        out = x.mean(axis=(1, 2), keepdims=True, dtype=np.float64)
    elif over == "channel":
        out = x.mean(axis=0, keepdims=True, dtype=np.float64)
    else:
        raise KernelError(f"avgpool: unknown mode {over!r}")
    return _finite(np.ascontiguousarray(out, dtype=np.float32), "avgpool")


def relu(x):
    x = _f32(x)
    return np.maximum(x, 0.0, dtype=np.float32)


def sigmoid(x):
    """Elementwise logistic; saturates exactly to 0/1 beyond |x| > 40."""
    x = _f32(x)
    z = np.clip(x, -40.0, 40.0).astype(np.float64)
    out = (1.0 / (1.0 + np.exp(-z))).astype(np.float32)
    out[x > 40.0] = 1.0
    out[x < -40.0] = 0.0
    return _finite(out, "sigmoid")


def softmax_channels(x):
    """Softmax across the channel axis per pixel, with max subtraction."""
    x = _f32(x)
    if x.ndim != 3 or x.shape[0] < 1:
        raise KernelError("softmax_channels: input must be (C, H, W) with C >= 1")
    z = x.astype(np.float64)
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=0, keepdims=True)
    return _finite(np.ascontiguousarray(out, dtype=np.float32), "softmax_channels")


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax_channels(x)
    raise KernelError(f"activation: unknown kind {kind!r}")


def pixel_shuffle(x, r):
    """Channel-to-space rearrangement: out(c, h*r+i, w*r+j) = in(c*r*r + i*r + j, h, w)."""
    x = _f32(x)
    if x.ndim != 3:
        raise KernelError("pixel_shuffle: input must be (C, H, W)")
    c, h, w = x.shape
    if c % (r * r):
        raise KernelError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    co = c // (r * r)
    out = x.reshape(co, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(co, h * r, w * r)
    return np.ascontiguousarray(out)


def concat_channels(xs):
    """Concatenate along the channel axis; spatial extents must match."""
    arrs = [_f32(x) for x in xs]
    if not arrs:
        raise KernelError("concat_channels: empty list")
    hw = arrs[0].shape[1:]
    for a in arrs[1:]:
        if a.shape[1:] != hw:
            raise KernelError(
                f"concat_channels: spatial mismatch {a.shape[1:]} vs {hw}")
    return np.ascontiguousarray(np.concatenate(arrs, axis=0))


def add(a, b):
    a, b = _f32(a), _f32(b)
    if a.shape != b.shape:
        raise KernelError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _finite(a + b, "add")


def mul(a, b):
    a, b = _f32(a), _f32(b)
    if a.shape != b.shape:
        raise KernelError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _finite(a * b, "mul")


def linear(x, w, b):
    """Per-pixel linear map across channels: (C,H,W) x (O,C) + (O,) -> (O,H,W)."""
    x = _f32(x, "linear input")
    w = np.asarray(w, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise KernelError(
            f"linear: inner dimension mismatch, x {x.shape} vs w {w.shape}")
    if b.shape != (w.shape[0],):
        raise KernelError(f"linear: bias must have shape ({w.shape[0]},)")
    out = np.tensordot(w.astype(np.float64), x.astype(np.float64), axes=([1], [0]))
    out += b.astype(np.float64)[:, None, None]
    return _finite(np.ascontiguousarray(out, dtype=np.float32), "linear")


def selective_scan(u, delta, a, b, c, d):
    """One-direction selective (S6) scan; see lidarmos._pure.selective_scan."""
    u = np.ascontiguousarray(u, dtype=np.float32)
    delta = np.ascontiguousarray(delta, dtype=np.float32)
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    c = np.ascontiguousarray(c, dtype=np.float32)
    d = np.ascontiguousarray(d, dtype=np.float32)
    if u.shape != delta.shape or a.shape[0] != u.shape[0]:
        raise KernelError("selective_scan: inconsistent u/delta/a shapes")
    if b.shape != (a.shape[1], u.shape[1]) or c.shape != b.shape:
        raise KernelError("selective_scan: b/c must be (N, L)")
    out = _backend.selective_scan(u, delta, a, b, c, d)
    return _finite(out, "selective_scan")


def bilinear_gather(feat, u, v, wrap_w=True):
    """Bilinear samples of (C,H,W) features at fractional pixel coords."""
    feat = _f32(feat, "gather input")
    u = np.ascontiguousarray(u, dtype=np.float32)
    v = np.ascontiguousarray(v, dtype=np.float32)
    if u.shape != v.shape or u.ndim != 1:
        raise KernelError("bilinear_gather: u and v must be matching 1-D arrays")
    return _finite(_backend.bilinear_gather(feat, u, v, wrap_w), "bilinear_gather")
