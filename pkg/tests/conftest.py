import numpy as np
import pytest

from lidarmos.kernels import BN_EPS, ConvParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def identity_bn(channels):
    """BN stats whose inference affine is exactly the identity (var chosen so
    var + eps == 1.0 in float32)."""
    return {
        "bn_scale": np.ones(channels, np.float32),
        "bn_shift": np.zeros(channels, np.float32),
        "bn_mean": np.zeros(channels, np.float32),
        "bn_var": np.full(channels, 1.0 - BN_EPS, np.float32),
    }


def make_conv(kernel, bias=None, relu=False, **bn):
    kernel = np.asarray(kernel, np.float32)
    out_c = kernel.shape[0]
    if bias is None:
        bias = np.zeros(out_c, np.float32)
    stats = identity_bn(out_c)
    stats.update(bn)
    return ConvParams(kernel, bias, stats["bn_scale"], stats["bn_shift"],
                      stats["bn_mean"], stats["bn_var"], relu=relu)


def random_conv(rng, in_c, out_c, k=3, relu=False, identity_stats=True):
    kernel = rng.standard_normal((out_c, in_c, k, k)).astype(np.float32) / (k * k)
    bias = rng.standard_normal(out_c).astype(np.float32) * 0.1
    if identity_stats:
        return make_conv(kernel, bias, relu=relu)
    return ConvParams(kernel, bias,
                      rng.uniform(0.5, 1.5, out_c).astype(np.float32),
                      rng.standard_normal(out_c).astype(np.float32) * 0.1,
                      rng.standard_normal(out_c).astype(np.float32) * 0.1,
                      rng.uniform(0.5, 1.5, out_c).astype(np.float32),
                      relu=relu)
