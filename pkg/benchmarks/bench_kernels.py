#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure numpy fallback.

Run after building the extension in place:

    python3 setup.py build_ext --inplace
    python3 benchmarks/bench_kernels.py [--repeats N]

Covers the three backend kernels plus one full desk-profile network forward
per backend. The forward timing forces each backend via the kernels module
internals, so a single process can compare both.
"""

import argparse
import sys
import time

import numpy as np

from lidarmos import _pure
from lidarmos import kernels as K
from lidarmos.network import Network
from lidarmos.pipeline import frame_inputs
from lidarmos.projection import profile
from lidarmos.synth import Box, SyntheticSceneSpec, synth_sequence
from lidarmos.weights import NetworkConfig, random_weights

try:
    from lidarmos import _native
except ImportError:
    _native = None


def timeit(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_case(name, make_args, native_fn, pure_fn, repeats, rows, note=""):
    args = make_args()
    t_pure = timeit(lambda: pure_fn(*args), repeats)
    if native_fn is None:
        rows.append((name, None, t_pure, note))
        return
    t_native = timeit(lambda: native_fn(*args), repeats)
    a, b = native_fn(*args), pure_fn(*args)
    assert np.allclose(a, b, rtol=1e-5, atol=1e-5), f"{name}: backends disagree"
    rows.append((name, t_native, t_pure, note))


def forward_case(mode, repeats):
    cfg = profile("desk")
    spec = SyntheticSceneSpec(
        frames=cfg.window + cfg.stack_depth, seed=0,
        static_boxes=[Box([8, 1, -0.9], [2, 2, 1.2])],
        dynamic_boxes=[Box([5, -3, -0.75], [2.4, 0.8, 1.5], [0, 2, 0])],
        ego_velocity=[1, 0, 0])
    frames = synth_sequence(spec)
    stack, _, bev, corr = frame_inputs([f.cloud for f in frames],
                                       [f.pose for f in frames], cfg)
    net_cfg = NetworkConfig.for_profile("desk", window=cfg.window)
    net = Network(net_cfg, random_weights(net_cfg, seed=0))
    saved = K.backend_name()
    K.set_backend_mode(mode)
    try:
        return timeit(lambda: net.forward(stack.rv, stack.bev, bev.values, corr),
                      max(1, repeats // 4))
    finally:
        K.set_backend_mode(saved)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=10)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = []

    for c, o, h, w, label in ((4, 16, 32, 512, "stem, range view"),
                              (32, 16, 128, 128, "fusion, full-res BEV"),
                              (192, 64, 32, 32, "decoder, mid pyramid")):
        x = rng.standard_normal((c, h, w)).astype(np.float32)
        kern = rng.standard_normal((o, c, 3, 3)).astype(np.float32)
        bench_case(f"conv2d {c}->{o} @{h}x{w}", lambda x=x, k=kern: (x, k, 1, True),
                   _native.conv2d if _native else None, _pure.conv2d,
                   args.repeats, rows, label)

    cch, ns, ln = 256, 8, 256
    u = rng.standard_normal((cch, ln)).astype(np.float32)
    d = (rng.random((cch, ln)) * 0.1).astype(np.float32)
    a = (-rng.random((cch, ns))).astype(np.float32)
    b = rng.standard_normal((ns, ln)).astype(np.float32)
    cm = rng.standard_normal((ns, ln)).astype(np.float32)
    sk = rng.standard_normal(cch).astype(np.float32)
    bench_case(f"selective_scan C={cch} L={ln} N={ns}",
               lambda: (u, d, a, b, cm, sk),
               _native.selective_scan if _native else None,
               _pure.selective_scan, args.repeats, rows, "bottleneck scan")

    x = rng.standard_normal((16, 128, 128)).astype(np.float32)
    bench_case("maxpool2 16 @128x128", lambda: (x,),
               _native.maxpool2 if _native else None, _pure.maxpool2,
               args.repeats, rows, "")

    feat = rng.standard_normal((16, 32, 512)).astype(np.float32)
    uu = (rng.random(12000) * 511).astype(np.float32)
    vv = (rng.random(12000) * 31).astype(np.float32)
    bench_case("bilinear_gather 12k pts", lambda: (feat, uu, vv, True),
               _native.bilinear_gather if _native else None,
               _pure.bilinear_gather, args.repeats, rows, "cross-view resample")

    if _native is not None:
        t_native = forward_case("native", args.repeats)
    else:
        t_native = None
    t_pure = forward_case("python", args.repeats)
    rows.append(("forward_full desk", t_native, t_pure, "end to end"))

    name_w = max(len(r[0]) for r in rows) + 2
    print(f"{'kernel':<{name_w}}{'native':>10}{'pure':>10}{'ratio':>8}  note")
    for name, tn, tp, note in rows:
        if tn is None:
            print(f"{name:<{name_w}}{'n/a':>10}{tp * 1e3:>9.2f}m{'':>8}  {note}")
        else:
            print(f"{name:<{name_w}}{tn * 1e3:>9.2f}m{tp * 1e3:>9.2f}m"
                  f"{tp / tn:>8.2f}  {note}")
    if _native is not None:
        t_auto = forward_case("auto", args.repeats)
        print(f"\nforward_full desk, auto routing (default): {t_auto * 1e3:.2f} ms")
    else:
        print("\ncompiled extension not built; showing pure backend only",
              file=sys.stderr)


if __name__ == "__main__":
    main()
