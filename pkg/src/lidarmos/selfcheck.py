"""Embedded release-gate property checks, runnable via `lidarmos selfcheck`.

Each check is self-contained, deterministic, and desk-scale (the full run
targets well under two minutes on a laptop CPU). On failure the offending
inputs are serialized to JSON for replay.
"""

import json
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import network
from .dataio import remap_mos, transform_to_frame
from .kernels import ConvParams, conv2d_circular, selective_scan
from .losses import (cross_entropy, cross_entropy_grad, lovasz_grad_probs,
                     lovasz_softmax, softmax_probs)
from .metrics import ConfusionCounts, label_grid_from_points
from .network import SS2DDirParams
from .projection import (build_correspondence, profile, project_bev,
                         project_range, range_pixel_of, bev_cell_of)
from .residual import build_residual_stack
from .synth import Box, SyntheticSceneSpec, synth_sequence
from .weights import NetworkConfig, random_weights


@dataclass
class CheckResult:
    name: str
    ok: bool
    seconds: float
    detail: str
    replay: dict = None


def _scan_reference_quadratic(u, delta, a, b, c, d):
    """Literal unrolled form of the scan: y_t = sum_{s<=t} c_t . (prod of
    decays) delta_s b_s x_s + d x_t. Quadratic on purpose."""
    u = u.astype(np.float64)
    delta = delta.astype(np.float64)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    c = c.astype(np.float64)
    cd, ln = u.shape
    n = a.shape[1]
    decay = np.exp(delta[:, :, None] * a[:, None, :])  # (C, L, N)
    y = np.zeros((cd, ln))
    for t in range(ln):
        prod = np.ones((cd, n))
        acc = np.zeros(cd)
        for s in range(t, -1, -1):
            if s < t:
                prod = prod * decay[:, s + 1, :]
            term = (delta[:, s] * u[:, s])[:, None] * b[None, :, s] * prod
            acc += term @ c[:, t]
        y[:, t] = acc + d * u[:, t]
    return y


def _ss2d_reference(z, dirs):
    """Scan expansion + quadratic recurrence + merge, written independently
    of the production path."""
    cch, h, w = z.shape
    orderings = []
    fwd = [(i, j) for i in range(h) for j in range(w)]
    col = [(i, j) for j in range(w) for i in range(h)]
    orderings.append(fwd)
    orderings.append(fwd[::-1])
    orderings.append(col)
    orderings.append(col[::-1])
    total = np.zeros((cch, h, w))
    for order, p in zip(orderings, dirs):
        seq = np.stack([z[:, i, j] for (i, j) in order], axis=1).astype(np.float64)
        delta = np.logaddexp(0.0, p.delta_w.astype(np.float64) @ seq
                             + p.delta_b.astype(np.float64)[:, None])
        bmat = p.b_w.astype(np.float64) @ seq + p.b_b.astype(np.float64)[:, None]
        cmat = p.c_w.astype(np.float64) @ seq + p.c_b.astype(np.float64)[:, None]
        a = -np.exp(p.a_log.astype(np.float64))
        y = _scan_reference_quadratic(seq, delta, a, bmat, cmat,
                                      p.skip.astype(np.float64))
        for t, (i, j) in enumerate(order):
            total[:, i, j] += y[:, t]
    return total


def _random_dir_params(rng, c, n):
    return SS2DDirParams(
        rng.uniform(-1, 1, (c, c)).astype(np.float32) / np.sqrt(c),
        rng.uniform(-1, 1, c).astype(np.float32),
        rng.uniform(-1, 1, (n, c)).astype(np.float32) / np.sqrt(c),
        rng.uniform(-1, 1, n).astype(np.float32),
        rng.uniform(-1, 1, (n, c)).astype(np.float32) / np.sqrt(c),
        rng.uniform(-1, 1, n).astype(np.float32),
        rng.uniform(-2, 1, (c, n)).astype(np.float32),
        rng.uniform(-1, 1, c).astype(np.float32))


def check_scan_oracle():
    rng = np.random.default_rng(11)
    worst = 0.0
    for case in range(12):
        h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        c = int(rng.integers(1, 5))
        n = int(rng.integers(1, 9))
        z = rng.standard_normal((c, h, w)).astype(np.float32)
        dirs = [_random_dir_params(rng, c, n) for _ in range(4)]
        got = network.ss2d(z, dirs)
        want = _ss2d_reference(z, dirs)
        err = np.abs(got - want).max() / max(np.abs(want).max(), 1e-9)
        worst = max(worst, err)
        if err > 1e-5:
            return False, f"case {case}: rel err {err:.2e} > 1e-5", {
                "case": case, "z": z.tolist(), "rel_err": float(err)}
    return True, f"12 cases, worst rel err {worst:.2e}", None


def check_prefix_sum():
    u = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    ones = np.ones((1, 3), dtype=np.float32)
    y = selective_scan(u, ones, np.zeros((1, 1), dtype=np.float32),
                       ones, ones, np.zeros(1, dtype=np.float32))
    want = np.array([[1.0, 3.0, 6.0]], dtype=np.float32)
    if not np.array_equal(y, want):
        return False, f"decay-free scan gave {y.tolist()}", {"got": y.tolist()}
    return True, "[1,2,3] -> [1,3,6] exact", None


def check_circular_shift():
    rng = np.random.default_rng(5)
    for case in range(20):
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(2, 9)), int(rng.integers(4, 17))
        x = rng.standard_normal((c_in, h, w)).astype(np.float32)
        params = ConvParams(
            rng.standard_normal((c_out, c_in, 3, 3)).astype(np.float32),
            rng.standard_normal(c_out).astype(np.float32),
            np.ones(c_out, np.float32), np.zeros(c_out, np.float32),
            np.zeros(c_out, np.float32), np.ones(c_out, np.float32),
            relu=False)
        s = int(rng.integers(1, w))
        out = conv2d_circular(x, params, 1, "circular")
        out_shifted = conv2d_circular(np.roll(x, s, axis=2), params, 1, "circular")
        if not np.array_equal(np.roll(out, s, axis=2), out_shifted):
            return False, f"case {case}: shift {s} not exact", {
                "case": case, "shift": s}
    return True, "20 cases commute exactly with column rotation", None


def check_projection_roundtrip():
    cfg = profile("desk")
    spec = SyntheticSceneSpec(
        frames=3, seed=3,
        static_boxes=[Box([8, 1, -0.9], [2, 2, 1.2]),
                      Box([-6, -5, -0.8], [1.5, 3, 1.4])],
        dynamic_boxes=[Box([10, -4, -1.0], [1.5, 1.5, 1.0], [1.5, 0.5, 0])],
        ego_velocity=[0.8, 0, 0])
    bad = 0
    entries = 0
    for frame in synth_sequence(spec):
        rv = project_range(frame.cloud, cfg)
        bev = project_bev(frame.cloud, cfg)
        rows, cols = np.nonzero(rv.valid)
        pts = frame.cloud.points[rv.point_index[rows, cols]]
        u, v, _ = range_pixel_of(pts, cfg.rv)
        bad += int((u != cols).sum() + (v != rows).sum())
        rows, cols = np.nonzero(bev.valid)
        pts = frame.cloud.points[bev.point_index[rows, cols]]
        cu, cv = bev_cell_of(pts, cfg.bev)
        bad += int((cu != rows).sum() + (cv != cols).sum())
        corr = build_correspondence(rv, bev)
        er, ec = np.nonzero(corr.has_entry)
        entries += er.size
        idx = bev.point_index[er, ec]
        cu, cv = bev_cell_of(frame.cloud.points[idx], cfg.bev)
        bad += int((cu != er).sum() + (cv != ec).sum())
    if bad:
        return False, f"{bad} mismatched round trips", {"bad": bad}
    return True, f"all round trips exact ({entries} correspondence entries)", None


def check_gradients():
    rng = np.random.default_rng(17)
    h_step = 1e-4
    for case in range(6):
        logits = rng.standard_normal((3, 4, 4))
        labels = rng.integers(0, 3, (4, 4))
        labels.flat[0] = 1
        grad = cross_entropy_grad(logits, labels)
        for _ in range(8):
            c, i, j = rng.integers(0, 3), rng.integers(0, 4), rng.integers(0, 4)
            up, dn = logits.copy(), logits.copy()
            up[c, i, j] += h_step
            dn[c, i, j] -= h_step
            fd = (cross_entropy(up, labels) - cross_entropy(dn, labels)) / (2 * h_step)
            if abs(fd - grad[c, i, j]) > 1e-5:
                return False, f"CE grad case {case}: fd {fd:.6f} vs {grad[c, i, j]:.6f}", \
                    {"case": case}
        probs = rng.dirichlet([2.0, 2.0, 2.0], size=(4, 4)).transpose(2, 0, 1)
        grad = lovasz_grad_probs(probs, labels)
        for _ in range(8):
            c, i, j = rng.integers(0, 3), rng.integers(0, 4), rng.integers(0, 4)
            up, dn = probs.copy(), probs.copy()
            up[c, i, j] += h_step
            dn[c, i, j] -= h_step
            fd = (lovasz_softmax(up, labels, check_normalized=False)
                  - lovasz_softmax(dn, labels, check_normalized=False)) / (2 * h_step)
            if abs(fd - grad[c, i, j]) > 1e-4:
                return False, \
                    f"lovasz grad case {case}: fd {fd:.6f} vs {grad[c, i, j]:.6f}", \
                    {"case": case}
    return True, "CE and lovasz gradients match finite differences", None


def _static_scene(frames=10, seed=1):
    return SyntheticSceneSpec(
        frames=frames, seed=seed,
        static_boxes=[Box([10, 2, -0.9], [2, 2, 1.2]),
                      Box([6, -6, -0.75], [2.5, 1.5, 1.5]),
                      Box([-8, 4, -0.8], [2, 2, 1.4])],
        ego_velocity=[1.0, 0, 0])


def static_residual_p95(frames, cfg):
    """Worst per-channel 95th percentile over defined pixels, across every
    reference frame that has full history."""
    worst = 0.0
    clouds = [f.cloud for f in frames]
    poses = [f.pose for f in frames]
    for k in range(cfg.window + cfg.stack_depth - 1, len(frames)):
        stack = build_residual_stack(clouds[:k + 1], poses[:k + 1], cfg)
        for ch in range(cfg.window):
            for view, defined in ((stack.rv[ch], stack.rv_defined[ch]),
                                  (stack.bev[ch], stack.bev_defined[ch])):
                if defined.any():
                    worst = max(worst, float(np.percentile(view[defined], 95)))
    return worst


def check_residual_static():
    cfg = profile("desk")
    frames = synth_sequence(_static_scene())
    worst = static_residual_p95(frames, cfg)
    if worst >= 0.1:
        return False, f"static 95th percentile {worst:.3f} >= 0.1", {"p95": worst}
    return True, f"static residual 95th percentile {worst:.4f} < 0.1", None


def moving_box_cell_stats(frames, cfg, threshold=0.5):
    """(hot fraction of box cells, hot fraction of pure-ground cells).

    All footprints are taken in the reference (newest) frame after ego
    compensation, matching the residual grid. Box cells: the moving object's
    BEV footprint in the newest or the largest-lag frame. Ground cells:
    cells that only ever contain static hits across the whole window. Both
    sets are restricted to cells where the residual is defined; hot = max
    residual over channels above the threshold.
    """
    stack = build_residual_stack([f.cloud for f in frames],
                                 [f.pose for f in frames], cfg)
    res = stack.bev.max(axis=0)
    defined = stack.bev_defined.any(axis=0)
    ref_pose = frames[-1].pose

    def footprint(frame, want_moving):
        cloud = transform_to_frame(frame.cloud, frame.pose, ref_pose)
        mask = (remap_mos(cloud.labels) == 2) == want_moving
        bev = project_bev(cloud, cfg)
        cells = bev.point_cell[mask & bev.point_valid]
        out = np.zeros(res.shape, dtype=bool)
        out[cells[:, 0], cells[:, 1]] = True
        return out

    box_cells = footprint(frames[-1], True) | footprint(frames[-1 - cfg.window], True)
    box_ever = np.zeros(res.shape, dtype=bool)
    ground_cells = np.zeros(res.shape, dtype=bool)
    for frame in frames:
        box_ever |= footprint(frame, True)
        ground_cells |= footprint(frame, False)
    ground_cells &= ~box_ever
    box_cells &= defined
    ground_cells &= defined
    frac_box = float((res[box_cells] > threshold).mean())
    frac_ground = float((res[ground_cells] > threshold).mean())
    return frac_box, frac_ground


def moving_box_scene(seed=2):
    """A tall narrow object crossing laterally at 2 m/s near the sensor: its
    vertical faces carry the elevation-span evidence the BEV residual keys
    on, and the moving ego sweeps the ground rings so wake cells stay
    defined."""
    return SyntheticSceneSpec(
        frames=8, seed=seed,
        dynamic_boxes=[Box([5, 0, -0.75], [2.4, 0.8, 1.5], [0, 2.0, 0])],
        ego_velocity=[1.0, 0, 0])


def check_residual_moving():
    cfg = profile("desk")
    frames = synth_sequence(moving_box_scene())
    frac_box, frac_ground = moving_box_cell_stats(frames, cfg)
    if frac_box < 0.5 or frac_ground > 0.01:
        return False, f"box {frac_box:.2f} (need >= 0.5), ground {frac_ground:.4f}", \
            {"frac_box": frac_box, "frac_ground": frac_ground}
    return True, f"box cells {frac_box:.0%} hot, ground {frac_ground:.2%}", None


def check_lovasz_vertex():
    worst = 0.0
    for n_cells in (2, 3):
        for gt_bits in range(2 ** n_cells):
            for pd_bits in range(2 ** n_cells):
                gt = np.array([1 + ((gt_bits >> i) & 1) for i in range(n_cells)])
                pd = np.array([1 + ((pd_bits >> i) & 1) for i in range(n_cells)])
                probs = np.zeros((3, 1, n_cells))
                probs[pd, 0, np.arange(n_cells)] = 1.0
                loss = lovasz_softmax(probs, gt.reshape(1, -1))
                counts = ConfusionCounts()
                counts.accumulate(pd, gt)
                ious = []
                for c in range(3):
                    if (gt == c).any() or (pd == c).any():
                        ious.append(counts.iou(c))
                want = float(np.mean([1.0 - v for v in ious]))
                worst = max(worst, abs(loss - want))
    if worst > 1e-9:
        return False, f"vertex gap {worst:.2e} > 1e-9", {"gap": worst}
    return True, f"all binary enumerations match 1 - IoU (gap {worst:.1e})", None


def _forward_once(seed):
    cfg = profile("desk")
    net_cfg = NetworkConfig.for_profile("desk", window=cfg.window)
    frames = synth_sequence(_static_scene(frames=cfg.window + cfg.stack_depth,
                                          seed=seed))
    clouds = [f.cloud for f in frames]
    poses = [f.pose for f in frames]
    stack = build_residual_stack(clouds, poses, cfg)
    bev = project_bev(clouds[-1], cfg)
    rv = project_range(clouds[-1], cfg)
    corr = build_correspondence(rv, bev)
    store = random_weights(net_cfg, seed=seed)
    net = network.Network(net_cfg, store)
    return net.forward(stack.rv, stack.bev, bev.values, corr)


def check_forward_determinism():
    a = _forward_once(0)
    b = _forward_once(0)
    if a[0].shape != (3, 128, 128) or a[1].shape != (3, 128, 128):
        return False, f"bad output shapes {a[0].shape} / {a[1].shape}", None
    if not (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])):
        return False, "repeated forward runs differ", None
    if not (np.isfinite(a[0]).all() and np.isfinite(a[1]).all()):
        return False, "non-finite logits", None
    return True, "(3,128,128) twice, bit-identical and finite", None


def check_eval_loop():
    cfg = profile("desk")
    frames = synth_sequence(SyntheticSceneSpec(
        frames=3, seed=4,
        dynamic_boxes=[Box([8, 0, -0.9], [2, 2, 1.2], [2.0, 0, 0])]))
    counts = ConfusionCounts()
    for frame in frames:
        mos = remap_mos(frame.cloud.labels)
        counts.accumulate(mos, mos)
        grid = label_grid_from_points(project_bev(frame.cloud, cfg), mos)
        counts.accumulate(grid, grid)
    if counts.iou(2) != 1.0 or counts.iou(1) != 1.0:
        return False, f"self-IoU != 1.0: {counts.iou(2)}", None
    return True, "ground truth as prediction scores IoU 1.0", None


CHECKS = [
    ("projection-roundtrip", check_projection_roundtrip),
    ("circular-shift-equivariance", check_circular_shift),
    ("scan-oracle", check_scan_oracle),
    ("prefix-sum-limit", check_prefix_sum),
    ("gradient-fd", check_gradients),
    ("residual-static", check_residual_static),
    ("residual-moving", check_residual_moving),
    ("lovasz-vertex", check_lovasz_vertex),
    ("forward-determinism", check_forward_determinism),
    ("eval-loop", check_eval_loop),
]

FAULTS = ("scan-reverse",)


def run_all(out_dir=None, fault=None):
    """Run every check; returns (results, all_ok). `fault` flips a test hook
    so the harness itself can be validated."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; known: {FAULTS}")
    network._fault_reverse_scan = fault == "scan-reverse"
    results = []
    try:
        for name, fn in CHECKS:
            t0 = time.perf_counter()
            ok, detail, replay = fn()
            dt = time.perf_counter() - t0
            if not ok and replay is not None:
                target = out_dir or tempfile.gettempdir()
                os.makedirs(target, exist_ok=True)
                path = os.path.join(target, f"selfcheck_{name}_replay.json")
                with open(path, "w") as fh:
                    json.dump({"check": name, "inputs": replay}, fh, sort_keys=True)
                detail += f" (replay: {path})"
            results.append(CheckResult(name, ok, dt, detail))
    finally:
        network._fault_reverse_scan = False
    return results, all(r.ok for r in results)


def format_table(results):
    width = max(len(r.name) for r in results) + 2
    lines = [f"{'check':<{width}}{'status':<8}{'time':>8}  detail"]
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        lines.append(f"{r.name:<{width}}{status:<8}{r.seconds:>7.2f}s  {r.detail}")
    return "\n".join(lines)
