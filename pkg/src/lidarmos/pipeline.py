"""Sequence-level orchestration shared by the CLI and the test suites."""

import os

import numpy as np

from .dataio import (MOVING_OUTPUT_CODE, STATIC_OUTPUT_CODE, DataFormatError,
                     SequenceDir, write_labels)
from .images import write_pgm, write_pgm_stack, write_raw_f32
from .metrics import points_from_grid
from .network import Network
from .projection import build_correspondence, project_bev, project_range
from .residual import InsufficientHistoryError, build_residual_stack

_OUTPUT_CODE = np.array([0, STATIC_OUTPUT_CODE, MOVING_OUTPUT_CODE],
                        dtype=np.uint32)


def frame_inputs(frames, poses, cfg, window=None, allow_short=False):
    """Residual stack + current-frame projections + correspondence for the
    newest frame of `frames`."""
    stack = build_residual_stack(frames, poses, cfg, window=window,
                                 allow_short=allow_short)
    current = frames[-1]
    rv_img = project_range(current, cfg)
    bev_img = project_bev(current, cfg)
    corr = build_correspondence(rv_img, bev_img)
    return stack, rv_img, bev_img, corr


def history_length(cfg, window=None):
    n = cfg.window if window is None else window
    return n + cfg.stack_depth - 1


def infer_sequence(seq, poses, proj_cfg, net_cfg, store, out_dir,
                   window=None, allow_short=False, dump_images=False):
    """Run the forward pipeline over a KITTI-layout sequence.

    Writes one .label file per frame under out_dir/labels (0 unlabeled,
    9 static, 251 moving, assigned per point through its BEV cell). Frames
    near the sequence start use zero-padded residual channels. Returns the
    list of written paths.
    """
    n = proj_cfg.window if window is None else window
    if len(seq) < n + 1 and not allow_short:
        raise InsufficientHistoryError(
            f"sequence has {len(seq)} frames, window {n} needs {n + 1} "
            "(pass --zero-pad to run anyway)")
    net = Network(net_cfg, store)
    labels_dir = os.path.join(out_dir, "labels")
    os.makedirs(labels_dir, exist_ok=True)
    if dump_images:
        img_dir = os.path.join(out_dir, "images")
        os.makedirs(img_dir, exist_ok=True)

    clouds = [seq.read_cloud(i) for i in range(len(seq))]
    depth = history_length(proj_cfg, window)
    written = []
    for k in range(len(seq)):
        lo = max(0, k - depth)
        stack, _, bev_img, corr = frame_inputs(
            clouds[lo:k + 1], poses[lo:k + 1], proj_cfg, window=n,
            allow_short=True)
        moving, _ = net.forward(stack.rv, stack.bev, bev_img.values, corr)
        pred_grid = moving.argmax(axis=0)
        point_classes = points_from_grid(bev_img, pred_grid)
        out_path = os.path.join(labels_dir, seq.frame_ids[k] + ".label")
        write_labels(out_path, _OUTPUT_CODE[point_classes])
        written.append(out_path)
        if dump_images:
            base = os.path.join(img_dir, seq.frame_ids[k])
            write_pgm(base + "_pred.pgm", pred_grid.astype(np.float32), 0.0, 2.0)
            write_pgm_stack(base + "_res_bev", stack.bev)
            write_pgm_stack(base + "_res_rv", stack.rv)
    return written


def dump_residuals(seq, poses, proj_cfg, out_dir, window=None,
                   dump_images=False):
    """Write per-frame residual stacks as raw f32 blobs (+ optional P5s)."""
    os.makedirs(out_dir, exist_ok=True)
    n = proj_cfg.window if window is None else window
    clouds = [seq.read_cloud(i) for i in range(len(seq))]
    depth = history_length(proj_cfg, window)
    written = []
    for k in range(len(seq)):
        lo = max(0, k - depth)
        stack = build_residual_stack(clouds[lo:k + 1], poses[lo:k + 1],
                                     proj_cfg, window=n, allow_short=True)
        base = os.path.join(out_dir, seq.frame_ids[k])
        write_raw_f32(base + "_rv.f32", stack.rv)
        write_raw_f32(base + "_bev.f32", stack.bev)
        written.append(base)
        if dump_images:
            write_pgm_stack(base + "_rv", stack.rv)
            write_pgm_stack(base + "_bev", stack.bev)
    return written


def open_sequence(path):
    if not os.path.isdir(path):
        raise DataFormatError(f"sequence directory {path} does not exist")
    seq = SequenceDir.open(path)
    poses = seq.read_poses()
    return seq, poses
