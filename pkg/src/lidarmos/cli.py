"""Command-line surface.

Subcommands: synth, infer, eval, residual, selfcheck.
Exit codes: 0 ok, 2 usage, 3 data error, 4 check failure.
"""

import argparse
import json
import os
import sys

from .dataio import DataFormatError, read_labels, remap_mos
from .kernels import KernelError
from .losses import LossError
from .metrics import ConfusionCounts, MetricsError, evaluation_report
from .network import GraphError
from .pipeline import dump_residuals, infer_sequence, open_sequence
from .projection import ProjectionError, profile
from .residual import ResidualError
from .selfcheck import FAULTS, format_table, run_all
from .synth import load_scene_spec, synth_sequence, write_kitti_sequence
from .weights import NetworkConfig, WeightError, load_mvw

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECK = 4

_DATA_ERRORS = (DataFormatError, WeightError, ProjectionError, ResidualError,
                GraphError, KernelError, LossError, MetricsError, OSError)


class UsageError(Exception):
    pass


# override key -> (section, attribute, type)
_OVERRIDES = {}
for _f, _t in (("height", int), ("width", int), ("fov_up_deg", float),
               ("fov_down_deg", float), ("max_range", float)):
    _OVERRIDES[f"rv.{_f}"] = ("rv", _f, _t)
for _f, _t in (("height", int), ("width", int), ("x_min", float),
               ("x_max", float), ("y_min", float), ("y_max", float),
               ("z_min", float), ("z_max", float)):
    _OVERRIDES[f"bev.{_f}"] = ("bev", _f, _t)
_OVERRIDES["window"] = (None, "window", int)
_OVERRIDES["stack_depth"] = (None, "stack_depth", int)
_OVERRIDES["net.widths"] = ("net", "widths", list)
_OVERRIDES["net.ss2d_state"] = ("net", "ss2d_state", int)


def apply_overrides(proj_cfg, net_kwargs, overrides):
    for key, value in overrides.items():
        if key not in _OVERRIDES:
            raise UsageError(f"unknown override {key!r}")
        section, attr, typ = _OVERRIDES[key]
        if typ is list:
            if not isinstance(value, (list, tuple)) or \
                    not all(isinstance(v, int) for v in value):
                raise UsageError(f"override {key!r}: expected a list of integers")
            coerced = tuple(value)
        elif not isinstance(value, (int, float)) or isinstance(value, bool):
            raise UsageError(f"override {key!r}: expected a number, got {value!r}")
        else:
            coerced = typ(value)
        if section == "rv":
            setattr(proj_cfg.rv, attr, coerced)
        elif section == "bev":
            setattr(proj_cfg.bev, attr, coerced)
        elif section == "net":
            net_kwargs[attr] = coerced
        else:
            setattr(proj_cfg, attr, coerced)
    return proj_cfg, net_kwargs


def load_run_config(args):
    """Merge the config file (if any) with command-line flags; flags win."""
    file_cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot parse config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config {args.config}: expected a JSON object")

    def pick(flag, key, default=None):
        if flag is not None:
            return flag
        return file_cfg.get(key, default)

    merged = {
        "profile": pick(args.profile, "profile", "desk"),
        "seed": int(pick(args.seed, "seed", 0)),
        "dump_images": bool(args.dump_images or file_cfg.get("dump_images", False)),
        "sequence": pick(getattr(args, "sequence", None), "sequence"),
        "weights": pick(getattr(args, "weights", None), "weights"),
        "out": pick(getattr(args, "out", None), "out"),
        "window": pick(getattr(args, "window", None), "window"),
        "zero_pad": bool(getattr(args, "zero_pad", False)
                         or file_cfg.get("zero_pad", False)),
        "overrides": file_cfg.get("overrides", {}),
    }
    if merged["window"] is not None:
        merged["window"] = int(merged["window"])
    proj_cfg = profile(merged["profile"])
    net_kwargs = {}
    apply_overrides(proj_cfg, net_kwargs, merged["overrides"])
    if merged["window"] is not None:
        proj_cfg.window = merged["window"]
    net_cfg = NetworkConfig.for_profile(merged["profile"], window=proj_cfg.window)
    if net_kwargs:
        net_cfg = NetworkConfig(
            widths=net_kwargs.get("widths", net_cfg.widths),
            in_rv=proj_cfg.window, in_bev=proj_cfg.window,
            in_sem=net_cfg.in_sem, n_classes=net_cfg.n_classes,
            ss2d_state=net_kwargs.get("ss2d_state", net_cfg.ss2d_state),
            name=net_cfg.name)
    return merged, proj_cfg, net_cfg


def _json_out(obj):
    print(json.dumps(obj, sort_keys=True, indent=2))


def cmd_synth(args):
    spec = load_scene_spec(args.spec)
    if args.seed is not None:
        spec.seed = int(args.seed)
    frames = synth_sequence(spec)
    write_kitti_sequence(args.out, frames)
    print(f"wrote {len(frames)} frames to {args.out}")
    return EXIT_OK


def cmd_infer(args):
    run, proj_cfg, net_cfg = load_run_config(args)
    for key in ("sequence", "weights", "out"):
        if not run[key]:
            raise UsageError(f"infer: --{key} is required (flag or config file)")
    store = load_mvw(run["weights"])
    seq, poses = open_sequence(run["sequence"])
    written = infer_sequence(seq, poses, proj_cfg, net_cfg, store, run["out"],
                             allow_short=run["zero_pad"],
                             dump_images=run["dump_images"])
    print(f"wrote {len(written)} prediction files to {run['out']}")
    return EXIT_OK


def _label_dir(path):
    sub = os.path.join(path, "labels")
    return sub if os.path.isdir(sub) else path


def cmd_eval(args):
    pred_dir = _label_dir(args.pred)
    gt_dir = _label_dir(args.gt)
    names = sorted(f for f in os.listdir(gt_dir) if f.endswith(".label"))
    if not names:
        raise DataFormatError(f"{gt_dir}: no .label files")
    pred_names = sorted(f for f in os.listdir(pred_dir) if f.endswith(".label"))
    if names != pred_names:
        raise DataFormatError(
            f"frame sets differ: {len(names)} ground-truth vs "
            f"{len(pred_names)} prediction files")
    counts = ConfusionCounts()
    for name in names:
        gt = read_labels(os.path.join(gt_dir, name))
        pred = read_labels(os.path.join(pred_dir, name))
        if gt.shape != pred.shape:
            raise DataFormatError(f"{name}: point count mismatch")
        counts.accumulate(remap_mos(pred), remap_mos(gt))
    _json_out(evaluation_report(counts, len(names)))
    return EXIT_OK


def cmd_residual(args):
    run, proj_cfg, _ = load_run_config(args)
    if not run["sequence"] or not run["out"]:
        raise UsageError("residual: --sequence and --out are required")
    seq, poses = open_sequence(run["sequence"])
    written = dump_residuals(seq, poses, proj_cfg, run["out"],
                             dump_images=run["dump_images"])
    print(f"wrote residual stacks for {len(written)} frames to {run['out']}")
    return EXIT_OK


def cmd_selfcheck(args):
    results, ok = run_all(out_dir=args.out, fault=args.inject_fault)
    print(format_table(results))
    total = sum(r.seconds for r in results)
    print(f"\n{'all checks passed' if ok else 'CHECKS FAILED'} "
          f"({total:.1f}s total)")
    return EXIT_OK if ok else EXIT_CHECK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON run-config file; flags win over its values")
    common.add_argument("--profile", choices=["desk", "kitti"],
                        help="geometry/network profile (default desk)")
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--dump-images", action="store_true",
                        help="also write P5 graymap dumps")

    parser = argparse.ArgumentParser(
        prog="lidarmos",
        description="dual-view LiDAR moving-object segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic KITTI-layout sequence")
    p.add_argument("--spec", required=True, help="scene spec JSON")
    p.add_argument("--out", required=True, help="output sequence directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("infer", parents=[common],
                       help="run the forward pipeline over a sequence")
    p.add_argument("--sequence", help="KITTI-layout sequence directory")
    p.add_argument("--weights", help=".mvw weights file")
    p.add_argument("--out", help="output directory for predictions")
    p.add_argument("--window", type=int, help="residual window length")
    p.add_argument("--zero-pad", action="store_true",
                   help="allow sequences shorter than window+1 frames")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", parents=[common],
                       help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("residual", parents=[common],
                       help="dump residual stacks for a sequence")
    p.add_argument("--sequence")
    p.add_argument("--out")
    p.add_argument("--window", type=int)
    p.set_defaults(fn=cmd_residual)

    p = sub.add_parser("selfcheck", parents=[common],
                       help="run the embedded property checks")
    p.add_argument("--out", help="directory for failure replay files")
    p.add_argument("--inject-fault", choices=list(FAULTS),
                   help="flip a known-bad switch to validate the harness")
    p.set_defaults(fn=cmd_selfcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
