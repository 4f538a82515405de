"""Segmentation evaluation: per-class confusion counts and IoU."""

from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = ("unlabeled", "static", "moving")


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionCounts:
    """Additive per-class TP/FP/FN counters; ground-truth-unlabeled samples
    are skipped entirely."""

    n_classes: int = 3
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.n_classes, dtype=np.int64))

    def accumulate(self, pred, gt):
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise MetricsError(
                f"accumulate: {pred.shape[0]} predictions vs {gt.shape[0]} labels")
        keep = gt > 0
        pred = pred[keep]
        gt = gt[keep]
        for c in range(self.n_classes):
            self.tp[c] += int(((pred == c) & (gt == c)).sum())
            self.fp[c] += int(((pred == c) & (gt != c)).sum())
            self.fn[c] += int(((pred != c) & (gt == c)).sum())

    def merge(self, other):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def iou(self, c):
        """TP / (TP + FP + FN); None when the class never occurs."""
        denom = int(self.tp[c] + self.fp[c] + self.fn[c])
        if denom == 0:
            return None
        return float(self.tp[c]) / denom


def label_grid_from_points(bev_image, point_labels):
    """Per-cell label grid: each valid cell takes its stored point's label."""
    point_labels = np.asarray(point_labels).reshape(-1)
    grid = np.zeros(bev_image.valid.shape, dtype=np.int64)
    rows, cols = np.nonzero(bev_image.valid)
    grid[rows, cols] = point_labels[bev_image.point_index[rows, cols]]
    return grid


def points_from_grid(bev_image, grid):
    """Broadcast per-cell values back to the frame's points through the
    point -> cell map; points outside the grid get 0."""
    if bev_image.point_cell is None:
        raise MetricsError("points_from_grid: image has no per-point cells")
    out = np.zeros(bev_image.point_cell.shape[0], dtype=np.int64)
    ok = bev_image.point_valid
    cells = bev_image.point_cell[ok]
    out[ok] = np.asarray(grid)[cells[:, 0], cells[:, 1]]
    return out


def _round6(x):
    return round(float(x), 6)


def evaluation_report(counts, frames):
    """JSON-friendly report; float values rounded to a fixed precision so
    repeated runs serialize byte-identically."""
    per_class = {}
    for c, name in enumerate(CLASS_NAMES[:counts.n_classes]):
        if c == 0:
            continue
        v = counts.iou(c)
        per_class[name] = None if v is None else _round6(v)
    moving = counts.iou(2)
    return {
        "frames": int(frames),
        "moving_iou": None if moving is None else _round6(moving),
        "per_class_iou": per_class,
        "counts": {
            "tp": [int(v) for v in counts.tp],
            "fp": [int(v) for v in counts.fp],
            "fn": [int(v) for v in counts.fn],
        },
    }
