"""Sequence ingestion: KITTI-format binaries, labels, poses, and the
moving/movable label remapping.

File formats:
  velodyne/*.bin   consecutive little-endian float32 (x, y, z, intensity)
  labels/*.label   little-endian uint32 per point; semantic class = low 16 bits
  poses.txt        12 whitespace-separated floats per line, row-major 3x4
  calib.txt        optional line "Tr: r11 ... t3" (sensor-to-camera transform)
"""

import os
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class DataFormatError(ValueError):
    """Malformed input file or inconsistent sequence data."""


class MosLabel(IntEnum):
    UNLABELED = 0
    STATIC = 1
    MOVING = 2


class MovableLabel(IntEnum):
    UNLABELED = 0
    IMMOVABLE = 1
    MOVABLE = 2


# Raw semantic ids of classes capable of motion (vehicles, people, riders),
# plus the actually-moving id range. 251/9 are the remapped output codes
# written by inference; the eval path must accept them as moving/static too.
MOVING_RAW_MIN, MOVING_RAW_MAX = 252, 259
MOVING_OUTPUT_CODE, STATIC_OUTPUT_CODE = 251, 9
MOVABLE_RAW_IDS = frozenset({10, 11, 13, 15, 18, 20, 30, 31, 32})


@dataclass
class PointCloud:
    """One frame of LiDAR returns in the sensor frame."""

    points: np.ndarray                 # (N, 3) float
    intensity: np.ndarray              # (N,) float in [0, 1]
    labels: np.ndarray | None = None   # (N,) raw uint32 class ids, optional

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.intensity.shape[0] != self.points.shape[0]:
            raise DataFormatError("PointCloud: one intensity per point required")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint32).reshape(-1)
            if self.labels.shape[0] != self.points.shape[0]:
                raise DataFormatError("PointCloud: one label per point required")
        if not np.isfinite(self.points).all():
            raise DataFormatError("PointCloud: non-finite coordinates")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class Pose:
    """Rigid sensor pose: x_world = rotation @ x_sensor + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        rtr = self.rotation @ self.rotation.T
        if not np.allclose(rtr, np.eye(3), atol=1e-6):
            raise DataFormatError("Pose: rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise DataFormatError("Pose: rotation determinant must be +1")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def inverse(self):
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other):
        """self after other: (self o other)(x) = self(other(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, pts):
        return pts @ self.rotation.T + self.translation


def read_point_cloud_bin(path):
    """Parse a .bin file of little-endian float32 (x, y, z, intensity) records."""
    try:
        size = os.path.getsize(path)
        raw = np.fromfile(path, dtype="<f4")
    except OSError as exc:
        raise DataFormatError(f"cannot read point file {path}: {exc}") from exc
    if size % 16:
        raise DataFormatError(
            f"malformed point file {path}: size is not a multiple of 16 bytes")
    rec = raw.reshape(-1, 4)
    return PointCloud(rec[:, :3], rec[:, 3])


def write_point_cloud_bin(path, cloud):
    rec = np.empty((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.points
    rec[:, 3] = cloud.intensity
    rec.tofile(path)


def read_labels(path):
    """Read a .label file of little-endian uint32 ids."""
    try:
        size = os.path.getsize(path)
        raw = np.fromfile(path, dtype="<u4")
    except OSError as exc:
        raise DataFormatError(f"cannot read label file {path}: {exc}") from exc
    if size % 4:
        raise DataFormatError(
            f"malformed label file {path}: size is not a multiple of 4 bytes")
    return raw


def write_labels(path, labels):
    np.asarray(labels, dtype="<u4").tofile(path)


def remap_mos(raw):
    """Raw class ids -> MosLabel values. Accepts scalars or arrays."""
    raw = np.asarray(raw, dtype=np.uint32)
    sem = raw & np.uint32(0xFFFF)
    out = np.full(sem.shape, MosLabel.STATIC, dtype=np.int64)
    out[sem == 0] = MosLabel.UNLABELED
    out[(sem >= MOVING_RAW_MIN) & (sem <= MOVING_RAW_MAX)] = MosLabel.MOVING
    out[sem == MOVING_OUTPUT_CODE] = MosLabel.MOVING
    return out if out.ndim else int(out)


def remap_movable(raw):
    """Raw class ids -> MovableLabel values. Moving ids are always movable."""
    raw = np.asarray(raw, dtype=np.uint32)
    sem = raw & np.uint32(0xFFFF)
    out = np.full(sem.shape, MovableLabel.IMMOVABLE, dtype=np.int64)
    out[sem == 0] = MovableLabel.UNLABELED
    movable = (sem >= MOVING_RAW_MIN) & (sem <= MOVING_RAW_MAX)
    movable |= sem == MOVING_OUTPUT_CODE
    for i in MOVABLE_RAW_IDS:
        movable |= sem == i
    out[movable] = MovableLabel.MOVABLE
    return out if out.ndim else int(out)


def _parse_transform_line(fields, what):
    if len(fields) != 12:
        raise DataFormatError(f"{what}: expected 12 numbers, got {len(fields)}")
    try:
        vals = np.array([float(v) for v in fields], dtype=np.float64)
    except ValueError as exc:
        raise DataFormatError(f"{what}: {exc}") from exc
    mat = vals.reshape(3, 4)
    return mat[:, :3], mat[:, 3]


def read_calib(path):
    """Extract the 'Tr:' sensor calibration transform from a calib.txt file."""
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("Tr:") or line.startswith("Tr "):
                rot, t = _parse_transform_line(line.split(":", 1)[1].split(),
                                               f"calib {path}")
                return rot, t
    raise DataFormatError(f"calib file {path} has no 'Tr:' line")


def read_poses(path, calib_path=None):
    """Read poses.txt (12 floats per line, row-major 3x4) into sensor-frame poses.

    Without a calibration the lines are taken as sensor-frame poses directly.
    With calib_path, each camera-frame pose P becomes Tr^-1 @ P @ Tr.
    """
    tr = None
    if calib_path is not None:
        rot, t = read_calib(calib_path)
        tr = np.eye(4)
        tr[:3, :3] = rot
        tr[:3, 3] = t
        if abs(np.linalg.det(tr)) < 1e-12:
            raise DataFormatError(f"calib {calib_path}: non-invertible transform")
        tr_inv = np.linalg.inv(tr)
    poses = []
    with open(path) as fh:
        for ln, line in enumerate(fh):
            fields = line.split()
            if not fields:
                continue
            rot, t = _parse_transform_line(fields, f"{path} line {ln + 1}")
            if tr is not None:
                mat = np.eye(4)
                mat[:3, :3] = rot
                mat[:3, 3] = t
                mat = tr_inv @ mat @ tr
                rot, t = mat[:3, :3], mat[:3, 3]
            poses.append(Pose(rot, t))
    return poses


def write_poses(path, poses):
    with open(path, "w") as fh:
        for pose in poses:
            mat = np.hstack([pose.rotation, pose.translation[:, None]])
            fh.write(" ".join(f"{v:.12e}" for v in mat.reshape(-1)) + "\n")


def transform_to_frame(cloud, pose_src, pose_dst):
    """Re-express a cloud given in pose_src's frame in pose_dst's frame."""
    rel = pose_dst.inverse().compose(pose_src)
    return PointCloud(rel.apply(cloud.points), cloud.intensity, cloud.labels)


@dataclass
class SequenceDir:
    """A KITTI-layout sequence directory: velodyne/, labels/, poses.txt."""

    root: str
    frame_ids: list = field(default_factory=list)

    @classmethod
    def open(cls, root):
        vdir = os.path.join(root, "velodyne")
        if not os.path.isdir(vdir):
            raise DataFormatError(f"{root}: missing velodyne/ directory")
        ids = sorted(os.path.splitext(f)[0] for f in os.listdir(vdir)
                     if f.endswith(".bin"))
        if not ids:
            raise DataFormatError(f"{root}: no .bin frames found")
        return cls(root, ids)

    def __len__(self):
        return len(self.frame_ids)

    def cloud_path(self, i):
        return os.path.join(self.root, "velodyne", self.frame_ids[i] + ".bin")

    def label_path(self, i):
        return os.path.join(self.root, "labels", self.frame_ids[i] + ".label")

    def read_cloud(self, i, with_labels=False):
        cloud = read_point_cloud_bin(self.cloud_path(i))
        if with_labels:
            labels = read_labels(self.label_path(i))
            if labels.shape[0] != len(cloud):
                raise DataFormatError(
                    f"frame {self.frame_ids[i]}: {len(cloud)} points but "
                    f"{labels.shape[0]} labels")
            cloud.labels = labels
        return cloud

    def read_poses(self):
        pose_file = os.path.join(self.root, "poses.txt")
        calib_file = os.path.join(self.root, "calib.txt")
        poses = read_poses(pose_file,
                           calib_file if os.path.exists(calib_file) else None)
        if len(poses) < len(self.frame_ids):
            raise DataFormatError(
                f"{self.root}: {len(poses)} poses for {len(self.frame_ids)} frames")
        return poses
