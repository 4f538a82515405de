"""Deterministic synthetic LiDAR scenes for desk-scale verification.

A scene is a flat ground plane plus axis-aligned boxes, some with constant
velocity. Each frame ray-casts a spinning-sensor model from an ego pose that
follows a constant velocity / yaw rate. Everything is exact analytic
geometry, so generated sequences double as ground truth for projection,
residual and evaluation checks.

World frame == sensor frame of frame 0. Ground sits below the sensor
(default z = -1.5 m).
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dataio import (DataFormatError, PointCloud, Pose, remap_mos,
                     write_labels, write_point_cloud_bin, write_poses)

GROUND_RAW_ID = 40       # road
STATIC_BOX_RAW_ID = 50   # building
MOVING_BOX_RAW_ID = 252  # moving car

_INTENSITY = {GROUND_RAW_ID: 0.2, STATIC_BOX_RAW_ID: 0.5, MOVING_BOX_RAW_ID: 0.8}


@dataclass
class Box:
    center: np.ndarray
    size: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3)
        if (self.size <= 0).any():
            raise DataFormatError("Box: extents must be positive")
        if not np.isfinite(self.velocity).all():
            raise DataFormatError("Box: velocity must be finite")

    def bounds(self, t):
        c = self.center + self.velocity * t
        return c - self.size / 2.0, c + self.size / 2.0


@dataclass
class SensorModel:
    """Spinning sensor: channels x azimuth_steps rays per frame."""

    channels: int = 32
    azimuth_steps: int = 1024          # ~0.35 deg per step
    fov_up_deg: float = 3.0
    fov_down_deg: float = -25.0
    max_range: float = 60.0

    def directions(self):
        if self.channels < 1 or self.azimuth_steps < 1:
            raise DataFormatError("sensor model produces zero rays")
        elev = np.deg2rad(np.linspace(self.fov_up_deg, self.fov_down_deg,
                                      self.channels))
        azi = -np.pi + (np.arange(self.azimuth_steps) + 0.5) \
            * (2.0 * np.pi / self.azimuth_steps)
        ee, aa = np.meshgrid(elev, azi, indexing="ij")
        ce = np.cos(ee)
        return np.stack([ce * np.cos(aa), ce * np.sin(aa), np.sin(ee)],
                        axis=-1).reshape(-1, 3)


@dataclass
class SyntheticSceneSpec:
    frames: int
    period: float = 0.1
    seed: int = 0
    sensor: SensorModel = field(default_factory=SensorModel)
    ground_z: float | None = -1.5
    static_boxes: list = field(default_factory=list)
    dynamic_boxes: list = field(default_factory=list)
    ego_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ego_yaw_rate: float = 0.0          # rad/s
    range_noise: float = 0.0           # std dev of additive range noise, m

    def __post_init__(self):
        self.ego_velocity = np.asarray(self.ego_velocity, dtype=np.float64).reshape(3)
        if self.frames < 2:
            raise DataFormatError("scene spec: frame count must be >= 2")
        if self.period <= 0:
            raise DataFormatError("scene spec: frame period must be positive")
        if not np.isfinite(self.ego_velocity).all():
            raise DataFormatError("scene spec: ego velocity must be finite")

    @classmethod
    def from_json(cls, obj):
        sensor = SensorModel(**obj.get("sensor", {}))
        try:
            return cls(
                frames=int(obj["frames"]),
                period=float(obj.get("period", 0.1)),
                seed=int(obj.get("seed", 0)),
                sensor=sensor,
                ground_z=obj.get("ground_z", -1.5),
                static_boxes=[Box(b["center"], b["size"])
                              for b in obj.get("static_boxes", [])],
                dynamic_boxes=[Box(b["center"], b["size"], b.get("velocity", [0, 0, 0]))
                               for b in obj.get("dynamic_boxes", [])],
                ego_velocity=obj.get("ego_velocity", [0, 0, 0]),
                ego_yaw_rate=float(obj.get("ego_yaw_rate", 0.0)),
                range_noise=float(obj.get("range_noise", 0.0)),
            )
        except KeyError as exc:
            raise DataFormatError(f"scene spec: missing field {exc}") from exc


@dataclass
class SynthFrame:
    cloud: PointCloud     # sensor frame; cloud.labels carries raw class ids
    pose: Pose            # sensor -> world
    mos_labels: np.ndarray


def _ego_pose(spec, t):
    psi = spec.ego_yaw_rate * t
    c, s = np.cos(psi), np.sin(psi)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(rot, spec.ego_velocity * t)


def _ray_box(origin, dirs, lo, hi):
    """Slab-method ray/AABB intersection; +inf where the ray misses."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo[None, :] - origin[None, :]) * inv
        t2 = (hi[None, :] - origin[None, :]) * inv
    near = np.fmin(t1, t2)
    far = np.fmax(t1, t2)
    # axis-parallel rays: hit only if the origin lies inside that slab
    par = np.abs(dirs) < 1e-12
    inside = (origin[None, :] >= lo[None, :]) & (origin[None, :] <= hi[None, :])
    near = np.where(par, np.where(inside, -np.inf, np.inf), near)
    far = np.where(par, np.where(inside, np.inf, -np.inf), far)
    tmin = near.max(axis=1)
    tmax = far.min(axis=1)
    hit = (tmax >= tmin) & (tmin > 1e-6)
    return np.where(hit, tmin, np.inf)


def synth_frame(spec, index, dirs_sensor, rng):
    t = index * spec.period
    pose = _ego_pose(spec, t)
    origin = pose.translation
    dirs = dirs_sensor @ pose.rotation.T

    best_t = np.full(dirs.shape[0], np.inf)
    best_id = np.zeros(dirs.shape[0], dtype=np.uint32)

    if spec.ground_z is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = (spec.ground_z - origin[2]) / dirs[:, 2]
        tg = np.where((dirs[:, 2] < -1e-12) & (tg > 1e-6), tg, np.inf)
        better = tg < best_t
        best_t = np.where(better, tg, best_t)
        best_id[better] = GROUND_RAW_ID

    for box, raw_id in [(b, STATIC_BOX_RAW_ID) for b in spec.static_boxes] + \
                       [(b, MOVING_BOX_RAW_ID) for b in spec.dynamic_boxes]:
        lo, hi = box.bounds(t)
        tb = _ray_box(origin, dirs, lo, hi)
        better = tb < best_t
        best_t = np.where(better, tb, best_t)
        best_id[better] = raw_id

    hit = best_t <= spec.sensor.max_range
    rng_hit = best_t[hit]
    if spec.range_noise > 0:
        rng_hit = rng_hit + spec.range_noise * rng.standard_normal(rng_hit.shape)
    pts = dirs_sensor[hit] * rng_hit[:, None]
    labels = best_id[hit]
    inten = np.zeros(labels.shape[0])
    for raw_id, val in _INTENSITY.items():
        inten[labels == raw_id] = val
    cloud = PointCloud(pts, inten, labels)
    return SynthFrame(cloud, pose, remap_mos(labels))


def synth_sequence(spec):
    """Generate the full frame list; deterministic for a given spec + seed."""
    dirs = spec.sensor.directions()
    rng = np.random.default_rng(spec.seed)
    return [synth_frame(spec, i, dirs, rng) for i in range(spec.frames)]


def write_kitti_sequence(out_dir, frames):
    """Write frames in KITTI layout: velodyne/*.bin, labels/*.label, poses.txt."""
    os.makedirs(os.path.join(out_dir, "velodyne"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    for i, frame in enumerate(frames):
        name = f"{i:06d}"
        write_point_cloud_bin(os.path.join(out_dir, "velodyne", name + ".bin"),
                              frame.cloud)
        write_labels(os.path.join(out_dir, "labels", name + ".label"),
                     frame.cloud.labels)
    write_poses(os.path.join(out_dir, "poses.txt"), [f.pose for f in frames])
    with open(os.path.join(out_dir, "calib.txt"), "w") as fh:
        fh.write("Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n")


def load_scene_spec(path):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot parse scene spec {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise DataFormatError(f"scene spec {path}: expected a JSON object")
    return SyntheticSceneSpec.from_json(obj)
