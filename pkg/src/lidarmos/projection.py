"""3D-to-2D projections and the range-view <-> BEV correspondence.

Range view: spherical projection onto an azimuth x elevation grid, nearest
return per pixel. BEV: Cartesian ground-plane grid, max-height per cell.
Both images keep per-pixel and per-point back references so the two views
can be linked through their shared source points.
"""

from dataclasses import dataclass

import numpy as np

from .kernels import bilinear_gather

INVALID_RANGE = -1.0


class ProjectionError(ValueError):
    pass


@dataclass
class RangeViewConfig:
    height: int = 32
    width: int = 512
    fov_up_deg: float = 3.0
    fov_down_deg: float = -25.0
    max_range: float = 60.0


@dataclass
class BevConfig:
    height: int = 128            # x bins
    width: int = 128             # y bins
    x_min: float = -25.6
    x_max: float = 25.6
    y_min: float = -25.6
    y_max: float = 25.6
    z_min: float = -4.0
    z_max: float = 2.0


@dataclass
class ProjectionConfig:
    name: str = "desk"
    rv: RangeViewConfig = None
    bev: BevConfig = None
    window: int = 4              # residual lag count
    stack_depth: int = 2         # frames per stacked-BEV window

    def __post_init__(self):
        if self.rv is None:
            self.rv = RangeViewConfig()
        if self.bev is None:
            self.bev = BevConfig()
        if self.rv.fov_up_deg <= self.rv.fov_down_deg:
            raise ProjectionError("fov_up must exceed fov_down")
        if self.bev.x_max <= self.bev.x_min or self.bev.y_max <= self.bev.y_min \
                or self.bev.z_max <= self.bev.z_min:
            raise ProjectionError("BEV bounds must be ordered")
        for ext in (self.rv.height, self.rv.width, self.bev.height, self.bev.width):
            if ext < 8:
                raise ProjectionError("projection extents must be >= 8")


def profile(name):
    """Built-in geometry profiles. 'desk' runs in CPU-seconds; 'kitti'
    matches the common 64-beam sensor conventions."""
    if name == "desk":
        return ProjectionConfig("desk", RangeViewConfig(32, 512, 3.0, -25.0, 60.0),
                                BevConfig(128, 128, -25.6, 25.6, -25.6, 25.6,
                                          -4.0, 2.0),
                                window=4, stack_depth=2)
    if name == "kitti":
        return ProjectionConfig("kitti", RangeViewConfig(64, 2048, 3.0, -25.0, 80.0),
                                BevConfig(512, 512, -50.0, 50.0, -50.0, 50.0,
                                          -4.0, 2.0),
                                window=8, stack_depth=2)
    raise ProjectionError(f"unknown profile {name!r}")


@dataclass
class RangeImage:
    values: np.ndarray        # (1, H, W) range in meters, -1 where invalid
    valid: np.ndarray         # (H, W) bool
    point_index: np.ndarray   # (H, W) int32, -1 where no point
    point_u: np.ndarray       # (N,) column index per source point, -1 if dropped
    point_v: np.ndarray       # (N,) row index per source point, -1 if dropped
    point_valid: np.ndarray   # (N,) bool
    n_zero_range: int = 0
    n_out_of_range: int = 0


@dataclass
class BevImage:
    values: np.ndarray        # (1, H, W) height value, 0 where invalid
    valid: np.ndarray
    point_index: np.ndarray   # (H, W) int32; -1 for stacked images
    counts: np.ndarray        # (H, W) int32 points per cell
    point_cell: np.ndarray    # (N, 2) cell index per source point, -1 if dropped
    point_valid: np.ndarray
    n_discarded: int = 0


def range_pixel_of(points, cfg):
    """Vectorized (u, v, r) of the spherical projection; no validity cuts."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = np.linalg.norm(pts, axis=1)
    safe_r = np.where(r > 0, r, 1.0)
    yaw = np.arctan2(pts[:, 1], pts[:, 0])
    pitch = np.arcsin(np.clip(pts[:, 2] / safe_r, -1.0, 1.0))
    fov_up = np.deg2rad(cfg.fov_up_deg)
    fov_down = np.deg2rad(cfg.fov_down_deg)
    u = np.floor(0.5 * (1.0 - yaw / np.pi) * cfg.width).astype(np.int64)
    v = np.floor((1.0 - (pitch - fov_down) / (fov_up - fov_down))
                 * cfg.height).astype(np.int64)
    u = np.clip(u, 0, cfg.width - 1)
    v = np.clip(v, 0, cfg.height - 1)
    return u, v, r


def project_range(cloud, cfg):
    """Spherical range image; nearest return wins each pixel, ties broken by
    the smaller point index. Points with r = 0 or r > max_range are dropped
    and counted."""
    rv = cfg.rv
    n = len(cloud)
    u, v, r = range_pixel_of(cloud.points, rv)
    zero = r <= 0.0
    far = r > rv.max_range
    keep = ~zero & ~far

    values = np.full((rv.height, rv.width), INVALID_RANGE, dtype=np.float32)
    point_index = np.full((rv.height, rv.width), -1, dtype=np.int32)
    point_u = np.where(keep, u, -1).astype(np.int32)
    point_v = np.where(keep, v, -1).astype(np.int32)

    idx = np.nonzero(keep)[0]
    if idx.size:
        # write in descending (r, idx) order so the final write per pixel is
        # the nearest return, smallest index on ties
        order = np.lexsort((idx, r[idx]))[::-1]
        sel = idx[order]
        values[v[sel], u[sel]] = r[sel]
        point_index[v[sel], u[sel]] = sel
    valid = point_index >= 0
    return RangeImage(values[None], valid, point_index, point_u, point_v, keep,
                      n_zero_range=int(zero.sum()),
                      n_out_of_range=int(far.sum()))


def bev_cell_of(points, cfg):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    du = (cfg.x_max - cfg.x_min) / cfg.height
    dv = (cfg.y_max - cfg.y_min) / cfg.width
    cu = np.floor((pts[:, 0] - cfg.x_min) / du).astype(np.int64)
    cv = np.floor((pts[:, 1] - cfg.y_min) / dv).astype(np.int64)
    return cu, cv


def project_bev(cloud, cfg):
    """Top-down height image: per cell the max z of its points; points
    outside the grid or the z clip window are discarded."""
    bev = cfg.bev
    n = len(cloud)
    pts = cloud.points
    cu, cv = bev_cell_of(pts, bev)
    keep = (cu >= 0) & (cu < bev.height) & (cv >= 0) & (cv < bev.width)
    keep &= (pts[:, 2] >= bev.z_min) & (pts[:, 2] <= bev.z_max)

    values = np.zeros((bev.height, bev.width), dtype=np.float32)
    point_index = np.full((bev.height, bev.width), -1, dtype=np.int32)
    counts = np.zeros((bev.height, bev.width), dtype=np.int32)
    point_cell = np.full((n, 2), -1, dtype=np.int32)
    point_cell[keep, 0] = cu[keep]
    point_cell[keep, 1] = cv[keep]

    idx = np.nonzero(keep)[0]
    if idx.size:
        z = pts[:, 2]
        # ascending z with descending index on ties: final write = max z,
        # smallest index among equals
        order = np.lexsort((-idx, z[idx]))
        sel = idx[order]
        values[cu[sel], cv[sel]] = z[sel]
        point_index[cu[sel], cv[sel]] = sel
        np.add.at(counts, (cu[idx], cv[idx]), 1)
    valid = point_index >= 0
    values[~valid] = 0.0
    return BevImage(values[None], valid, point_index, counts, point_cell, keep,
                    n_discarded=int(n - idx.size))


def stacked_bev(clouds, cfg):
    """Per-cell elevation span (max z - min z) over every point of every
    frame in the window. Frames must already share one reference frame."""
    if not clouds:
        raise ProjectionError("stacked_bev: need at least one frame")
    bev = cfg.bev
    zmax = np.full((bev.height, bev.width), -np.inf)
    zmin = np.full((bev.height, bev.width), np.inf)
    counts = np.zeros((bev.height, bev.width), dtype=np.int32)
    discarded = 0
    for cloud in clouds:
        pts = cloud.points
        cu, cv = bev_cell_of(pts, bev)
        keep = (cu >= 0) & (cu < bev.height) & (cv >= 0) & (cv < bev.width)
        keep &= (pts[:, 2] >= bev.z_min) & (pts[:, 2] <= bev.z_max)
        discarded += int(len(cloud) - keep.sum())
        cu, cv, z = cu[keep], cv[keep], pts[keep, 2]
        np.maximum.at(zmax, (cu, cv), z)
        np.minimum.at(zmin, (cu, cv), z)
        np.add.at(counts, (cu, cv), 1)
    valid = counts > 0
    values = np.where(valid, zmax - zmin, 0.0).astype(np.float32)
    point_index = np.full((bev.height, bev.width), -1, dtype=np.int32)
    return BevImage(values[None], valid, point_index, counts, None, None,
                    n_discarded=discarded)


@dataclass
class ViewCorrespondence:
    """Links BEV cells to normalized range-view sampling coordinates and
    range-view pixels back to BEV cells. Coordinates are in [-1, 1] with -1
    the first pixel center and +1 the last, so they survive rescaling."""

    u_norm: np.ndarray        # (Hb, Wb) f32
    v_norm: np.ndarray        # (Hb, Wb) f32
    has_entry: np.ndarray     # (Hb, Wb) bool
    rv_to_cell: np.ndarray    # (Hr, Wr, 2) int32, -1 where absent
    bev_extent: tuple
    rv_extent: tuple

    def at_scale(self, level):
        """Correspondence for a 2^level-coarser BEV grid. Each coarse cell
        adopts the first populated fine cell inside it (row-major order)."""
        if level == 0:
            return self
        f = 1 << level
        hb, wb = self.bev_extent
        if hb % f or wb % f:
            raise ProjectionError(f"extent {self.bev_extent} not divisible by {f}")
        hc, wc = hb // f, wb // f

        def blocks(arr):
            return arr.reshape(hc, f, wc, f).transpose(0, 2, 1, 3).reshape(hc, wc, f * f)

        hs = blocks(self.has_entry)
        first = hs.argmax(axis=2)
        has = hs.any(axis=2)
        ii, jj = np.meshgrid(np.arange(hc), np.arange(wc), indexing="ij")
        u = blocks(self.u_norm)[ii, jj, first]
        v = blocks(self.v_norm)[ii, jj, first]
        u = np.where(has, u, 0.0).astype(np.float32)
        v = np.where(has, v, 0.0).astype(np.float32)
        rh, rw = self.rv_extent
        return ViewCorrespondence(u, v, has,
                                  np.full((rh // f, rw // f, 2), -1, np.int32),
                                  (hc, wc), (rh // f, rw // f))


def build_correspondence(range_image, bev_image):
    """Derive the cross-view maps from one frame's two projections.

    Every valid BEV cell whose stored point also survived the range
    projection gets that point's normalized RV coordinate; every valid RV
    pixel whose winning point landed in the BEV grid gets that cell index.
    """
    hb, wb = bev_image.valid.shape
    hr, wr = range_image.valid.shape
    u_norm = np.zeros((hb, wb), dtype=np.float32)
    v_norm = np.zeros((hb, wb), dtype=np.float32)
    has = np.zeros((hb, wb), dtype=bool)

    cell_idx = bev_image.point_index[bev_image.valid]
    pu = range_image.point_u[cell_idx]
    pv = range_image.point_v[cell_idx]
    ok = range_image.point_valid[cell_idx]
    un = np.where(wr > 1, 2.0 * pu / (wr - 1) - 1.0, 0.0)
    vn = np.where(hr > 1, 2.0 * pv / (hr - 1) - 1.0, 0.0)
    rows, cols = np.nonzero(bev_image.valid)
    has[rows, cols] = ok
    u_norm[rows[ok], cols[ok]] = un[ok]
    v_norm[rows[ok], cols[ok]] = vn[ok]

    rv_to_cell = np.full((hr, wr, 2), -1, dtype=np.int32)
    rr, rc = np.nonzero(range_image.valid)
    widx = range_image.point_index[rr, rc]
    cells = bev_image.point_cell[widx]
    good = cells[:, 0] >= 0
    rv_to_cell[rr[good], rc[good]] = cells[good]
    return ViewCorrespondence(u_norm, v_norm, has, rv_to_cell, (hb, wb), (hr, wr))


def grid_sample_r2b(rv_feat, corr, target_extent=None):
    """Resample range-view features onto the BEV grid of a correspondence.

    Bilinear interpolation with azimuth wraparound; cells without an entry
    produce zeros. Works at any pyramid scale because the stored coordinates
    are normalized.
    """
    rv_feat = np.ascontiguousarray(rv_feat, dtype=np.float32)
    if rv_feat.ndim != 3:
        raise ProjectionError("grid_sample_r2b: features must be (C, H, W)")
    hb, wb = corr.bev_extent
    if target_extent is not None and tuple(target_extent) != (hb, wb):
        raise ProjectionError(
            f"grid_sample_r2b: target {target_extent} != correspondence {(hb, wb)}")
    c, h, w = rv_feat.shape
    out = np.zeros((c, hb, wb), dtype=np.float32)
    rows, cols = np.nonzero(corr.has_entry)
    if rows.size == 0:
        return out
    u = (corr.u_norm[rows, cols].astype(np.float64) + 1.0) / 2.0 * (w - 1)
    v = (corr.v_norm[rows, cols].astype(np.float64) + 1.0) / 2.0 * (h - 1)
    vals = bilinear_gather(rv_feat, u, v, wrap_w=True)
    out[:, rows, cols] = vals
    return out
