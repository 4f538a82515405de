"""Motion evidence from frame differencing.

Range-view residual: relative range change per pixel between the current
frame and an ego-compensated past frame. BEV residual: absolute difference
of stacked elevation-span images. A residual stack bundles one channel per
lag over an N-frame window, all compensated into the newest frame.
"""

from dataclasses import dataclass

import numpy as np

from .dataio import transform_to_frame
from .projection import project_range, stacked_bev

RANGE_DENOM_EPS = 0.01  # meters; guards Eq-style division on grazing returns


class ResidualError(ValueError):
    pass


class InsufficientHistoryError(ResidualError):
    pass


def _residual_rv_masked(ref, past):
    if ref.values.shape != past.values.shape:
        raise ResidualError(
            f"residual_rv: extent mismatch {ref.values.shape} vs {past.values.shape}")
    ref_v = ref.values[0].astype(np.float64)
    past_v = past.values[0].astype(np.float64)
    ok = ref.valid & past.valid & (ref_v >= RANGE_DENOM_EPS)
    out = np.zeros_like(ref_v)
    out[ok] = np.abs(past_v[ok] - ref_v[ok]) / ref_v[ok]
    return out.astype(np.float32), ok


def residual_rv(ref, past):
    """|r_past - r_ref| / r_ref per pixel; zero where either pixel is invalid
    or the reference range is below the denominator guard."""
    return _residual_rv_masked(ref, past)[0]


def _residual_bev_masked(ref_stacked, past_stacked):
    if ref_stacked.values.shape != past_stacked.values.shape:
        raise ResidualError("residual_bev: extent mismatch")
    ok = ref_stacked.valid & past_stacked.valid
    out = np.zeros(ok.shape, dtype=np.float32)
    out[ok] = np.abs(past_stacked.values[0][ok] - ref_stacked.values[0][ok])
    return out, ok


def residual_bev(ref_stacked, past_stacked):
    """|span_past - span_ref| per cell; zero where either cell is invalid."""
    return _residual_bev_masked(ref_stacked, past_stacked)[0]


@dataclass
class ResidualStack:
    """N-channel motion features per view; channel j corresponds to lag j+1."""

    rv: np.ndarray             # (N, H, W) float32, >= 0
    bev: np.ndarray            # (N, Hb, Wb) float32, >= 0
    window: int
    ref_index: int
    channel_valid: np.ndarray  # (N,) bool; False where history was missing
    rv_defined: np.ndarray = None   # (N, H, W) bool; both pixels were valid
    bev_defined: np.ndarray = None  # (N, Hb, Wb) bool


def build_residual_stack(frames, poses, cfg, window=None, allow_short=False):
    """Residual channels for the newest frame of `frames`.

    Past frames are rigidly moved into the newest frame before projection.
    BEV channels difference stacked windows of cfg.stack_depth frames ending
    at each lag (truncated at the history horizon). Missing lags are zero
    channels flagged invalid when allow_short is set, an error otherwise.
    """
    if len(frames) != len(poses):
        raise ResidualError("build_residual_stack: one pose per frame required")
    if not frames:
        raise ResidualError("build_residual_stack: no frames")
    n = cfg.window if window is None else window
    if n < 1:
        raise ResidualError("build_residual_stack: window must be >= 1")
    ref_i = len(frames) - 1
    horizon = min(n + cfg.stack_depth - 1, ref_i)
    if ref_i < n and not allow_short:
        raise InsufficientHistoryError(
            f"need {n + 1} frames, got {len(frames)} (pass allow_short to zero-pad)")

    # lag 0 is the reference frame itself; lags 1..horizon get compensated
    compensated = {0: frames[ref_i]}
    for lag in range(1, horizon + 1):
        idx = ref_i - lag
        if idx < 0:
            break
        compensated[lag] = transform_to_frame(frames[idx], poses[idx], poses[ref_i])

    ref_rv = project_range(compensated[0], cfg)

    def stack_window(end_lag):
        lags = [end_lag + k for k in range(cfg.stack_depth)
                if end_lag + k in compensated]
        return stacked_bev([compensated[g] for g in lags], cfg)

    ref_stack = stack_window(0)

    rv_out = np.zeros((n, cfg.rv.height, cfg.rv.width), dtype=np.float32)
    bev_out = np.zeros((n, cfg.bev.height, cfg.bev.width), dtype=np.float32)
    rv_def = np.zeros(rv_out.shape, dtype=bool)
    bev_def = np.zeros(bev_out.shape, dtype=bool)
    valid = np.zeros(n, dtype=bool)
    for j in range(n):
        lag = j + 1
        if lag not in compensated:
            continue
        rv_out[j], rv_def[j] = _residual_rv_masked(
            ref_rv, project_range(compensated[lag], cfg))
        bev_out[j], bev_def[j] = _residual_bev_masked(ref_stack, stack_window(lag))
        valid[j] = True
    return ResidualStack(rv_out, bev_out, n, ref_i, valid, rv_def, bev_def)
