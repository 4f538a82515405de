"""Forward graph: dual-view motion encoder, semantic branch, selective-scan
fusion at the bottleneck, and the guided decoders.

Range-view tensors are convolved with circular width padding (the azimuth
axis is cyclic); BEV-side tensors use zero padding. There is no training
mode: stochastic-depth is the identity and batch norm is inference-form.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .projection import grid_sample_r2b
from .weights import WeightStore

# test hook used by the self-check harness to prove the scan oracle bites:
# when set, the reverse row scan runs forward instead
_fault_reverse_scan = False


class GraphError(ValueError):
    pass


@dataclass
class AttentionParams:
    channel: K.ConvParams
    spatial: K.ConvParams


@dataclass
class FuseParams:
    conv: K.ConvParams
    att: AttentionParams


@dataclass
class SS2DDirParams:
    delta_w: np.ndarray   # (C, C)
    delta_b: np.ndarray   # (C,)
    b_w: np.ndarray       # (N, C)
    b_b: np.ndarray       # (N,)
    c_w: np.ndarray       # (N, C)
    c_b: np.ndarray       # (N,)
    a_log: np.ndarray     # (C, N); decay rate is -exp(a_log)
    skip: np.ndarray      # (C,)


@dataclass
class SS2DBlockParams:
    in_proj_w: np.ndarray
    in_proj_b: np.ndarray
    dirs: list


@dataclass
class GateParams:
    sig_w: np.ndarray
    sig_b: np.ndarray
    att_w: np.ndarray
    att_b: np.ndarray


def softplus(x):
    return np.logaddexp(0.0, x.astype(np.float64)).astype(np.float32)


def motion_down_step(x, params):
    """Next pyramid scale of a range-view tensor: 2x max pool, then the
    circular conv + BN + ReLU unit."""
    return K.conv2d_circular(K.maxpool2(x), params, stride=1, pad_mode="circular")


def encoder_down_step(x, params):
    """BEV-side counterpart of motion_down_step (zero padding)."""
    return K.conv2d_circular(K.maxpool2(x), params, stride=1, pad_mode="zero")


def attention_hwc(x, att, pad_mode="zero"):
    """Channel gate then spatial gate, each x <- x * unit(AvgPool(x))."""
    gate_c = K.conv2d_circular(K.avgpool(x, "spatial"), att.channel, 1, pad_mode)
    x = x * gate_c
    gate_s = K.conv2d_circular(K.avgpool(x, "channel"), att.spatial, 1, pad_mode)
    return np.ascontiguousarray(x * gate_s)


def _fuse(primary, secondary, fp):
    if primary.shape[1:] != secondary.shape[1:]:
        raise GraphError(
            f"fuse: extent mismatch {primary.shape} vs {secondary.shape}")
    mixed = K.conv2d_circular(K.concat_channels([primary, secondary]), fp.conv,
                              1, "zero")
    return K.add(primary, attention_hwc(mixed, fp.att))


def fuse_bev_rv(x_bev, x_r2b, fp):
    """Residual fusion of the BEV motion tensor with transported RV features."""
    return _fuse(x_bev, x_r2b, fp)


def fuse_semantic_down(x_motion, x_sem, fp):
    """Residual fusion of motion features with same-scale semantic features."""
    return _fuse(x_motion, x_sem, fp)


def up_step(deep, skip, params, pad_mode="zero"):
    """2x pixel-shuffle of the deeper tensor, concat with the skip tensor,
    then one conv unit."""
    up = K.pixel_shuffle(deep, 2)
    if up.shape[1:] != skip.shape[1:]:
        raise GraphError(f"up_step: extent mismatch {up.shape} vs {skip.shape}")
    return K.conv2d_circular(K.concat_channels([up, skip]), params, 1, pad_mode)


def semantic_up_step(x_deep, x_skip, params):
    return up_step(x_deep, x_skip, params)


def motion_up_step(x_deep, x_sout, x_fused, params):
    """Decoder step whose skip path carries semantic guidance next to the
    fused encoder tensor."""
    if x_sout.shape[1:] != x_fused.shape[1:]:
        raise GraphError("motion_up_step: guidance/skip extent mismatch")
    return up_step(x_deep, K.concat_channels([x_sout, x_fused]), params)


def _scan_sequences(z):
    """Scan expansion: four 1-D orderings of a (C, H, W) map.

    0: row-major left to right; 1: its reversal; 2: column-major top to
    bottom; 3: its reversal.
    """
    c, h, w = z.shape
    rows = z.reshape(c, h * w)
    cols = np.ascontiguousarray(z.transpose(0, 2, 1)).reshape(c, h * w)
    rev_rows = np.ascontiguousarray(rows[:, ::-1])
    if _fault_reverse_scan:
        rev_rows = rows.copy()
    return [rows, rev_rows, cols, np.ascontiguousarray(cols[:, ::-1])]


def _scan_merge(ys, shape):
    """Undo the four orderings and sum the directional outputs."""
    c, h, w = shape
    total = ys[0].astype(np.float64).reshape(c, h, w).copy()
    total += ys[1][:, ::-1].astype(np.float64).reshape(c, h, w)
    total += ys[2].astype(np.float64).reshape(c, w, h).transpose(0, 2, 1)
    total += ys[3][:, ::-1].astype(np.float64).reshape(c, w, h).transpose(0, 2, 1)
    return np.ascontiguousarray(total, dtype=np.float32)


def ss2d(z, dir_params):
    """Four-direction selective scan over a 2-D map, merged by summation.

    Per direction and step t (sequence x_t in R^C):
        delta_t = softplus(W_d x_t + b_d)           per channel
        b_t     = W_b x_t + b_b,  c_t = W_c x_t + b_c   (state-sized)
        h_t     = exp(delta_t * -exp(a_log)) h_{t-1} + delta_t b_t x_t
        y_t     = <c_t, h_t> + skip * x_t
    """
    if len(dir_params) != 4:
        raise GraphError("ss2d: need parameters for 4 scan directions")
    seqs = _scan_sequences(z)
    ys = []
    for seq, p in zip(seqs, dir_params):
        delta = softplus(np.tensordot(p.delta_w.astype(np.float64),
                                      seq.astype(np.float64), axes=([1], [0]))
                         + p.delta_b.astype(np.float64)[:, None])
        bmat = (np.tensordot(p.b_w.astype(np.float64), seq.astype(np.float64),
                             axes=([1], [0]))
                + p.b_b.astype(np.float64)[:, None]).astype(np.float32)
        cmat = (np.tensordot(p.c_w.astype(np.float64), seq.astype(np.float64),
                             axes=([1], [0]))
                + p.c_b.astype(np.float64)[:, None]).astype(np.float32)
        a = (-np.exp(p.a_log.astype(np.float64))).astype(np.float32)
        ys.append(K.selective_scan(seq, delta, a, bmat, cmat, p.skip))
    return _scan_merge(ys, z.shape)


def ss2d_block(f_s, f_m, params):
    """Concatenated-feature fusion: F = Cat(F_s, F_m) + SS2D(Linear(Cat))."""
    if f_s.shape[1:] != f_m.shape[1:]:
        raise GraphError(f"ss2d_block: extent mismatch {f_s.shape} vs {f_m.shape}")
    f_sm = K.concat_channels([f_s, f_m])
    z = K.linear(f_sm, params.in_proj_w, params.in_proj_b)
    return K.add(f_sm, ss2d(z, params.dirs))


def saff_gate(f_s, f_m, gp):
    """Semantic-activated gating of the motion tensor.

    F_m' = F_m * Sigmoid(1x1(F_s));
    F_out = F_m + F_m' * SoftmaxC(1x1(SpatialAvg(F_m'))).
    """
    if f_s.shape[1:] != f_m.shape[1:]:
        raise GraphError(f"saff_gate: extent mismatch {f_s.shape} vs {f_m.shape}")
    gate = K.sigmoid(K.linear(f_s, gp.sig_w, gp.sig_b))
    f_m_prime = K.mul(f_m, gate)
    att = K.softmax_channels(K.linear(K.avgpool(f_m_prime, "spatial"),
                                      gp.att_w, gp.att_b))
    return np.ascontiguousarray(f_m + f_m_prime * att)


class Network:
    """Bound (config, weights) pair exposing the full forward pass."""

    def __init__(self, cfg, store, permissive=False):
        if not isinstance(store, WeightStore):
            raise GraphError("Network: weights must be a WeightStore")
        store.validate(cfg, permissive=permissive)
        self.cfg = cfg
        self.store = store
        self._fuse = {}
        for branch in ("fuse_rv", "fuse_sem"):
            self._fuse[branch] = [self._fuse_params(f"{branch}.{i}")
                                  for i in range(cfg.scales)]
        dirs = []
        for d in range(4):
            p = f"bottleneck.ss2d.dir{d}"
            dirs.append(SS2DDirParams(
                store.get(f"{p}.delta.weight"), store.get(f"{p}.delta.bias"),
                store.get(f"{p}.b_proj.weight"), store.get(f"{p}.b_proj.bias"),
                store.get(f"{p}.c_proj.weight"), store.get(f"{p}.c_proj.bias"),
                store.get(f"{p}.a_log"), store.get(f"{p}.skip")))
        self.ss2d_params = SS2DBlockParams(store.get("bottleneck.in_proj.weight"),
                                           store.get("bottleneck.in_proj.bias"),
                                           dirs)
        self.gate_params = GateParams(store.get("bottleneck.gate.sig.weight"),
                                      store.get("bottleneck.gate.sig.bias"),
                                      store.get("bottleneck.gate.att.weight"),
                                      store.get("bottleneck.gate.att.bias"))

    def _fuse_params(self, prefix):
        return FuseParams(
            self.store.conv_params(f"{prefix}.conv"),
            AttentionParams(self.store.conv_params(f"{prefix}.att.channel"),
                            self.store.conv_params(f"{prefix}.att.spatial")))

    def _conv(self, prefix):
        return self.store.conv_params(prefix)

    def forward(self, rv_stack, bev_stack, semantic_in, corr):
        """Run the full graph.

        rv_stack: (N, H, W) residual channels; bev_stack: (N, Hb, Wb);
        semantic_in: (1, Hb, Wb) height image; corr: full-resolution
        ViewCorrespondence. Returns (moving_logits, movable_logits), each
        (n_classes, Hb, Wb).
        """
        cfg = self.cfg
        s = cfg.scales

        def staged(path, fn, *args):
            try:
                return fn(*args)
            except ValueError as exc:
                raise GraphError(f"{path}: {exc}") from exc

        corrs = [staged(f"corr.scale{i}", corr.at_scale, i) for i in range(s)]

        rv = staged("rv.stem", K.conv2d_circular, rv_stack,
                    self._conv("rv.stem"), 1, "circular")
        bev = staged("bev.stem", K.conv2d_circular, bev_stack,
                     self._conv("bev.stem"), 1, "zero")
        sem = staged("sem.stem", K.conv2d_circular, semantic_in,
                     self._conv("sem.stem"), 1, "zero")

        sems, fused = [], []
        for i in range(s):
            r2b = staged(f"r2b.{i}", grid_sample_r2b, rv, corrs[i])
            motion = staged(f"fuse_rv.{i}", fuse_bev_rv, bev, r2b,
                            self._fuse["fuse_rv"][i])
            fused_i = staged(f"fuse_sem.{i}", fuse_semantic_down, motion, sem,
                             self._fuse["fuse_sem"][i])
            sems.append(sem)
            fused.append(fused_i)
            if i < s - 1:
                rv = staged(f"rv.down.{i}", motion_down_step, rv,
                            self._conv(f"rv.down.{i}"))
                sem = staged(f"sem.down.{i}", encoder_down_step, sem,
                             self._conv(f"sem.down.{i}"))
                bev = staged(f"motion.down.{i}", encoder_down_step, fused_i,
                             self._conv(f"motion.down.{i}"))

        f_fused = staged("bottleneck.ss2d", ss2d_block, sems[-1], fused[-1],
                         self.ss2d_params)
        bottom = staged("bottleneck.gate", saff_gate, sems[-1], f_fused,
                        self.gate_params)

        sout = sems[-1]
        souts = {s - 1: sout}
        for i in range(s - 2, -1, -1):
            sout = staged(f"sem.up.{i}", semantic_up_step, sout, sems[i],
                          self._conv(f"sem.up.{i}"))
            souts[i] = sout

        out = bottom
        for i in range(s - 2, -1, -1):
            out = staged(f"motion.up.{i}", motion_up_step, out, souts[i],
                         fused[i], self._conv(f"motion.up.{i}"))

        moving = staged("head.moving", K.linear, out,
                        self.store.get("head.moving.weight"),
                        self.store.get("head.moving.bias"))
        movable = staged("head.movable", K.linear, sout,
                         self.store.get("head.movable.weight"),
                         self.store.get("head.movable.bias"))
        if not (np.isfinite(moving).all() and np.isfinite(movable).all()):
            raise GraphError("forward: non-finite logits")
        return moving, movable


def forward_full(stack, semantic_in, corr, store, cfg):
    """One-shot forward pass from pipeline objects.

    stack: ResidualStack; semantic_in: BevImage (its height values feed the
    semantic branch); corr: full-resolution ViewCorrespondence.
    """
    net = Network(cfg, store)
    return net.forward(stack.rv, stack.bev, semantic_in.values, corr)
