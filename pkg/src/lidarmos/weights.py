"""Named-parameter container and the .mvw weights file format.

File layout (all little-endian):
    magic "MVW1"
    u32 entry count
    per entry: u16 name length, UTF-8 name, u8 dtype (0 = float32),
               u8 rank, rank x u32 extents, row-major float32 payload

Parameter names are dot-separated paths, e.g. ``motion.down.0.kernel``.
The full name set for a configuration comes from ``parameter_spec``.
"""

import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .kernels import ConvParams

MAGIC = b"MVW1"
_CONV_FIELDS = ("kernel", "bias", "bn_scale", "bn_shift", "bn_mean", "bn_var")


class WeightError(ValueError):
    """Missing, extra, or malformed parameters."""


@dataclass
class NetworkConfig:
    """Shape of the forward graph; everything else derives from this."""

    widths: tuple = (16, 32, 64, 128)
    in_rv: int = 4          # residual window N, channels of the RV stack
    in_bev: int = 4
    in_sem: int = 1
    n_classes: int = 3
    ss2d_state: int = 8
    name: str = "desk"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 3:
            raise WeightError("NetworkConfig: need at least 3 scales")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise WeightError("NetworkConfig: widths must be strictly increasing")
        for w in self.widths[1:]:
            if w % 4:
                raise WeightError(
                    "NetworkConfig: widths past the first must be divisible by 4 "
                    "for 2x pixel-shuffle upsampling")
        if (2 * self.widths[-1]) % 4:
            raise WeightError("NetworkConfig: bottleneck width must be even")

    @property
    def scales(self):
        return len(self.widths)

    @property
    def bottleneck_channels(self):
        return 2 * self.widths[-1]

    @classmethod
    def for_profile(cls, name, window=None):
        if name == "desk":
            return cls((16, 32, 64, 128), window or 4, window or 4, 1, 3, 8, "desk")
        if name == "kitti":
            return cls((32, 64, 128, 256), window or 8, window or 8, 1, 3, 16, "kitti")
        raise WeightError(f"unknown network profile {name!r}")


def _conv_entries(spec, prefix, in_c, out_c, k=3):
    spec[f"{prefix}.kernel"] = (out_c, in_c, k, k)
    for f in _CONV_FIELDS[1:]:
        spec[f"{prefix}.{f}"] = (out_c,)


def parameter_spec(cfg):
    """Ordered map of every parameter path to its exact shape."""
    spec = OrderedDict()
    w = cfg.widths
    s = cfg.scales
    _conv_entries(spec, "rv.stem", cfg.in_rv, w[0])
    _conv_entries(spec, "bev.stem", cfg.in_bev, w[0])
    _conv_entries(spec, "sem.stem", cfg.in_sem, w[0])
    for k in range(s - 1):
        _conv_entries(spec, f"rv.down.{k}", w[k], w[k + 1])
        _conv_entries(spec, f"sem.down.{k}", w[k], w[k + 1])
        _conv_entries(spec, f"motion.down.{k}", w[k], w[k + 1])
    for i in range(s):
        for branch in ("fuse_rv", "fuse_sem"):
            _conv_entries(spec, f"{branch}.{i}.conv", 2 * w[i], w[i])
            _conv_entries(spec, f"{branch}.{i}.att.channel", w[i], w[i])
            _conv_entries(spec, f"{branch}.{i}.att.spatial", 1, 1)
    c = cfg.bottleneck_channels
    ns = cfg.ss2d_state
    spec["bottleneck.in_proj.weight"] = (c, c)
    spec["bottleneck.in_proj.bias"] = (c,)
    for d in range(4):
        p = f"bottleneck.ss2d.dir{d}"
        spec[f"{p}.delta.weight"] = (c, c)
        spec[f"{p}.delta.bias"] = (c,)
        spec[f"{p}.b_proj.weight"] = (ns, c)
        spec[f"{p}.b_proj.bias"] = (ns,)
        spec[f"{p}.c_proj.weight"] = (ns, c)
        spec[f"{p}.c_proj.bias"] = (ns,)
        spec[f"{p}.a_log"] = (c, ns)
        spec[f"{p}.skip"] = (c,)
    spec["bottleneck.gate.sig.weight"] = (c, w[-1])
    spec["bottleneck.gate.sig.bias"] = (c,)
    spec["bottleneck.gate.att.weight"] = (c, c)
    spec["bottleneck.gate.att.bias"] = (c,)
    # decoders: pixel-shuffle quarters the deep channels, then a conv maps
    # (deep/4 + skip) back to the scale width
    for i in range(s - 2, -1, -1):
        deep_sem = w[i + 1]
        deep_mot = c if i == s - 2 else w[i + 1]
        _conv_entries(spec, f"sem.up.{i}", deep_sem // 4 + w[i], w[i])
        _conv_entries(spec, f"motion.up.{i}", deep_mot // 4 + 2 * w[i], w[i])
    spec["head.moving.weight"] = (cfg.n_classes, w[0])
    spec["head.moving.bias"] = (cfg.n_classes,)
    spec["head.movable.weight"] = (cfg.n_classes, w[0])
    spec["head.movable.bias"] = (cfg.n_classes,)
    return spec


class WeightStore:
    """Immutable-by-convention name -> float32 tensor map."""

    def __init__(self, tensors=None):
        self._tensors = {}
        for name, arr in (tensors or {}).items():
            self._tensors[name] = np.ascontiguousarray(arr, dtype=np.float32)

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return sorted(self._tensors)

    def put(self, name, arr):
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not arr.flags.writeable:
            arr = arr.copy()
        self._tensors[name] = arr

    def get(self, name):
        try:
            return self._tensors[name]
        except KeyError:
            raise WeightError(f"missing parameter {name!r}") from None

    def conv_params(self, prefix, relu=True):
        return ConvParams(*(self.get(f"{prefix}.{f}") for f in _CONV_FIELDS),
                          relu=relu)

    def validate(self, cfg, permissive=False):
        """Every required parameter present with its exact shape; extras are
        rejected unless permissive."""
        spec = parameter_spec(cfg)
        for name, shape in spec.items():
            arr = self.get(name)
            if arr.shape != shape:
                raise WeightError(
                    f"parameter {name!r}: expected shape {shape}, got {arr.shape}")
        if not permissive:
            extra = set(self._tensors) - set(spec)
            if extra:
                raise WeightError(f"unexpected parameters: {sorted(extra)[:5]}")
        return self


def random_weights(cfg, seed=0):
    """Deterministic test initialization.

    Learned kernels, biases and projections draw uniform values in
    [-1/sqrt(fan_in), +1/sqrt(fan_in)]. Batch-norm statistics start at
    identity (scale 1, shift 0, mean 0, var 1); scan decay rates follow
    log(1..N), skip gains are 1, and the step-size bias is fixed so the
    initial step is ~0.01.
    """
    rng = np.random.default_rng(seed)
    store = WeightStore()
    delta_bias = float(np.log(np.expm1(0.01)))
    for name, shape in parameter_spec(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "bn_scale" or leaf == "bn_var":
            arr = np.ones(shape)
        elif leaf in ("bn_shift", "bn_mean"):
            arr = np.zeros(shape)
        elif leaf == "a_log":
            arr = np.tile(np.log(np.arange(1, shape[1] + 1)), (shape[0], 1))
        elif leaf == "skip":
            arr = np.ones(shape)
        elif name.endswith("delta.bias"):
            arr = np.full(shape, delta_bias)
        elif leaf == "kernel":
            fan = shape[1] * shape[2] * shape[3]
            arr = rng.uniform(-1, 1, size=shape) / np.sqrt(fan)
        elif leaf == "weight":
            arr = rng.uniform(-1, 1, size=shape) / np.sqrt(shape[1])
        elif leaf == "bias":
            fan = _bias_fan(cfg, name)
            arr = rng.uniform(-1, 1, size=shape) / np.sqrt(fan)
        else:
            raise WeightError(f"no initialization rule for {name!r}")
        store.put(name, arr)
    return store


def _bias_fan(cfg, name):
    spec = parameter_spec(cfg)
    kernel_name = name.rsplit(".", 1)[0] + ".kernel"
    weight_name = name.rsplit(".", 1)[0] + ".weight"
    if kernel_name in spec:
        shape = spec[kernel_name]
        return shape[1] * shape[2] * shape[3]
    return spec[weight_name][1]


def zero_bias_weights(cfg, seed=0):
    """Random weights with every additive parameter zeroed; a network fed
    zeros then produces exactly zero pre-head activations."""
    store = random_weights(cfg, seed)
    for name in list(store.names()):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "bn_shift", "bn_mean"):
            store.put(name, np.zeros_like(store.get(name)))
    return store


def save_mvw(path, store):
    """Write a weight store; entries are name-sorted for byte determinism."""
    with open(path, "wb") as fh:
        names = store.names()
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = store.get(name)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<BB", 0, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_mvw(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise WeightError(f"cannot read weights file {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise WeightError(f"malformed weights {path}: bad magic")
    off = 4

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise WeightError(f"malformed weights {path}: truncated at {what}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "entry count"))
    store = WeightStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2, f"{name} header"))
        if dtype != 0:
            raise WeightError(f"malformed weights {path}: unknown dtype {dtype}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} extents"))
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if rank else 4
        payload = take(n_bytes, f"{name} payload")
        store.put(name, np.frombuffer(payload, dtype="<f4").reshape(shape))
    if off != len(blob):
        raise WeightError(f"malformed weights {path}: {len(blob) - off} trailing bytes")
    return store
