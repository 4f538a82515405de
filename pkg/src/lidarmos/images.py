"""Inspection dumps: binary portable graymaps and raw float blobs."""

import json

import numpy as np


def write_pgm(path, values, lo=None, hi=None):
    """Write one 2-D array as a binary P5 graymap, linearly mapped to 0..255.

    Defaults scale by the array's own min/max; pass lo/hi for a fixed map.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("write_pgm: expected a 2-D array")
    lo = float(arr.min()) if lo is None else float(lo)
    hi = float(arr.max()) if hi is None else float(hi)
    if hi <= lo:
        scaled = np.zeros(arr.shape, dtype=np.uint8)
    else:
        scaled = np.clip((arr - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())


def write_pgm_stack(prefix, stack, lo=None, hi=None):
    """One P5 per channel of a (C, H, W) tensor: <prefix>_c00.pgm etc."""
    stack = np.asarray(stack)
    paths = []
    for c in range(stack.shape[0]):
        path = f"{prefix}_c{c:02d}.pgm"
        write_pgm(path, stack[c], lo, hi)
        paths.append(path)
    return paths


def write_raw_f32(path, arr):
    """Raw little-endian float32 blob plus a JSON sidecar describing it."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    arr.tofile(path)
    with open(path + ".json", "w") as fh:
        json.dump({"shape": list(arr.shape), "dtype": "f32", "order": "C"},
                  fh, sort_keys=True)
        fh.write("\n")


def read_raw_f32(path):
    with open(path + ".json") as fh:
        meta = json.load(fh)
    return np.fromfile(path, dtype="<f4").reshape(meta["shape"])
