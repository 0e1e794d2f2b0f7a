"""Binary tensor and image file formats plus checkpoint directories.

AGT1 layout: magic ``AGT1``, u8 rank, rank little-endian u32 dims, then the
row-major float64 payload, little-endian. Round-trips are bit exact.
PGM (P5) and PPM (P6) use maxval 255 and map to [0, 1] reals on load; they
exist for visualization and quantize by design.
"""

from __future__ import annotations

import os
import struct

import numpy as np

__all__ = [
    "read_agt",
    "write_agt",
    "read_pnm",
    "write_pgm",
    "write_ppm",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"AGT1"


def write_agt(path, arr):
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    if a.ndim < 1 or a.ndim > 4:
        raise ValueError(f"AGT1 stores rank 1..4 tensors, got rank {a.ndim}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def read_agt(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (rank,) = struct.unpack("<B", fh.read(1))
        if not 1 <= rank <= 4:
            raise ValueError(f"{path}: rank {rank} outside 1..4")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(dims))
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError(f"{path}: truncated payload")
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims)
    if not np.isfinite(arr).all():
        raise ValueError(f"{path}: non-finite values in tensor")
    return arr.astype(np.float64)


def write_pgm(path, arr):
    """Grayscale P5 from (H, W) or (1, H, W) values in [0, 1]."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 3:
        a = a[0]
    data = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def write_ppm(path, arr):
    """Color P6 from (3, H, W) values in [0, 1]."""
    a = np.asarray(arr, dtype=np.float64)
    if a.shape[0] != 3:
        raise ValueError(f"PPM needs 3 channels, got {a.shape}")
    data = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{a.shape[2]} {a.shape[1]}\n255\n".encode())
        fh.write(data.transpose(1, 2, 0).tobytes())


def _read_pnm_token(fh):
    token = b""
    while True:
        ch = fh.read(1)
        if ch == b"":
            raise ValueError("unexpected end of header")
        if ch == b"#":  # comment to end of line
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_pnm(path):
    """Read binary P5 or P6; returns (1,H,W) or (3,H,W) floats in [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"{path}: bad magic {magic!r}, expected P5 or P6")
        w = int(_read_pnm_token(fh))
        h = int(_read_pnm_token(fh))
        maxval = int(_read_pnm_token(fh))
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
        channels = 1 if magic == b"P5" else 3
        payload = fh.read(h * w * channels)
        if len(payload) != h * w * channels:
            raise ValueError(f"{path}: truncated payload")
    flat = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return flat.reshape(1, h, w)
    return flat.reshape(h, w, 3).transpose(2, 0, 1)


def save_checkpoint(dirpath, tensors):
    """Write named tensors as AGT1 files plus a name -> file -> shape manifest."""
    os.makedirs(dirpath, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(sorted(tensors.items())):
        a = np.asarray(arr, dtype=np.float64)
        fname = f"t{i:05d}.agt"
        write_agt(os.path.join(dirpath, fname), a)
        dims = "x".join(str(d) for d in a.shape)
        lines.append(f"{name}\t{fname}\t{dims}")
    with open(os.path.join(dirpath, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(dirpath):
    manifest = os.path.join(dirpath, "manifest.txt")
    out = {}
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name, fname, dims = line.split("\t")
            arr = read_agt(os.path.join(dirpath, fname))
            want = tuple(int(d) for d in dims.split("x"))
            if arr.shape != want:
                raise ValueError(f"{name}: manifest shape {want} but file has {arr.shape}")
            out[name] = arr
    return out
