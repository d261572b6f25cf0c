"""PPM (P6) color images and PFM (Pf) depth maps.

PFM files are written single-channel, scale -1.0 (little-endian), rows
bottom-to-top.  Non-positive depth values mean invalid.
"""

from __future__ import annotations

import numpy as np

from .cost_volume import RGBImage, SparseDepthMap
from .errors import ParameterError


def write_ppm(path, image):
    data = np.clip(np.rint(image.channels * 255.0), 0, 255).astype(np.uint8)
    interleaved = np.transpose(data, (1, 2, 0)).tobytes()
    with open(path, "wb") as f:
        f.write(f"P6\n{image.width} {image.height}\n255\n".encode())
        f.write(interleaved)


def _read_token(f):
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ParameterError("unexpected end of header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_ppm(path):
    with open(path, "rb") as f:
        if _read_token(f) != b"P6":
            raise ParameterError(f"{path} is not a binary PPM (P6) file")
        width = int(_read_token(f))
        height = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise ParameterError(f"unsupported PPM maxval {maxval}")
        raw = f.read(width * height * 3)
    if len(raw) != width * height * 3:
        raise ParameterError(f"{path} is truncated")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    channels = np.transpose(data, (2, 0, 1)).astype(np.float64) / 255.0
    return RGBImage(width, height, channels)


def write_pfm(path, data):
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ParameterError(f"PFM writer expects a 2-D array, got shape {arr.shape}")
    height, width = arr.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode())
        f.write(np.flipud(arr).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        if _read_token(f) != b"Pf":
            raise ParameterError(f"{path} is not a single-channel PFM (Pf) file")
        width = int(_read_token(f))
        height = int(_read_token(f))
        scale = float(_read_token(f))
        raw = f.read(width * height * 4)
    if len(raw) != width * height * 4:
        raise ParameterError(f"{path} is truncated")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return np.flipud(data).astype(np.float64)


def read_depth_map(path):
    """Load a PFM depth file as a SparseDepthMap (values <= 0 invalid)."""
    data = read_pfm(path)
    valid = data > 0
    return SparseDepthMap(data.shape[1], data.shape[0], np.where(valid, data, 0.0), valid)
