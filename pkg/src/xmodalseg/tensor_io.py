"""Dense tensor file format, seeded RNG, softmax and class-map rendering.

Tensors are plain ``numpy.ndarray`` values, row-major and channel-first
(``C x H x W``).  Only three dtypes are storable: float32, float64, uint16.

MMTF layout (little-endian, no padding, no checksum)::

    b"MMTF" | u8 version=1 | u8 dtype | u8 ndim | ndim x u32 extents | payload
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"MMTF"
VERSION = 1
IGNORE = 65535

DTYPE_CODES = {
    np.dtype("float32"): 1,
    np.dtype("float64"): 2,
    np.dtype("uint16"): 3,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}

# Class id -> RGB.  Ids beyond the table must be rendered with a custom palette.
PALETTE = (
    (0, 0, 0),        # 0 background / sky
    (128, 64, 128),   # 1 ground
    (220, 20, 60),    # 2 vehicle
    (250, 170, 30),   # 3 pole
    (0, 0, 230),      # 4 pedestrian
    (107, 142, 35),
    (70, 130, 180),
    (255, 255, 0),
    (0, 255, 255),
    (255, 0, 255),
    (152, 251, 152),
    (119, 11, 32),
    (190, 153, 153),
    (102, 102, 156),
    (255, 255, 255),
    (128, 128, 128),
)


class TensorFormatError(ValueError):
    """Raised for malformed MMTF files; ``offset`` is the failing byte."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def make_rng(seed):
    """Seeded generator (PCG64); identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(np.uint64(seed)))


def child_rng(seed, index):
    """Independent stream for ``index`` derived from ``(seed, index)``."""
    ss = np.random.SeedSequence([int(seed), int(index)])
    return np.random.Generator(np.random.PCG64(ss))


def encode_tensor(t):
    t = np.asarray(t)
    if t.dtype not in DTYPE_CODES:
        raise TypeError(f"unsupported dtype {t.dtype}")
    if t.ndim == 0 or t.ndim > 255 or any(d < 1 for d in t.shape):
        raise ValueError(f"invalid dims {t.shape}")
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_CODES[t.dtype], t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    payload = np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<")).tobytes()
    return header + payload


def decode_tensor(buf):
    if len(buf) < 7:
        raise TensorFormatError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {bytes(buf[:4])!r}", 0)
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", 4)
    if code not in CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}", 5)
    if ndim == 0:
        raise TensorFormatError("ndim must be >= 1", 6)
    off = 7
    if len(buf) < off + 4 * ndim:
        raise TensorFormatError("truncated extents", len(buf))
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    for i, d in enumerate(dims):
        if d < 1:
            raise TensorFormatError(f"extent {i} is zero", off + 4 * i)
    off += 4 * ndim
    dtype = CODE_DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off < nbytes:
        raise TensorFormatError(
            f"truncated payload: need {nbytes} bytes, have {len(buf) - off}", len(buf)
        )
    if len(buf) - off > nbytes:
        raise TensorFormatError("trailing bytes after payload", off + nbytes)
    data = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=nbytes // dtype.itemsize, offset=off)
    return data.astype(dtype).reshape(dims)


def write_tensor(t, path):
    with open(path, "wb") as f:
        f.write(encode_tensor(t))


def read_tensor(path):
    with open(path, "rb") as f:
        return decode_tensor(f.read())


def softmax_channels(logits):
    """Softmax over axis 0 of a ``N_cls x ...`` array."""
    logits = np.asarray(logits)
    if logits.shape[0] < 2:
        raise ValueError("softmax needs at least two channels")
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def export_ppm(classmap, path, palette=None):
    """Write an ``H x W`` class-id map as binary PPM; IGNORE pixels are black."""
    classmap = np.asarray(classmap)
    if classmap.ndim != 2:
        raise ValueError("class map must be H x W")
    if palette is None:
        palette = dict(enumerate(PALETTE))
    elif not isinstance(palette, dict):
        palette = dict(enumerate(palette))
    ids = np.unique(classmap)
    for cid in ids:
        if int(cid) != IGNORE and int(cid) not in palette:
            raise ValueError(f"class id {int(cid)} has no palette entry")
    h, w = classmap.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    for cid in ids:
        if int(cid) == IGNORE:
            continue
        rgb[classmap == cid] = palette[int(cid)]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())
    os.replace(tmp, path)


def read_ppm(path):
    """Read a P6 file written by :func:`export_ppm` as ``H x W x 3`` uint8."""
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
