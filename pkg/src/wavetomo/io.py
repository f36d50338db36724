"""WTM1 binary field container and JSON sidecars.

Layout (little-endian)::

    b"WTM1" | u32 dtype code | u32 ndim | ndim x u64 dims | f64 dx | 2 x f64 origin | payload

dtype code 1 is float32 real, 2 is complex64 (interleaved re/im). The
payload is row-major. Reading a file and writing the array back yields the
identical byte string.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import StructuralError
from .grid import Grid2D

MAGIC = b"WTM1"
REAL32 = 1
COMPLEX64 = 2
_DTYPES = {REAL32: np.dtype("<f4"), COMPLEX64: np.dtype("<c8")}


@dataclass
class Container:
    data: np.ndarray
    dx: float
    origin: tuple

    def grid(self):
        """Grid of the trailing two axes."""
        ny, nx = self.data.shape[-2:]
        return Grid2D(nx, ny, self.dx, self.origin)


def encode(data, dx, origin=(0.0, 0.0)):
    data = np.asarray(data)
    if np.iscomplexobj(data):
        code = COMPLEX64
    elif np.issubdtype(data.dtype, np.number) or data.dtype == bool:
        code = REAL32
    else:
        raise StructuralError(f"cannot store dtype {data.dtype}")
    payload = np.ascontiguousarray(data, dtype=_DTYPES[code])
    if not np.all(np.isfinite(payload)):
        raise StructuralError("refusing to store non-finite values")
    head = MAGIC + struct.pack("<II", code, payload.ndim)
    head += struct.pack(f"<{payload.ndim}Q", *payload.shape)
    head += struct.pack("<3d", float(dx), float(origin[0]), float(origin[1]))
    return head + payload.tobytes()


def decode(buf):
    if buf[:4] != MAGIC:
        raise StructuralError("not a WTM1 container")
    code, ndim = struct.unpack_from("<II", buf, 4)
    if code not in _DTYPES:
        raise StructuralError(f"unknown dtype code {code}")
    off = 12
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dx, ox, oy = struct.unpack_from("<3d", buf, off)
    off += 24
    dtype = _DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    if len(buf) - off != count * dtype.itemsize:
        raise StructuralError("truncated or oversized WTM1 payload")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims)
    return Container(data.copy(), dx, (ox, oy))


def write_wtm1(path, data, dx, origin=(0.0, 0.0)):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(encode(data, dx, origin))
    tmp.replace(path)
    return path


def read_wtm1(path):
    return decode(Path(path).read_bytes())


def write_field(path, data, grid):
    return write_wtm1(path, data, grid.dx, grid.origin)


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def dump_json(obj, path=None):
    """Deterministic JSON text; written atomically when ``path`` is given."""
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".part")
        tmp.write_text(text)
        tmp.replace(path)
    return text


def load_json(path):
    return json.loads(Path(path).read_text())


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
