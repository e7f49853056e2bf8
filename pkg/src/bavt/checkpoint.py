"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BAVTCKPT"                      magic
    u32 version
    u32 header length, header bytes  UTF-8 ``key=value`` lines
    u32 tensor count, tensor records
    u8  optimizer flag               1 if an optimizer section follows
    [u64 step, u32 count, records]   Adam moments named ``m/<param>``, ``v/<param>``

A tensor record is ``u16 name length, name, u8 ndim, ndim x u64 dims`` then the
values as little-endian float64.  Floats in the header use ``repr`` so they
round-trip exactly.
"""
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BAVTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_tensors(fh, tensors):
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return data


def _read_tensors(fh, path):
    (count,) = struct.unpack("<I", _read_exact(fh, 4, path))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2, path))
        name = _read_exact(fh, nlen, path).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(fh, 1, path))
        shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, path))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(_read_exact(fh, 8 * size, path), dtype="<f8").reshape(shape)
        out[name] = arr.astype(np.float64)
    return out


def format_header(meta):
    lines = []
    for key, value in meta.items():
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, (tuple, list)):
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines)


def parse_header(text):
    meta = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def save(path, params, meta, optimizer=None):
    """Write ``params`` (name -> array) with a ``meta`` header and optional Adam state."""
    path = Path(path)
    header = format_header(meta).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        _write_tensors(fh, params)
        if optimizer is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", optimizer["step"]))
            moments = {f"m/{k}": v for k, v in optimizer["m"].items()}
            moments.update({f"v/{k}": v for k, v in optimizer["v"].items()})
            _write_tensors(fh, moments)
    tmp.replace(path)


def load(path):
    """Return ``(params, meta, optimizer_or_None)``; meta values are strings."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, path))
        meta = parse_header(_read_exact(fh, hlen, path).decode("utf-8"))
        params = _read_tensors(fh, path)
        (flag,) = struct.unpack("<B", _read_exact(fh, 1, path))
        optimizer = None
        if flag:
            (step,) = struct.unpack("<Q", _read_exact(fh, 8, path))
            moments = _read_tensors(fh, path)
            optimizer = {
                "step": step,
                "m": {k[2:]: v for k, v in moments.items() if k.startswith("m/")},
                "v": {k[2:]: v for k, v in moments.items() if k.startswith("v/")},
            }
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after checkpoint body")
    return params, meta, optimizer
