"""Self-describing binary checkpoint.

Layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"NONFATCK"
    8       4     u32 format version
    12      4     u32 header length H
    16      H     UTF-8 JSON header, keys sorted, no whitespace
    16+H    ...   tensor payloads, row-major, concatenated in table order

The header holds ``run`` (the run configuration), ``norm_stats``,
``meta`` (tensor dims and time range), ``model`` (static model shape) and
``tensors``: a list of ``{"name", "shape", "dtype"}`` entries sorted by
name, where ``dtype`` is ``"<f8"`` or ``"<f4"``. Serialization is
canonical, so ``save -> load -> save`` reproduces the same bytes.
"""
from dataclasses import dataclass
import json
import struct

import numpy as np

from nonfat.data import NormStats, TensorMeta
from nonfat.errors import DataError
from nonfat.model import NonfatParams

MAGIC = b"NONFATCK"
VERSION = 1
_PREFIX = struct.Struct("<8sII")
_DTYPES = ("<f8", "<f4")


@dataclass
class Checkpoint:
    params: NonfatParams
    run: dict
    norm: NormStats
    meta: TensorMeta
    version: int = VERSION


def to_bytes(ck: Checkpoint) -> bytes:
    names = sorted(ck.params.values)
    arrays = []
    table = []
    for name in names:
        a = np.asarray(ck.params.values[name])
        dt = np.dtype(a.dtype).newbyteorder("<").str
        if dt not in _DTYPES:
            raise ValueError(f"tensor {name!r} has unsupported dtype {a.dtype}")
        arrays.append(np.ascontiguousarray(a, dtype=dt))
        table.append({"name": name, "shape": list(a.shape), "dtype": dt})
    header = {
        "run": ck.run,
        "norm_stats": ck.norm.to_dict(),
        "meta": ck.meta.to_dict(),
        "model": ck.params.meta_dict(),
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    return b"".join([_PREFIX.pack(MAGIC, VERSION, len(head)), head] + [a.tobytes() for a in arrays])


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise DataError("checkpoint is truncated")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise DataError("not a nonfat checkpoint (bad magic)")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(buf[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from exc
    pos = start + hlen
    values = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + n > len(buf):
            raise DataError(f"checkpoint payload truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(buf, dtype=dt, count=n // dt.itemsize, offset=pos).reshape(shape)
        values[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += n
    if pos != len(buf):
        raise DataError(f"checkpoint has {len(buf) - pos} trailing bytes")
    params = NonfatParams.from_meta_dict(header["model"], values)
    return Checkpoint(
        params, header["run"], NormStats.from_dict(header["norm_stats"]),
        TensorMeta.from_dict(header["meta"]), version,
    )


def save(path, ck: Checkpoint):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ck))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
