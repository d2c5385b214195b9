"""Binary checkpoint format for named float32 tensors.

Layout, all integers little-endian:
  magic "DUPX" | version u32 | tensor count u32
  per tensor: name length u32 | UTF-8 name | rank u32 | extents u64 each | raw float32 data

Optimizer state rides along as extra tensors: "<name>.m" and "<name>.v" hold
the Adam moments and "<name>.t" (shape [1]) the step counter, so a resumed run
continues bit-for-bit.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .optim import Param

MAGIC = b"DUPX"
VERSION = 1


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays (converted to float32) in checkpoint layout."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name -> float32 array dict."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    off = 4
    try:
        version, count = struct.unpack_from("<II", blob, off)
        off += 8
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            end = off + 4 * n
            if end > len(blob):
                raise ValueError(f"{path}: truncated tensor data for {name!r}")
            arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(shape).copy()
            off = end
            out[name] = arr
    except struct.error as e:
        raise ValueError(f"{path}: truncated checkpoint") from e
    return out


def save_params(path, params: dict[str, Param], optimizer_state: bool = True) -> None:
    """Checkpoint a parameter set, optionally with Adam moments and step counts."""
    tensors: dict[str, np.ndarray] = {}
    for name, p in params.items():
        tensors[name] = p.tensor.data
        if optimizer_state:
            tensors[name + ".m"] = p.m
            tensors[name + ".v"] = p.v
            tensors[name + ".t"] = np.asarray([p.t], dtype=np.float32)
    write_tensors(path, tensors)


def load_params(path) -> dict[str, Param]:
    """Rebuild parameters (and any saved optimizer state) from a checkpoint."""
    tensors = read_tensors(path)
    params: dict[str, Param] = {}
    for name, arr in tensors.items():
        if name.endswith((".m", ".v", ".t")):
            continue
        p = Param(arr)
        if name + ".m" in tensors:
            p.m = tensors[name + ".m"]
            p.v = tensors[name + ".v"]
            p.t = int(tensors[name + ".t"][0])
        params[name] = p
    return params
