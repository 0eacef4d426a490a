"""Binary tensor container.

Single tensor record::

    b"CSLT" | version u16 | rank u8 | dims u32[rank] | float32 payload (row-major)

All integers and floats are little-endian. A named-tensor file (weights,
multi-level head outputs) is a sequence of ``name_len u16 | utf-8 name |
tensor record`` entries running to end of file.
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"CSLT"
VERSION = 1


class TensorFileError(ValueError):
    pass


def write_tensor(f: BinaryIO, arr) -> None:
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    if arr.ndim > 255:
        raise TensorFileError("rank exceeds 255")
    f.write(MAGIC)
    f.write(struct.pack("<HB", VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TensorFileError(f"truncated file while reading {what}")
    return data


def read_tensor(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4, "magic") != MAGIC:
        raise TensorFileError("bad magic; not a CSLT tensor record")
    version, rank = struct.unpack("<HB", _read_exact(f, 3, "header"))
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(f, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_tensor(f)
        if f.read(1):
            raise TensorFileError("trailing bytes after tensor record")
    return arr


def save_named(path, tensors: Mapping[str, object]) -> None:
    with open(path, "wb") as f:
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise TensorFileError(f"name too long: {name[:40]}...")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            write_tensor(f, getattr(arr, "data", arr))


def load_named(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        while True:
            head = f.read(2)
            if not head:
                break
            if len(head) != 2:
                raise TensorFileError("truncated name length")
            (n,) = struct.unpack("<H", head)
            name = _read_exact(f, n, "name").decode("utf-8")
            if name in out:
                raise TensorFileError(f"duplicate tensor name {name!r}")
            out[name] = read_tensor(f)
    return out


def load_any(path) -> dict[str, np.ndarray]:
    """Load a bare tensor (returned under the name ``"0"``) or a named-tensor file."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == MAGIC:
        return {"0": load_tensor(path)}
    return load_named(path)


def export_weights(net, path) -> None:
    save_named(path, {k: v.data for k, v in sorted(net.params.items())})


def import_weights(net, path):
    loaded = load_named(path)
    missing = sorted(set(net.params) - set(loaded))
    extra = sorted(set(loaded) - set(net.params))
    if missing or extra:
        raise TensorFileError(f"weights do not match network: missing {missing[:5]}, unexpected {extra[:5]}")
    return net.with_params(loaded)


__all__ = ["MAGIC", "VERSION", "TensorFileError", "write_tensor", "read_tensor", "save_tensor", "load_tensor",
           "save_named", "load_named", "load_any", "export_weights", "import_weights"]
