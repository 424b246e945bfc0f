"""Named-tensor checkpoint file.

Layout: magic "QGSC", version u8, tensor count u32, then per tensor:
name length u16, name bytes (utf-8), rank u8, dims u32 x rank, float32
little-endian values. Saving is canonical (sorted names) so save -> load ->
save is byte-identical.
"""

import struct

import numpy as np

MAGIC = b"QGSC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(tensors: dict, path):
    """``tensors`` maps name -> numpy array (cast to float32 on write)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BI", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    tensors = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        header = f.read(5)
        if len(header) != 5:
            raise CheckpointError("truncated checkpoint header")
        version, count = struct.unpack("<BI", header)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(f, 2))
            name = _read(f, nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", _read(f, 1))
            dims = struct.unpack(f"<{rank}I", _read(f, 4 * rank))
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(_read(f, 4 * size), dtype="<f4").reshape(dims)
            tensors[name] = arr.copy()
    return tensors


def _read(f, n):
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint at byte {f.tell() - len(data)}")
    return data
