"""Named-tensor binary checkpoints.

Layout (all integers little-endian u32)::

    b"FFSD" | version=1 | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | dtype (0 = f32 LE) | raw values
"""
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FFSD"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors):
    """Serialise an ordered ``{name: array}`` mapping to bytes."""
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f4")  # tobytes() is C-order; keeps rank 0
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(struct.pack("<I", DTYPE_F32))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_checkpoint(data, source="<bytes>"):
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not an FFSD checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"{source}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        (dtype,) = struct.unpack("<I", take(4))
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{source}: unknown dtype code {dtype} for {name!r}")
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes")
    return tensors


def atomic_write_bytes(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_checkpoint(path, tensors):
    atomic_write_bytes(path, encode_checkpoint(tensors))


def read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))


def model_tensors(model):
    return {p.name: p.value for p in model.params()}


def save_model(path, model):
    write_checkpoint(path, model_tensors(model))


def load_model(path, model):
    """Load every parameter of ``model`` from ``path``; all names must be present."""
    tensors = read_checkpoint(path)
    for name, p in model.named_params().items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if tensors[name].shape != p.value.shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {p.value.shape}")
        p.value[...] = tensors[name]
    return model
