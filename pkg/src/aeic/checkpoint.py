"""Binary parameter checkpoints.

Layout: ``AEICW`` | version u8 | config_id u8 | records, where each record is
name length u16 LE | UTF-8 name | shape 4 x u32 LE | float32 LE data.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"AEICW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def serialize_state(state: dict, config_id: int) -> bytes:
    out = [MAGIC, struct.pack("<BB", VERSION, config_id & 0xFF)]
    for name, arr in state.items():
        arr = np.asarray(arr)
        if arr.ndim != 4:
            raise CheckpointError(f"{name}: parameters must be 4D, got shape {arr.shape}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<4I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def deserialize_state(data: bytes):
    """Returns (state dict of float32 arrays, config_id)."""
    if data[:5] != MAGIC:
        raise CheckpointError(f"bad magic {data[:5]!r}")
    if len(data) < 7:
        raise CheckpointError("truncated header")
    version, config_id = data[5], data[6]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos, state = 7, {}
    while pos < len(data):
        if pos + 2 > len(data):
            raise CheckpointError(f"truncated record at byte offset {pos}")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n + 16 > len(data):
            raise CheckpointError(f"truncated record header at byte offset {pos}")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        shape = struct.unpack_from("<4I", data, pos)
        pos += 16
        size = 4 * int(np.prod(shape))
        if pos + size > len(data):
            raise CheckpointError(f"{name}: truncated data at byte offset {pos}")
        state[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    return state, config_id


def save_checkpoint(model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_state(model.state_dict(), model.config_id))


def load_checkpoint(model, path):
    """Load parameters into ``model`` after checking the config id; returns the model."""
    with open(path, "rb") as fh:
        state, config_id = deserialize_state(fh.read())
    if config_id != model.config_id:
        raise CheckpointError(f"checkpoint config_id {config_id} does not match model config_id {model.config_id}")
    model.load_state_dict(state)
    return model
