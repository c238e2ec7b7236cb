"""Checkpoint files.

Layout (all integers little-endian)::

    magic       8 bytes   b"SMCACKPT"
    version     u32       1
    config_len  u32       byte length of the config text
    config      utf-8     flat key = value text (see smca.config.dumps)
    count       u32       number of tensors
    count times:
        name_len  u16
        name      utf-8
        ndim      u8
        dims      ndim x u32
        data      prod(dims) x float64 (little-endian, row-major)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import config as config_io

MAGIC = b"SMCACKPT"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, model) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg_bytes = config_io.dumps(model.cfg).encode("utf-8")
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def read_checkpoint(path) -> tuple[str, dict]:
    """Returns (config text, {name: array})."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    version, cfg_len = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg_text = blob[pos : pos + cfg_len].decode("utf-8")
    pos += cfg_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return cfg_text, state


def load_checkpoint(path):
    from .model import SMCAModel

    cfg_text, state = read_checkpoint(path)
    model = SMCAModel(config_io.loads(cfg_text))
    model.load_state_dict(state)
    return model
