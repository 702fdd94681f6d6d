"""Binary parameter checkpoints plus a JSON model-config sidecar.

Layout (little endian)::

    b"NNCKPT1\\0"  u32 count
    repeated: u16 name_len, name (utf-8), u8 rank, rank x u32 dims, float32 values

Entries are written in sorted name order so equal states give equal bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError, MissingArtifactError

MAGIC = b"NNCKPT1\0"


def encode(state: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return state


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save(model, path, meta: dict | None = None) -> Path:
    """Write parameters and buffers, plus ``<path>.json`` with the model config and ``meta``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(model.state_dict()))
    os.replace(tmp, path)
    config = getattr(model, "config", None)
    if config is not None:
        side = {"model": config.to_dict(), "meta": meta or {}}
        sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def load_meta(path) -> dict:
    side = sidecar_path(path)
    if not side.is_file():
        raise MissingArtifactError(f"model config sidecar not found: {side}")
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt sidecar {side}: {exc}") from exc


def load_state(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def load_into(model, path):
    """Load a checkpoint into an already built model (names and shapes must match)."""
    model.load_state_dict(load_state(path))
    return model


def load(path, seed: int = 0):
    """Rebuild the model from the sidecar config, then load its parameters."""
    from .nn import ModelConfig, build_model

    config = ModelConfig.from_dict(load_meta(path)["model"])
    return load_into(build_model(config, seed), path)
