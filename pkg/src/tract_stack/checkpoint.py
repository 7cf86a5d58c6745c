"""Self-describing network checkpoints.

Layout (all integers little-endian):

    magic        8 bytes  b"TSTKUNET"
    version      uint32   FORMAT_VERSION
    config_len   uint32   length of the JSON blob that follows
    config       UTF-8 JSON of UNetConfig
    tensors      float32 little-endian, one after another in the order of
                 ``unet.param_shapes(config)``; shapes come from the config

Writes go to a temporary file in the target directory and are moved into
place with ``os.replace`` so a crash never leaves a half-written checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from tract_stack.errors import ConfigError, CorruptCheckpoint, FormatError, IoError, ShapeError
from tract_stack.unet import NetworkParams, UNetConfig, audit, param_shapes

MAGIC = b"TSTKUNET"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_FLOAT = np.dtype("<f4")


def encode_params(params: NetworkParams) -> bytes:
    audit(params)
    config_blob = json.dumps(asdict(params.config), sort_keys=True).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(config_blob)), config_blob]
    for tensor in params.tensors.values():
        parts.append(np.ascontiguousarray(tensor, dtype=_FLOAT).tobytes())
    return b"".join(parts)


def decode_params(blob: bytes, source: str = "<bytes>") -> NetworkParams:
    if len(blob) < _PREFIX.size:
        raise CorruptCheckpoint(f"{source}: truncated checkpoint ({len(blob)} bytes)")
    magic, version, config_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{source}: not a network checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: checkpoint version {version}, expected {FORMAT_VERSION}")
    offset = _PREFIX.size
    config_blob = blob[offset : offset + config_len]
    if len(config_blob) != config_len:
        raise CorruptCheckpoint(f"{source}: truncated config block")
    try:
        config = UNetConfig(**json.loads(config_blob.decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ConfigError) as exc:
        raise CorruptCheckpoint(f"{source}: unreadable config: {exc}") from exc

    shapes = param_shapes(config)
    payload = memoryview(blob)[offset + config_len :]
    expected = sum(int(np.prod(s)) for s in shapes.values()) * _FLOAT.itemsize
    if len(payload) != expected:
        raise CorruptCheckpoint(
            f"{source}: payload has {len(payload)} bytes, config needs {expected}"
        )
    tensors: dict[str, np.ndarray] = {}
    cursor = 0
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        chunk = np.frombuffer(payload, dtype=_FLOAT, count=count, offset=cursor)
        tensors[name] = chunk.astype(np.float32).reshape(shape)
        cursor += count * _FLOAT.itemsize
    params = NetworkParams(config, tensors)
    try:
        audit(params)
    except ShapeError as exc:
        raise CorruptCheckpoint(f"{source}: {exc}") from exc
    return params


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp_name: str | None = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
        tmp_name = None
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    finally:
        if tmp_name is not None:
            try:
                os.unlink(tmp_name)
            except OSError:
                pass


def save_params(params: NetworkParams, path: Path | str) -> None:
    atomic_write_bytes(Path(path), encode_params(params))


def load_params(path: Path | str) -> NetworkParams:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode_params(blob, source=str(path))
