"""
Checkpoint Store for the Multi-Exit Lab
Versioned, checksummed binary checkpoints: magic, length-prefixed JSON header, float64 arrays, CRC32
"""

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import orjson

from src.core.errors import CorruptCheckpointError, ShapeMismatchError, VersionMismatchError
from src.core.multiexit import ModelConfig, MultiExitModel, parameter_shapes

logger = logging.getLogger(__name__)

MAGIC = b"MXCKPT01"
MAGIC_PREFIX = b"MXCKPT"
FORMAT_VERSION = 1
_HEADER_LEN = struct.Struct("<Q")
_CRC = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int
    provenance: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def to_model(self) -> MultiExitModel:
        return MultiExitModel(self.config, self.params, self.seed)


def encode_checkpoint(model: MultiExitModel, provenance: dict[str, Any] | None = None) -> bytes:
    manifest = [{"name": n, "shape": list(model.params[n].shape)} for n in model.parameter_names]
    header = {
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "manifest": manifest,
        "seed": model.seed,
        "provenance": provenance or {},
    }
    header_bytes = orjson.dumps(header, option=orjson.OPT_SORT_KEYS)
    body = bytearray(MAGIC)
    body += _HEADER_LEN.pack(len(header_bytes))
    body += header_bytes
    for name in model.parameter_names:
        body += np.ascontiguousarray(model.params[name], dtype="<f8").tobytes()
    body += _CRC.pack(zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + _HEADER_LEN.size + _CRC.size:
        raise CorruptCheckpointError("checkpoint is truncated")
    if blob[: len(MAGIC_PREFIX)] != MAGIC_PREFIX:
        raise CorruptCheckpointError("not a checkpoint file (bad magic)")
    if blob[: len(MAGIC)] != MAGIC:
        raise VersionMismatchError(f"unsupported checkpoint version {blob[len(MAGIC_PREFIX):len(MAGIC)]!r}")
    payload, (stored_crc,) = blob[: -_CRC.size], _CRC.unpack(blob[-_CRC.size :])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CorruptCheckpointError("checkpoint checksum mismatch")

    offset = len(MAGIC)
    (header_len,) = _HEADER_LEN.unpack_from(payload, offset)
    offset += _HEADER_LEN.size
    if offset + header_len > len(payload):
        raise CorruptCheckpointError("header length exceeds file size")
    try:
        header = orjson.loads(payload[offset : offset + header_len])
    except orjson.JSONDecodeError as e:
        raise CorruptCheckpointError(f"unreadable header: {e}") from e
    offset += header_len
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {header.get('version')}")

    config = ModelConfig.from_dict(header["config"])
    expected = parameter_shapes(config)
    params: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise ShapeMismatchError(f"manifest entry '{name}' {shape} does not match the config")
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(payload):
            raise CorruptCheckpointError(f"parameter '{name}' is truncated")
        params[name] = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(payload) or set(params) != set(expected):
        raise CorruptCheckpointError("parameter section does not match the manifest")
    return Checkpoint(config, params, int(header["seed"]), header.get("provenance", {}), FORMAT_VERSION)


def save_checkpoint(model: MultiExitModel, path: str | Path, provenance: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(encode_checkpoint(model, provenance))
    except OSError as e:
        logger.error(f"failed to write checkpoint {path}: {e}")
        raise
    logger.info(f"checkpoint written to {path} (hash {model.state_hash()[:12]})")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    checkpoint = decode_checkpoint(path.read_bytes())
    logger.debug(f"loaded checkpoint {path}")
    return checkpoint
