"""Checkpoint file format.

Layout (all integers little-endian):

    bytes 0-7    magic b"TPROBE01"
    bytes 8-11   u32 manifest length in bytes
    manifest     UTF-8 JSON {config, tensors: [{name, dtype, shape, offset, length}]}
    payload      row-major f32 blobs, contiguous, in manifest order

offset and length are byte counts relative to the start of the payload.
"""

import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointNotFoundError,
    ConfigError,
    ManifestError,
    OffsetError,
    ShapeError,
    TensorShapeError,
    TruncatedPayloadError,
)
from .files import write_atomic
from .model import Checkpoint, ModelConfig, expected_shapes

logger = logging.getLogger(__name__)

MAGIC = b"TPROBE01"
HEADER_SIZE = len(MAGIC) + 4
DTYPE = "f32"
_LE_F32 = np.dtype("<f4")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Serialize a checkpoint to bytes."""
    entries: List[Dict[str, Any]] = []
    blobs: List[bytes] = []
    offset = 0
    for name in ckpt.names():
        blob = ckpt[name].astype(_LE_F32).tobytes(order="C")
        entries.append({
            "name": name,
            "dtype": DTYPE,
            "shape": list(ckpt[name].shape),
            "offset": offset,
            "length": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)

    manifest = {"config": ckpt.config.to_dict(), "tensors": entries}
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(manifest_bytes)) + manifest_bytes + b"".join(blobs)


def split_header(data: bytes) -> Dict[str, Any]:
    """Parse magic, manifest and payload boundaries without building tensors."""
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    if len(data) < HEADER_SIZE:
        raise ManifestError("file ends inside the manifest length field")

    (manifest_len,) = struct.unpack("<I", data[len(MAGIC):HEADER_SIZE])
    if HEADER_SIZE + manifest_len > len(data):
        raise ManifestError(
            f"manifest length {manifest_len} exceeds remaining file size {len(data) - HEADER_SIZE}"
        )
    try:
        manifest = json.loads(data[HEADER_SIZE:HEADER_SIZE + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"manifest is not valid UTF-8 JSON: {e}")
    if not isinstance(manifest, dict) or "config" not in manifest or not isinstance(manifest.get("tensors"), list):
        raise ManifestError("manifest must be an object with 'config' and 'tensors'")

    return {
        "manifest": manifest,
        "manifest_length": manifest_len,
        "payload": data[HEADER_SIZE + manifest_len:],
    }


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Parse checkpoint bytes, raising a distinct error per kind of corruption."""
    parts = split_header(data)
    manifest, payload = parts["manifest"], parts["payload"]

    try:
        config = ModelConfig.from_dict(manifest["config"])
    except ConfigError as e:
        raise ManifestError(f"manifest config invalid: {e}")
    shapes = expected_shapes(config)

    entries = manifest["tensors"]
    names = [entry.get("name") if isinstance(entry, dict) else None for entry in entries]
    if names != list(shapes):
        missing = [n for n in shapes if n not in names]
        unexpected = [n for n in names if n not in shapes]
        raise ManifestError(f"manifest tensor list mismatch (missing {missing}, unexpected {unexpected})")

    expected_offset = 0
    layout = []
    for entry in entries:
        name = entry["name"]
        if entry.get("dtype") != DTYPE:
            raise ManifestError(f"tensor {name}: unsupported dtype {entry.get('dtype')!r}")
        try:
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            length = int(entry["length"])
        except (KeyError, TypeError, ValueError):
            raise ManifestError(f"tensor {name}: shape/offset/length missing or malformed")

        if int(np.prod(shape, dtype=np.int64)) * _LE_F32.itemsize != length:
            raise TensorShapeError(
                f"tensor {name}: shape {list(shape)} does not match payload length {length}", name
            )
        if shape != shapes[name]:
            raise TensorShapeError(
                f"tensor {name}: shape {list(shape)} does not match config shape {list(shapes[name])}", name
            )
        if offset != expected_offset:
            raise OffsetError(f"tensor {name}: offset {offset}, expected {expected_offset}")
        layout.append((name, shape, offset, length))
        expected_offset += length

    if len(payload) < expected_offset:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, manifest declares {expected_offset}")
    if len(payload) > expected_offset:
        raise TruncatedPayloadError(f"payload has {len(payload) - expected_offset} trailing bytes")

    tensors = OrderedDict()
    for name, shape, offset, length in layout:
        count = length // _LE_F32.itemsize
        tensor = np.frombuffer(payload, dtype=_LE_F32, count=count, offset=offset).astype(np.float32)
        tensors[name] = tensor.reshape(shape)
    try:
        return Checkpoint(config, tensors)
    except ShapeError as e:
        raise TensorShapeError(str(e))


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write a checkpoint atomically."""
    path = write_atomic(path, encode_checkpoint(ckpt))
    logger.info("saved checkpoint %s (%d tensors)", path, len(ckpt.names()))
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint file."""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise CheckpointNotFoundError(f"cannot read checkpoint {path}: {e.strerror or e}")
    ckpt = decode_checkpoint(data)
    logger.info("loaded checkpoint %s", path)
    return ckpt
