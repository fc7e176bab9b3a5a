"""Single-file versioned checkpoint.

Layout (all integers little-endian)::

    magic     8 bytes   b"CTCOCR\\x00\\x01"
    version   u32
    hlen      u32       length of the JSON header
    header    hlen      UTF-8 JSON: model config, alphabet + hash, tensor table, metadata
    payload   ...       tensors in header order, row-major, little-endian floats
    sha256    32 bytes  digest of every preceding byte
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alphabet import Alphabet
from .model import ModelConfig, ModelParams
from .tensor import Tensor

MAGIC = b"CTCOCR\x00\x01"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_DIGEST = 32


class CheckpointError(Exception):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointAlphabetError(CheckpointError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    config: ModelConfig
    alphabet: Alphabet
    params: ModelParams
    optimizer: AdamState | None = None
    metadata: dict = field(default_factory=dict)


def _table(arrays: dict[str, np.ndarray]) -> list[dict]:
    return [{"name": k, "shape": list(a.shape), "dtype": a.dtype.newbyteorder("<").str} for k, a in arrays.items()]


def _payload(arrays: dict[str, np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes() for a in arrays.values())


def encode_checkpoint(ckpt: Checkpoint, version: int = FORMAT_VERSION) -> bytes:
    params = ckpt.params.arrays()
    header = {
        "model_config": ckpt.config.to_dict(),
        "alphabet": ckpt.alphabet.characters,
        "alphabet_hash": ckpt.alphabet.digest(),
        "tensors": _table(params),
        "metadata": ckpt.metadata,
    }
    blobs = [_payload(params)]
    if ckpt.optimizer is not None:
        moments = {f"m:{k}": v for k, v in ckpt.optimizer.m.items()}
        moments.update({f"v:{k}": v for k, v in ckpt.optimizer.v.items()})
        header["optimizer"] = {"step": ckpt.optimizer.step, "tensors": _table(moments)}
        blobs.append(_payload(moments))
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, version, len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def _read_arrays(buf: memoryview, offset: int, table: list[dict]) -> tuple[dict[str, np.ndarray], int]:
    out = {}
    for entry in table:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(buf):
            raise CheckpointIntegrityError(f"payload for {entry['name']} runs past the end of the file")
        arr = np.frombuffer(buf[offset:offset + nbytes], dtype=dtype).reshape(shape)
        out[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
        offset += nbytes
    return out, offset


def decode_checkpoint(data: bytes, expected_alphabet: Alphabet | None = None) -> Checkpoint:
    if len(data) < _PREFIX.size + _DIGEST:
        raise CheckpointIntegrityError(f"checkpoint is truncated ({len(data)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointIntegrityError("not a checkpoint file (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported by this reader (version {FORMAT_VERSION})"
        )
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError("checksum mismatch: checkpoint is corrupt or truncated")
    buf = memoryview(body)
    start = _PREFIX.size
    try:
        header = json.loads(bytes(buf[start:start + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"unreadable header: {exc}") from None
    alphabet = Alphabet(header["alphabet"])
    if alphabet.digest() != header["alphabet_hash"]:
        raise CheckpointAlphabetError("stored alphabet does not match its recorded hash")
    if expected_alphabet is not None and expected_alphabet.digest() != alphabet.digest():
        raise CheckpointAlphabetError(
            f"checkpoint alphabet {alphabet.characters!r} differs from expected {expected_alphabet.characters!r}"
        )
    config = ModelConfig.from_dict(header["model_config"])
    arrays, offset = _read_arrays(buf, start + hlen, header["tensors"])
    params = ModelParams(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})
    optimizer = None
    if "optimizer" in header:
        moments, offset = _read_arrays(buf, offset, header["optimizer"]["tensors"])
        optimizer = AdamState(
            step=int(header["optimizer"]["step"]),
            m={k[2:]: v for k, v in moments.items() if k.startswith("m:")},
            v={k[2:]: v for k, v in moments.items() if k.startswith("v:")},
        )
    if offset != len(body):
        raise CheckpointIntegrityError(f"{len(body) - offset} unexpected trailing bytes")
    return Checkpoint(config, alphabet, params, optimizer, header.get("metadata", {}))


def load_checkpoint(path, expected_alphabet: Alphabet | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes(), expected_alphabet)
