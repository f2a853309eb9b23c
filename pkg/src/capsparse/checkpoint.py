"""Binary checkpoint format.

    magic "CAPSCKPT" | u32 version | u32 section count | sections...
    section: u16 name length | name | u8 kind | u64 payload length | u32 crc32 | payload

Kinds: 0 = UTF-8 JSON, 1 = tensor. A tensor payload is
``u8 dtype code | u8 ndim | u32 dims... | little-endian data``. Every integer
in the framing is little-endian as well.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CAPSCKPT"
VERSION = 1
JSON, TENSOR = 0, 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    step: int
    params: dict[str, np.ndarray]
    adam: dict  # t, lr, beta1, beta2, eps
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    sparsity: dict
    rng: dict = field(default_factory=dict)
    fingerprint: str = ""
    svm: dict[str, np.ndarray] | None = None
    svm_meta: dict | None = None
    extra: dict = field(default_factory=dict)


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(payload: bytes) -> np.ndarray:
    code, ndim = struct.unpack_from("<BB", payload, 0)
    if code not in _DTYPES:
        raise CorruptCheckpoint(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", payload, 2)
    dt = _DTYPES[code]
    data = np.frombuffer(payload, dtype=dt, offset=2 + 4 * ndim, count=int(np.prod(dims)))
    # native byte order for computation; values are unchanged
    return data.astype(dt.newbyteorder("="), copy=True).reshape(dims)


def _section(name: str, kind: int, payload: bytes) -> bytes:
    nb = name.encode()
    return struct.pack("<H", len(nb)) + nb + struct.pack("<BQI", kind, len(payload), zlib.crc32(payload)) + payload


def to_bytes(ck: Checkpoint) -> bytes:
    meta = {
        "config": ck.config, "step": ck.step, "adam": ck.adam, "sparsity": ck.sparsity, "rng": ck.rng,
        "fingerprint": ck.fingerprint, "svm_meta": ck.svm_meta, "extra": ck.extra,
        "param_names": list(ck.params), "has_svm": ck.svm is not None,
    }
    sections = [_section("meta", JSON, json.dumps(meta, sort_keys=True).encode())]
    for name, arr in ck.params.items():
        sections.append(_section(f"param/{name}", TENSOR, encode_tensor(arr)))
    for name in ck.adam_m:
        sections.append(_section(f"adam_m/{name}", TENSOR, encode_tensor(ck.adam_m[name])))
        sections.append(_section(f"adam_v/{name}", TENSOR, encode_tensor(ck.adam_v[name])))
    for name, arr in (ck.svm or {}).items():
        sections.append(_section(f"svm/{name}", TENSOR, encode_tensor(arr)))
    return MAGIC + struct.pack("<II", VERSION, len(sections)) + b"".join(sections)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    pos = 16
    sections: dict[str, object] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            kind, length, crc = struct.unpack_from("<BQI", raw, pos)
            pos += 13
        except (struct.error, UnicodeDecodeError) as e:
            raise CorruptCheckpoint(f"malformed section header at byte {pos}") from e
        payload = raw[pos:pos + length]
        pos += length
        if len(payload) != length:
            raise CorruptCheckpoint(f"section {name!r} truncated")
        if zlib.crc32(payload) != crc:
            raise CorruptCheckpoint(f"checksum mismatch in section {name!r}")
        sections[name] = json.loads(payload) if kind == JSON else decode_tensor(payload)
    if pos != len(raw):
        raise CorruptCheckpoint("trailing bytes after last section")
    meta = sections["meta"]
    pick = lambda prefix: {k.split("/", 1)[1]: v for k, v in sections.items() if k.startswith(prefix + "/")}
    params = pick("param")
    params = {n: params[n] for n in meta["param_names"]}
    return Checkpoint(
        config=meta["config"], step=meta["step"], params=params, adam=meta["adam"],
        adam_m=pick("adam_m"), adam_v=pick("adam_v"), sparsity=meta["sparsity"], rng=meta["rng"],
        fingerprint=meta["fingerprint"], svm=pick("svm") if meta["has_svm"] else None,
        svm_meta=meta["svm_meta"], extra=meta["extra"],
    )


def save_checkpoint(ck: Checkpoint, path) -> Path:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(to_bytes(ck))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
