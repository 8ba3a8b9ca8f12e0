# app/checkpoint.py
"""
VQVCCKPT checkpoint codec.

Layout: magic b"VQVCCKPT", version u16, then records of
{name-length u32, utf-8 name, rank u8, dims u32[rank], little-endian f32 payload}.
Optimizer state lives under the reserved "opt/" prefix ("opt/m/<param>",
"opt/v/<param>", "opt/step" as two base-2^24 digits); run metadata is a JSON document stored as a
rank-1 record "meta/json" of byte values.
"""
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import numpy as np

from app.errors import CheckpointError
from app.nn import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"VQVCCKPT"
VERSION = 1
OPT_PREFIX = "opt/"
META_NAME = "meta/json"
# the step is split into two base-2^24 digits, each exact in f32
STEP_RADIX = 1 << 24


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)

    def apply(self, store: ParamStore, with_optimizer: bool = True) -> ParamStore:
        store.load_arrays(self.params, self.moments if with_optimizer else None,
                          self.step if with_optimizer else 0)
        return store


def _record(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype="<f4")
    header = struct.pack("<I", len(encoded)) + encoded + struct.pack("<B", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape) if array.ndim else b""
    return header + array.tobytes()


def encode_checkpoint(store: ParamStore, meta: Dict[str, Any]) -> bytes:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(_record(META_NAME, np.frombuffer(meta_bytes, dtype=np.uint8).astype(np.float32)))
    for name in store.names():
        chunks.append(_record(name, store.params[name].data))
    for name in store.names():
        chunks.append(_record(f"{OPT_PREFIX}m/{name}", store.m[name]))
        chunks.append(_record(f"{OPT_PREFIX}v/{name}", store.v[name]))
    chunks.append(_record(f"{OPT_PREFIX}step", np.array(divmod(store.step, STEP_RADIX), dtype=np.float32)))
    return b"".join(chunks)


def save_checkpoint(path: str, store: ParamStore, meta: Dict[str, Any]) -> str:
    """Write atomically (temp file then rename); returns the sha256 of the bytes written."""
    payload = encode_checkpoint(store, meta)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(payload)
    os.replace(tmp_path, path)
    digest = hashlib.sha256(payload).hexdigest()
    logger.info(f"💾 Checkpoint saved: {path} ({len(store)} tensors, step {store.step})")
    return digest


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    if payload[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a VQVCCKPT file")
    offset = len(MAGIC)
    try:
        (version,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        ckpt = Checkpoint()
        m_parts: Dict[str, np.ndarray] = {}
        v_parts: Dict[str, np.ndarray] = {}
        while offset < len(payload):
            (name_len,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", payload, offset) if rank else ()
            offset += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = offset + 4 * count
            if end > len(payload):
                raise CheckpointError(f"{source}: record '{name}' is truncated")
            array = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)
            offset = end
            if name == META_NAME:
                ckpt.meta = json.loads(array.astype(np.uint8).tobytes().decode("utf-8"))
            elif name == f"{OPT_PREFIX}step":
                digits = [int(x) for x in array.reshape(-1)]
                ckpt.step = digits[0] * STEP_RADIX + digits[1] if len(digits) == 2 else digits[0]
            elif name.startswith(f"{OPT_PREFIX}m/"):
                m_parts[name[len(OPT_PREFIX) + 2:]] = array
            elif name.startswith(f"{OPT_PREFIX}v/"):
                v_parts[name[len(OPT_PREFIX) + 2:]] = array
            else:
                ckpt.params[name] = array
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as e:
        raise CheckpointError(f"{source}: corrupt checkpoint ({e})") from e
    ckpt.moments = {n: (m_parts[n], v_parts[n]) for n in m_parts if n in v_parts}
    return ckpt


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        payload = fh.read()
    ckpt = decode_checkpoint(payload, source=path)
    logger.info(f"📂 Checkpoint loaded: {path} ({len(ckpt.params)} tensors, step {ckpt.step})")
    return ckpt


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
