# app/featio.py
"""
VQVCFEAT frame files and the corpus manifest.

Feature file: magic b"VQVCFEAT", version u16, frame-dim u32, frame-count u32,
then little-endian f32 frames row-major. Raw signals use the same format with
frame-dim 1.
"""
import csv
import logging
import os
import struct
from dataclasses import astuple, dataclass
from typing import List

import numpy as np

from app.errors import DataError

logger = logging.getLogger(__name__)

MAGIC = b"VQVCFEAT"
VERSION = 1
_HEADER = struct.Struct("<HII")

MANIFEST_FIELDS = ("utt_id", "speaker", "split", "symbols", "signal_path", "feat_path")


def encode_frames(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim == 1:
        frames = frames[:, None]
    if frames.ndim != 2:
        raise DataError(f"frames must be 2-D (count, dim), got shape {list(frames.shape)}")
    count, dim = frames.shape
    return MAGIC + _HEADER.pack(VERSION, dim, count) + np.ascontiguousarray(frames).tobytes()


def decode_frames(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    if payload[:len(MAGIC)] != MAGIC:
        raise DataError(f"{source}: not a VQVCFEAT file")
    if len(payload) < len(MAGIC) + _HEADER.size:
        raise DataError(f"{source}: truncated header")
    version, dim, count = _HEADER.unpack_from(payload, len(MAGIC))
    if version != VERSION:
        raise DataError(f"{source}: unsupported VQVCFEAT version {version}")
    body = payload[len(MAGIC) + _HEADER.size:]
    if len(body) != 4 * dim * count:
        raise DataError(f"{source}: expected {dim * count} values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float32)


def write_frames(path: str, frames: np.ndarray) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(encode_frames(frames))


def read_frames(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise DataError(f"file not found: {path}")
    with open(path, "rb") as fh:
        return decode_frames(fh.read(), source=path)


def read_signal(path: str) -> np.ndarray:
    frames = read_frames(path)
    if frames.shape[1] != 1:
        raise DataError(f"{path}: a signal file must have frame-dim 1, found {frames.shape[1]}")
    return frames[:, 0]


@dataclass
class ManifestEntry:
    utt_id: str
    speaker: str
    split: str
    symbols: str
    signal_path: str
    feat_path: str


def write_manifest(path: str, entries: List[ManifestEntry]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for entry in entries:
            writer.writerow(astuple(entry))


def read_manifest(path: str) -> List[ManifestEntry]:
    if not os.path.isfile(path):
        raise DataError(f"manifest not found: {path} (run gen-corpus first)")
    entries = []
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row:
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise DataError(f"{path}:{line_no}: expected {len(MANIFEST_FIELDS)} fields, got {len(row)}")
            entries.append(ManifestEntry(*row))
    return entries


def entries_for(entries: List[ManifestEntry], split: str) -> List[ManifestEntry]:
    return [e for e in entries if e.split == split]
