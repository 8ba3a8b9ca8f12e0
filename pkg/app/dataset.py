# app/dataset.py
"""
Loading helpers shared by the command handlers: corpus metadata, manifest
splits, index dumps and (index sequence, acoustic target) training pairs.
"""
import json
import logging
import os
from typing import Dict, List, Tuple

from app.config import RunPaths
from app.errors import DataError
from app.featio import ManifestEntry, entries_for, read_frames, read_manifest
from app.postprocess import IndexSeq, apply_flags, read_dump
from app.seq2seq import AcousticSeq

logger = logging.getLogger(__name__)

CORPUS_META = "corpus.json"
INDEX_STATS = "stats.json"


def write_json(path: str, payload: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path: str) -> dict:
    if not os.path.isfile(path):
        raise DataError(f"file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e


def corpus_meta(paths: RunPaths) -> dict:
    return read_json(os.path.join(paths.corpus_dir, CORPUS_META))


def split_entries(paths: RunPaths, split: str) -> List[ManifestEntry]:
    entries = entries_for(read_manifest(paths.manifest), split)
    if not entries:
        raise DataError(f"split '{split}' is empty or missing from {paths.manifest}")
    return entries


def index_stats(paths: RunPaths, combined: bool, split: str) -> dict:
    return read_json(os.path.join(paths.index_dir(combined, split), INDEX_STATS))


def load_indices(paths: RunPaths, entries: List[ManifestEntry], combined: bool) -> Dict[str, IndexSeq]:
    """Index dumps for `entries`, keyed by utt_id, in the requested postprocessed form."""
    out: Dict[str, IndexSeq] = {}
    for entry in entries:
        path = os.path.join(paths.index_dir(combined, entry.split), f"{entry.utt_id}.idx")
        seqs = read_dump(path)
        if len(seqs) != 1:
            raise DataError(f"{path}: expected one utterance, found {len(seqs)}")
        out[entry.utt_id] = apply_flags(seqs[0], combined)
    return out


def load_pairs(paths: RunPaths, entries: List[ManifestEntry], combined: bool) -> List[Tuple[IndexSeq, AcousticSeq]]:
    indices = load_indices(paths, entries, combined)
    pairs = []
    for entry in entries:
        frames = read_frames(paths.resolve(entry.feat_path))
        pairs.append((indices[entry.utt_id], AcousticSeq.target(frames)))
    return pairs
