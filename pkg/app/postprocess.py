# app/postprocess.py
"""
Index-stream postprocessing: run-length combining of repeated index tuples and
group separation for factorized embedding lookup, plus the text dump format
the quantizer writes and external quantizers may supply.

Dump format, one block per utterance:
    #utt <id> G=<G> V=<V> [combined=1]
    i_0 i_1 ... i_{G-1}[:<run_length>]
"""
import logging
import math
import os
from dataclasses import dataclass, field, replace
from itertools import groupby
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import ContractError, DataError
from app.schemas import VocabStats

logger = logging.getLogger(__name__)


@dataclass
class IndexSeq:
    frames: np.ndarray  # (n, G) integer codeword indices
    groups: int
    codewords: int
    combined: bool = False
    run_lengths: Optional[np.ndarray] = None
    utt_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1, self.groups)
        if self.run_lengths is not None:
            self.run_lengths = np.asarray(self.run_lengths, dtype=np.int64)

    def __len__(self):
        return self.frames.shape[0]

    def tuples(self) -> List[Tuple[int, ...]]:
        return [tuple(int(i) for i in row) for row in self.frames]

    @property
    def frame_count(self) -> int:
        """Length of the underlying frame-level sequence."""
        if self.run_lengths is not None:
            return int(self.run_lengths.sum())
        return len(self)

    def validate(self) -> "IndexSeq":
        if self.frames.size and (self.frames.min() < 0 or self.frames.max() >= self.codewords):
            raise ContractError(f"{self.utt_id or 'sequence'}: index outside [0, {self.codewords})")
        if self.run_lengths is not None:
            if self.run_lengths.shape != (len(self),):
                raise ContractError("run_lengths needs exactly one entry per tuple")
            if self.run_lengths.size and self.run_lengths.min() < 1:
                raise ContractError("run lengths must be >= 1")
        if self.combined and len(self) > 1:
            if np.any(np.all(self.frames[1:] == self.frames[:-1], axis=1)):
                raise ContractError("combined sequence has adjacent equal tuples")
        return self


def combine(seq: IndexSeq) -> IndexSeq:
    """Merge adjacent tuples that are equal in every group; run lengths record what was merged."""
    if seq.combined:
        raise ContractError(f"{seq.utt_id or 'sequence'} is already combined")
    runs = [(key, sum(1 for _ in group)) for key, group in groupby(seq.tuples())]
    frames = np.array([key for key, _ in runs], dtype=np.int64).reshape(-1, seq.groups)
    lengths = np.array([n for _, n in runs], dtype=np.int64)
    return replace(seq, frames=frames, combined=True, run_lengths=lengths)


def expand(seq: IndexSeq) -> IndexSeq:
    """Exact inverse of combine()."""
    if seq.run_lengths is None:
        raise ContractError(f"{seq.utt_id or 'sequence'} has no run lengths to expand")
    frames = np.repeat(seq.frames, seq.run_lengths, axis=0)
    return replace(seq, frames=frames, combined=False, run_lengths=None)


def apply_flags(seq: IndexSeq, combine_runs: bool) -> IndexSeq:
    """Bring a dump into the form a model expects: combined when `combine_runs`, frame-level otherwise."""
    if combine_runs:
        return seq if seq.combined else combine(seq)
    return expand(seq) if seq.combined else seq


# --- group separation and joint ids ---

def _check_tuple(index_tuple: Sequence[int], codewords: int) -> None:
    for i in index_tuple:
        if not 0 <= int(i) < codewords:
            raise ContractError(f"index {i} outside [0, {codewords})")


def separate(index_tuple: Sequence[int], codewords: int) -> List[int]:
    """Group g's index i_g becomes row g*V + i_g of a flat G*V-row table."""
    _check_tuple(index_tuple, codewords)
    return [g * codewords + int(i) for g, i in enumerate(index_tuple)]


def unseparate(ids: Sequence[int], codewords: int) -> Tuple[int, ...]:
    out = []
    for g, row in enumerate(ids):
        if not g * codewords <= int(row) < (g + 1) * codewords:
            raise ContractError(f"table id {row} is not in group {g}'s block")
        out.append(int(row) - g * codewords)
    return tuple(out)


def separate_frames(frames: np.ndarray, codewords: int) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.int64)
    if frames.size and (frames.min() < 0 or frames.max() >= codewords):
        raise ContractError(f"index outside [0, {codewords})")
    offsets = np.arange(frames.shape[1], dtype=np.int64) * codewords
    return frames + offsets


def joint_id(index_tuple: Sequence[int], codewords: int) -> int:
    _check_tuple(index_tuple, codewords)
    value = 0
    for i in index_tuple:
        value = value * codewords + int(i)
    return value


def from_joint_id(value: int, codewords: int, groups: int) -> Tuple[int, ...]:
    if not 0 <= value < codewords ** groups:
        raise ContractError(f"joint id {value} outside [0, {codewords ** groups})")
    digits = []
    for _ in range(groups):
        value, digit = divmod(value, codewords)
        digits.append(digit)
    return tuple(reversed(digits))


def joint_ids(frames: np.ndarray, codewords: int) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.int64)
    if frames.size and (frames.min() < 0 or frames.max() >= codewords):
        raise ContractError(f"index outside [0, {codewords})")
    weights = codewords ** np.arange(frames.shape[1] - 1, -1, -1, dtype=np.int64)
    return frames @ weights


def table_rows(codewords: int, groups: int, separate_tables: bool) -> int:
    return codewords * groups if separate_tables else codewords ** groups


# --- statistics ---

def perplexity(histogram: np.ndarray) -> float:
    total = histogram.sum()
    if total == 0:
        return 0.0
    p = histogram[histogram > 0] / total
    return float(math.exp(-np.sum(p * np.log(p))))


def vocab_stats(corpus: Iterable[IndexSeq]) -> VocabStats:
    corpus = list(corpus)
    if not corpus:
        raise ContractError("vocab_stats needs at least one sequence")
    groups, codewords = corpus[0].groups, corpus[0].codewords
    if any(s.groups != groups or s.codewords != codewords for s in corpus):
        raise ContractError("corpus mixes different G/V settings")
    histograms = np.zeros((groups, codewords), dtype=np.int64)
    combos = set()
    ratios = []
    unknown = 0
    frames_total = 0
    for seq in corpus:
        if seq.combined and seq.run_lengths is None:
            # durations unknown: count the merged tuples, no reduction ratio
            flat, merged = seq, None
            unknown += 1
        else:
            flat = expand(seq) if seq.combined else seq
            merged = seq if seq.combined else combine(seq)
        n = len(flat)
        frames_total += n
        for g in range(groups):
            histograms[g] += np.bincount(flat.frames[:, g], minlength=codewords)
        combos.update(joint_ids(flat.frames, codewords).tolist())
        if n and merged is not None:
            ratios.append(1.0 - len(merged) / n)
    return VocabStats(
        groups=groups,
        codewords=codewords,
        utterances=len(corpus),
        frames=frames_total,
        unique_combinations=len(combos),
        histograms=histograms.tolist(),
        perplexities=[perplexity(h) for h in histograms],
        reduction_ratio=float(np.mean(ratios)) if ratios else (None if unknown else 0.0),
        utterances_without_runs=unknown,
    )


# --- dump format ---

def format_dump(seq: IndexSeq) -> str:
    header = f"#utt {seq.utt_id} G={seq.groups} V={seq.codewords}"
    if seq.combined:
        header += " combined=1"
    lines = [header]
    for n, row in enumerate(seq.frames):
        line = " ".join(str(int(i)) for i in row)
        if seq.run_lengths is not None:
            line += f":{int(seq.run_lengths[n])}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def parse_dump(text: str, source: str = "<text>") -> List[IndexSeq]:
    seqs: List[IndexSeq] = []
    current = None

    def flush():
        if current is None:
            return
        rows, lengths = current["rows"], current["lengths"]
        if lengths and not current["combined"]:
            raise DataError(f"{source}: utterance {current['id']} has run lengths but no combined=1 header")
        if lengths and len(lengths) != len(rows):
            raise DataError(f"{source}: utterance {current['id']} mixes lines with and without run lengths")
        seq = IndexSeq(np.array(rows, dtype=np.int64).reshape(-1, current["G"]), current["G"], current["V"],
                       combined=current["combined"], run_lengths=lengths or None, utt_id=current["id"])
        try:
            seqs.append(seq.validate())
        except ContractError as e:
            raise DataError(f"{source}: {e}") from e

    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#utt"):
            flush()
            parts = line.split()
            try:
                fields = dict(p.split("=", 1) for p in parts[2:])
                current = {"id": parts[1], "G": int(fields["G"]), "V": int(fields["V"]),
                           "combined": fields.get("combined", "0") == "1", "rows": [], "lengths": []}
            except (IndexError, KeyError, ValueError):
                raise DataError(f"{source}:{line_no}: malformed header '{line}'") from None
            continue
        if current is None:
            raise DataError(f"{source}:{line_no}: index line before any '#utt' header")
        body, _, run = line.partition(":")
        try:
            row = [int(tok) for tok in body.split()]
            if run:
                current["lengths"].append(int(run))
        except ValueError:
            raise DataError(f"{source}:{line_no}: non-integer value in '{line}'") from None
        if len(row) != current["G"]:
            raise DataError(f"{source}:{line_no}: expected {current['G']} indices, found {len(row)}")
        current["rows"].append(row)
    flush()
    return seqs


def write_dump(path: str, seq: IndexSeq) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_dump(seq))


def read_dump(path: str) -> List[IndexSeq]:
    if not os.path.isfile(path):
        raise DataError(f"index dump not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_dump(fh.read(), source=path)


def read_dump_dir(directory: str, utt_ids: Optional[Sequence[str]] = None) -> List[IndexSeq]:
    """Load one dump per utterance; `utt_ids` fixes order and which files must exist."""
    if utt_ids is None:
        if not os.path.isdir(directory):
            raise DataError(f"index directory not found: {directory} (run extract first)")
        utt_ids = sorted(name[:-4] for name in os.listdir(directory) if name.endswith(".idx"))
    seqs = []
    for utt_id in utt_ids:
        seqs.extend(read_dump(os.path.join(directory, f"{utt_id}.idx")))
    return seqs
