# app/metrics.py
"""
Objective evaluation: cepstral distortion with DTW alignment, edit-distance
error rates, quantizer health statistics and the oracle-based conversion score.

MCD between cepstral frames c, c' (0th coefficient excluded):
    (10 / ln 10) * sqrt(2 * sum_{d>=1} (c_d - c'_d)^2)
"""
import logging
import math
from dataclasses import dataclass
from itertools import groupby
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.fft import dct
from scipy.spatial.distance import cdist

from app.errors import ContractError
from app.postprocess import IndexSeq, vocab_stats
from app.schemas import ConversionScore, QuantizerStats
from app.synth import ALPHABET

logger = logging.getLogger(__name__)

MCD_CONSTANT = 10.0 / math.log(10.0) * math.sqrt(2.0)


def cepstra(features: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II over the feature axis."""
    return dct(np.asarray(features, dtype=np.float64), type=2, norm="ortho", axis=-1)


def frame_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise per-frame MCD between two feature sequences, (len(a), len(b))."""
    ca, cb = cepstra(a), cepstra(b)
    return MCD_CONSTANT * cdist(ca[:, 1:], cb[:, 1:], metric="euclidean")


@dataclass
class Alignment:
    cost: float                  # summed local cost along the path
    path: List[Tuple[int, int]]

    @property
    def mean_cost(self) -> float:
        return self.cost / len(self.path)


def dtw(cost: np.ndarray) -> Alignment:
    """
    Minimum-cost monotone path from (0, 0) to (n-1, m-1) with steps (1,0), (0,1), (1,1).
    Every visited cell adds its cost; on ties the diagonal step is preferred.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        raise ContractError("dtw needs two nonempty sequences")
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row_cost = cost[i - 1]
        prev, cur = acc[i - 1], acc[i]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = row_cost[j - 1] + best

    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        candidates = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(candidates, key=lambda c: c[0])
        path.append((i - 1, j - 1))
    path.reverse()
    return Alignment(float(acc[n, m]), path)


@dataclass
class MCDResult:
    mcd: float
    path_length: int


def mcd_with_path(a: np.ndarray, b: np.ndarray, align: bool = True) -> MCDResult:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError(f"feature dims differ: {list(a.shape)} vs {list(b.shape)}")
    if len(a) == 0 or len(b) == 0:
        raise ContractError("mcd needs nonempty sequences")
    if not align:
        if len(a) != len(b):
            raise ContractError(f"unaligned mcd needs equal lengths, got {len(a)} and {len(b)}")
        diff = cepstra(a)[:, 1:] - cepstra(b)[:, 1:]
        per_frame = MCD_CONSTANT * np.sqrt(np.sum(diff ** 2, axis=1))
        return MCDResult(float(per_frame.mean()), len(a))
    alignment = dtw(frame_distances(a, b))
    return MCDResult(alignment.mean_cost, len(alignment.path))


def mcd(a: np.ndarray, b: np.ndarray, align: bool = True) -> float:
    return mcd_with_path(a, b, align).mcd


def levenshtein(hyp: Sequence, ref: Sequence) -> int:
    """Unit-cost edit distance, one DP row at a time."""
    previous = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        current = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            current[j] = min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (h != r))
        previous = current
    return previous[-1]


def error_rate(hyp: Sequence, ref: Sequence) -> float:
    if len(ref) == 0:
        raise ContractError("error rate needs a nonempty reference")
    return levenshtein(hyp, ref) / len(ref)


def quantizer_stats(corpus: Iterable[IndexSeq]) -> QuantizerStats:
    stats = vocab_stats(corpus)
    return QuantizerStats(perplexities=stats.perplexities, unique_combinations=stats.unique_combinations)


def conversion_score(converted: np.ndarray, oracle_target: np.ndarray, source_feats: np.ndarray) -> ConversionScore:
    return ConversionScore(
        mcd_conv=mcd(converted, oracle_target, align=True),
        mcd_copy=mcd(source_feats, oracle_target, align=True),
    )


# --- symbol decoding for the symbol error rate ---

def symbol_templates(features: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                     n_symbols: int = len(ALPHABET)) -> np.ndarray:
    """Per-symbol mean feature frame; rows of symbols never seen are NaN."""
    feats = np.concatenate([np.asarray(f, dtype=np.float64) for f in features])
    labs = np.concatenate([np.asarray(l) for l in labels])
    if len(feats) != len(labs):
        raise ContractError(f"{len(feats)} feature frames but {len(labs)} labels")
    templates = np.full((n_symbols, feats.shape[1]), np.nan)
    for s in range(n_symbols):
        mask = labs == s
        if mask.any():
            templates[s] = feats[mask].mean(axis=0)
    return templates


def decode_symbols(features: np.ndarray, templates: np.ndarray) -> str:
    """Nearest template per frame, then one symbol per run."""
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        return ""
    distances = cdist(features, np.nan_to_num(templates, nan=np.inf), metric="euclidean")
    distances[:, np.isnan(templates).any(axis=1)] = np.inf
    nearest = np.argmin(distances, axis=1)
    return "".join(ALPHABET[k] for k, _ in groupby(nearest.tolist()))


def cluster_purity(codes: Sequence[int], labels: Sequence) -> float:
    """Fraction of frames whose label is the majority label of their code."""
    codes, labels = np.asarray(codes), np.asarray(labels)
    if len(codes) != len(labels) or len(codes) == 0:
        raise ContractError("cluster_purity needs equal-length, nonempty code and label sequences")
    _, label_ids = np.unique(labels, return_inverse=True)
    _, code_ids = np.unique(codes, return_inverse=True)
    table = np.zeros((code_ids.max() + 1, label_ids.max() + 1), dtype=np.int64)
    np.add.at(table, (code_ids, label_ids), 1)
    return float(table.max(axis=1).sum() / len(codes))


def summarize(values: Iterable[Optional[float]]) -> Optional[float]:
    finite = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(finite)) if finite else None
