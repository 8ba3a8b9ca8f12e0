# test_metrics.py
import itertools
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.fft import idct

from app.errors import ContractError
from app.metrics import (MCD_CONSTANT, cluster_purity, conversion_score, decode_symbols, dtw, error_rate, levenshtein,
                         mcd, mcd_with_path, quantizer_stats, summarize, symbol_templates)
from app.postprocess import IndexSeq


def monotone_paths(n, m):
    """Every path from (0, 0) to (n-1, m-1) using steps (1,0), (0,1), (1,1)."""
    def walk(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                for rest in walk(i + di, j + dj):
                    yield [(i, j)] + rest
    return list(walk(0, 0))


def reference_distance(hyp, ref):
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (hyp[i - 1] != ref[j - 1]))
    return d(len(hyp), len(ref))


# --- MCD ---

def test_identical_sequences_have_zero_distortion(rng):
    a = rng.normal(size=(12, 16))
    assert mcd(a, a) == 0.0
    assert mcd(a, a, align=False) == 0.0


def test_constant_offset_only_touches_the_excluded_coefficient(rng):
    a = rng.normal(size=(6, 16))
    assert mcd(a, a + 2.5, align=False) == pytest.approx(0.0, abs=1e-9)


def test_single_coefficient_offset_has_closed_form(rng):
    a = rng.normal(size=(5, 16))
    offset = np.zeros(16)
    offset[3] = 0.4
    b = a + idct(offset, type=2, norm="ortho")
    assert mcd(a, b, align=False) == pytest.approx(MCD_CONSTANT * 0.4, rel=1e-9)
    assert MCD_CONSTANT == pytest.approx(6.1418, abs=1e-4)


def test_repeated_frames_align_at_zero_cost(rng):
    a = rng.normal(size=(5, 16))
    stretched = np.repeat(a, [1, 3, 1, 2, 1], axis=0)
    result = mcd_with_path(a, stretched)
    assert result.mcd == pytest.approx(0.0, abs=1e-9)
    assert result.path_length == len(stretched)


@pytest.mark.parametrize("n, m", [(7, 7), (5, 9), (12, 4)])
def test_mcd_is_symmetric(rng, n, m):
    a, b = rng.normal(size=(n, 16)), rng.normal(size=(m, 16))
    assert mcd(a, b) == pytest.approx(mcd(b, a), rel=1e-12)


def test_alignment_never_costs_more_than_the_diagonal(rng):
    for _ in range(20):
        a, b = rng.normal(size=(8, 16)), rng.normal(size=(8, 16))
        assert mcd(a, b) <= mcd(a, b, align=False) + 1e-12


def test_mcd_preconditions(rng):
    with pytest.raises(ContractError):
        mcd(rng.normal(size=(3, 16)), rng.normal(size=(3, 8)))
    with pytest.raises(ContractError):
        mcd(rng.normal(size=(3, 16)), rng.normal(size=(4, 16)), align=False)
    with pytest.raises(ContractError):
        mcd(np.zeros((0, 16)), rng.normal(size=(4, 16)))


def test_conversion_score_compares_against_copy_baseline(rng):
    oracle = rng.normal(size=(8, 16))
    source = rng.normal(size=(9, 16))
    score = conversion_score(oracle.copy(), oracle, source)
    assert score.mcd_conv == 0.0
    assert score.mcd_copy > 0.0


# --- DTW ---

def test_dtw_matches_exhaustive_search():
    picker = np.random.default_rng(0)
    for n, m in itertools.product(range(1, 6), range(1, 7)):
        cost = picker.uniform(0.0, 1.0, size=(n, m))
        best = min(sum(cost[i, j] for i, j in path) for path in monotone_paths(n, m))
        alignment = dtw(cost)
        assert alignment.cost == pytest.approx(best, rel=1e-12)
        assert alignment.path[0] == (0, 0) and alignment.path[-1] == (n - 1, m - 1)
        assert sum(cost[i, j] for i, j in alignment.path) == pytest.approx(best, rel=1e-12)
        for (i0, j0), (i1, j1) in zip(alignment.path, alignment.path[1:]):
            assert (i1 - i0, j1 - j0) in {(1, 0), (0, 1), (1, 1)}


def test_dtw_prefers_the_diagonal_on_ties():
    assert dtw(np.zeros((3, 3))).path == [(0, 0), (1, 1), (2, 2)]
    assert dtw(np.zeros((2, 3))).path == [(0, 0), (0, 1), (1, 2)]
    with pytest.raises(ContractError):
        dtw(np.zeros((0, 3)))


# --- error rates ---

def test_levenshtein_matches_reference_exhaustively_on_short_strings():
    words = ["".join(w) for n in range(5) for w in itertools.product("abc", repeat=n)]
    for hyp in words:
        for ref in words:
            assert levenshtein(hyp, ref) == reference_distance(hyp, ref)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abc", max_size=8), st.text(alphabet="abc", min_size=1, max_size=8))
def test_error_rate_matches_reference(hyp, ref):
    assert error_rate(hyp, ref) == reference_distance(hyp, ref) / len(ref)


def test_error_rate_examples():
    assert error_rate("abc", "abc") == 0.0
    assert error_rate("", "abcd") == 1.0
    assert error_rate("abcdef", "ab") == 2.0
    with pytest.raises(ContractError):
        error_rate("a", "")


# --- symbol decoding and clustering ---

def test_decode_symbols_uses_nearest_seen_template():
    feats = [np.array([[0.0, 0.0], [0.2, 0.0], [5.0, 5.0]])]
    labels = [np.array([0, 0, 2])]
    templates = symbol_templates(feats, labels, n_symbols=3)
    np.testing.assert_allclose(templates[0], [0.1, 0.0])
    assert np.isnan(templates[1]).all()
    frames = np.array([[0.1, 0.0], [0.0, 0.1], [4.0, 4.0], [0.0, 0.0], [2.4, 2.4]])
    assert decode_symbols(frames, templates) == "aca"
    assert decode_symbols(np.zeros((0, 2)), templates) == ""
    with pytest.raises(ContractError):
        symbol_templates(feats, [np.array([0, 1])])


def test_cluster_purity():
    assert cluster_purity([0, 0, 1, 1], ["a", "a", "a", "b"]) == 0.75
    assert cluster_purity([5, 5, 5], ["x", "y", "z"]) == pytest.approx(1 / 3)
    assert cluster_purity([1, 2, 3], ["x", "y", "z"]) == 1.0
    with pytest.raises(ContractError):
        cluster_purity([], [])


def test_quantizer_stats_uses_frame_level_counts():
    seq = IndexSeq(np.array([[0, 1], [0, 1], [2, 1]]), 2, 4)
    stats = quantizer_stats([seq])
    assert stats.unique_combinations == 2
    assert stats.perplexities[1] == pytest.approx(1.0)


def test_summarize_ignores_missing_values():
    assert summarize([1.0, None, float("nan"), 3.0]) == 2.0
    assert summarize([None]) is None
