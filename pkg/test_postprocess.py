# test_postprocess.py
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.errors import ContractError, DataError
from app.postprocess import (IndexSeq, apply_flags, combine, expand, format_dump, from_joint_id, joint_id, joint_ids,
                             parse_dump, perplexity, read_dump_dir, separate, separate_frames, table_rows,
                             unseparate, vocab_stats, write_dump)


def seq_of(rows, groups=2, codewords=8, utt_id="u"):
    return IndexSeq(np.array(rows, dtype=np.int64).reshape(-1, groups), groups, codewords, utt_id=utt_id)


# runs of repeated tuples, so combining has something to do
index_streams = st.lists(
    st.tuples(st.integers(0, 7), st.integers(0, 7), st.integers(1, 4)), min_size=1, max_size=30,
).map(lambda runs: [pair[:2] for pair in runs for _ in range(pair[2])])


# --- combine / expand ---

def test_constant_sequence_collapses_to_one_tuple():
    out = combine(seq_of([(3, 7)] * 3, codewords=320))
    assert out.tuples() == [(3, 7)]
    assert out.run_lengths.tolist() == [3]
    assert out.combined


def test_sequence_without_repeats_is_unchanged():
    rows = [(1, 2), (1, 3), (2, 3), (1, 3)]
    out = combine(seq_of(rows))
    assert out.tuples() == rows
    assert out.run_lengths.tolist() == [1, 1, 1, 1]


def test_large_codebook_example():
    # equal tuples merge only when every group agrees
    rows = [(17, 250), (17, 250), (17, 3), (17, 3), (17, 3), (99, 3), (17, 250)]
    out = combine(seq_of(rows, codewords=320))
    assert out.tuples() == [(17, 250), (17, 3), (99, 3), (17, 250)]
    assert out.run_lengths.tolist() == [2, 3, 1, 1]
    assert expand(out).tuples() == rows


@settings(max_examples=200, deadline=None)
@given(index_streams)
def test_expand_inverts_combine(rows):
    seq = seq_of(rows)
    merged = combine(seq)
    assert merged.validate() is merged
    assert len(merged) <= len(seq)
    assert merged.frame_count == len(seq)
    np.testing.assert_array_equal(expand(merged).frames, seq.frames)
    again = combine(expand(merged))
    np.testing.assert_array_equal(again.frames, merged.frames)
    np.testing.assert_array_equal(again.run_lengths, merged.run_lengths)
    has_repeat = any(a == b for a, b in zip(rows, rows[1:]))
    assert (len(merged) < len(seq)) == has_repeat


def test_combine_and_expand_preconditions():
    merged = combine(seq_of([(1, 1), (1, 1)]))
    with pytest.raises(ContractError):
        combine(merged)
    with pytest.raises(ContractError):
        expand(seq_of([(1, 1)]))


def test_expand_with_unit_runs_is_identity():
    seq = IndexSeq(np.array([[1, 2], [3, 4]]), 2, 8, combined=True, run_lengths=np.array([1, 1]))
    assert expand(seq).tuples() == [(1, 2), (3, 4)]


def test_apply_flags_converts_either_way():
    frames = seq_of([(1, 1), (1, 1), (2, 2)])
    assert apply_flags(frames, combine_runs=False) is frames
    merged = apply_flags(frames, combine_runs=True)
    assert merged.combined and len(merged) == 2
    assert apply_flags(merged, combine_runs=True) is merged
    assert apply_flags(merged, combine_runs=False).tuples() == frames.tuples()


def test_validate_catches_broken_sequences():
    with pytest.raises(ContractError):
        seq_of([(1, 8)]).validate()
    with pytest.raises(ContractError):
        IndexSeq(np.array([[1, 1], [1, 1]]), 2, 8, combined=True, run_lengths=np.array([1, 1])).validate()
    with pytest.raises(ContractError):
        IndexSeq(np.array([[1, 1]]), 2, 8, combined=True, run_lengths=np.array([0])).validate()


# --- separate / joint ids ---

def test_separate_small_examples():
    assert separate((0, 0), 320) == [0, 320]
    assert separate((5, 2, 7), 8) == [5, 10, 23]
    with pytest.raises(ContractError):
        separate((0, 8), 8)


def test_separate_is_injective_with_disjoint_group_blocks():
    for groups in (1, 2, 3):
        seen = {}
        for tup in itertools.product(range(8), repeat=groups):
            ids = separate(tup, 8)
            for g, row in enumerate(ids):
                assert g * 8 <= row < (g + 1) * 8
            assert unseparate(ids, 8) == tup
            seen[tuple(ids)] = tup
        assert len(seen) == 8 ** groups


def test_separate_frames_matches_per_tuple_ids():
    frames = np.array([[0, 7], [3, 1]])
    assert separate_frames(frames, 8).tolist() == [separate(row, 8) for row in frames.tolist()]


def test_joint_id_is_a_bijection():
    for groups in (1, 2, 3):
        values = [joint_id(tup, 8) for tup in itertools.product(range(8), repeat=groups)]
        assert sorted(values) == list(range(8 ** groups))
        for value in values:
            assert joint_id(from_joint_id(value, 8, groups), 8) == value


def test_joint_id_edges():
    assert joint_id((0, 0), 320) == 0
    assert joint_id((319, 319), 320) == 102_399
    assert from_joint_id(102_399, 320, 2) == (319, 319)
    with pytest.raises(ContractError):
        from_joint_id(102_400, 320, 2)
    assert joint_ids(np.array([[1, 2], [7, 7]]), 8).tolist() == [10, 63]


def test_table_sizes():
    assert table_rows(320, 2, separate_tables=True) == 640
    assert table_rows(320, 2, separate_tables=False) == 102_400
    assert table_rows(8, 2, separate_tables=False) == 64


# --- statistics ---

def test_perplexity():
    assert perplexity(np.array([5, 0, 0, 0])) == pytest.approx(1.0)
    assert perplexity(np.full(8, 3)) == pytest.approx(8.0)
    assert perplexity(np.zeros(4)) == 0.0


def test_vocab_stats_on_constant_and_repeat_free_corpora():
    constant = vocab_stats([seq_of([(2, 5)] * 10)])
    assert constant.reduction_ratio == pytest.approx(0.9)
    assert constant.unique_combinations == 1
    assert constant.frames == 10
    assert constant.perplexities == [pytest.approx(1.0), pytest.approx(1.0)]

    distinct = vocab_stats([seq_of([(0, 1), (1, 0)]), seq_of([(2, 2), (3, 3), (2, 2)])])
    assert distinct.reduction_ratio == 0.0
    assert distinct.unique_combinations == 4
    assert distinct.histograms[0] == [1, 1, 2, 1, 0, 0, 0, 0]


def test_vocab_stats_accepts_combined_input_and_rejects_mixed_vocabularies():
    frames = seq_of([(1, 1), (1, 1), (1, 2), (1, 2)])
    assert vocab_stats([combine(frames)]) == vocab_stats([frames])
    with pytest.raises(ContractError):
        vocab_stats([frames, seq_of([(1, 1)], codewords=4)])
    with pytest.raises(ContractError):
        vocab_stats([])


def test_vocab_stats_on_combined_dumps_without_run_lengths():
    external = parse_dump("#utt x G=2 V=4 combined=1\n0 1\n2 3\n0 1\n")
    stats = vocab_stats(external)
    assert stats.frames == 3
    assert stats.unique_combinations == 2
    assert stats.histograms == [[2, 0, 1, 0], [0, 2, 0, 1]]
    assert stats.reduction_ratio is None
    assert stats.utterances_without_runs == 1

    # utterances with durations still give a ratio
    mixed = vocab_stats(external + [seq_of([(1, 1)] * 4, codewords=4)])
    assert mixed.reduction_ratio == pytest.approx(0.75)
    assert mixed.frames == 7


@settings(max_examples=100, deadline=None)
@given(st.lists(index_streams, min_size=1, max_size=5))
def test_vocab_stats_bounds(corpus):
    stats = vocab_stats([seq_of(rows) for rows in corpus])
    assert stats.unique_combinations <= min(stats.frames, 8 ** 2)
    assert 0.0 <= stats.reduction_ratio < 1.0
    assert all(sum(h) == stats.frames for h in stats.histograms)


# --- dump format ---

def test_dump_text_format():
    merged = combine(seq_of([(3, 7), (3, 7), (1, 0)], utt_id="test-src0-0001"))
    text = format_dump(merged)
    assert text == "#utt test-src0-0001 G=2 V=8 combined=1\n3 7:2\n1 0:1\n"
    parsed = parse_dump(text)[0]
    assert parsed.combined and parsed.utt_id == "test-src0-0001"
    assert parsed.run_lengths.tolist() == [2, 1]
    assert format_dump(seq_of([(1, 2)], utt_id="a")) == "#utt a G=2 V=8\n1 2\n"


def test_parse_dump_with_several_utterances():
    text = "#utt a G=2 V=4\n0 1\n0 1\n\n#utt b G=2 V=4\n3 3\n"
    seqs = parse_dump(text)
    assert [s.utt_id for s in seqs] == ["a", "b"]
    assert seqs[0].tuples() == [(0, 1), (0, 1)]


@pytest.mark.parametrize("text", [
    "0 1\n",
    "#utt a G=2\n0 1\n",
    "#utt a G=2 V=4\n0 1 2\n",
    "#utt a G=2 V=4\n0 x\n",
    "#utt a G=2 V=4\n0 4\n",
    "#utt a G=2 V=4 combined=1\n0 1:2\n0 1:1\n",
    "#utt a G=2 V=4\n0 1:2\n1 1\n",
    "#utt a G=2 V=4\n0 1:3\n1 1:2\n",
])
def test_malformed_dumps_raise_data_errors(text):
    with pytest.raises(DataError):
        parse_dump(text)


def test_dump_directory(tmp_path):
    write_dump(str(tmp_path / "b.idx"), seq_of([(1, 1)], utt_id="b"))
    write_dump(str(tmp_path / "a.idx"), seq_of([(2, 2)], utt_id="a"))
    assert [s.utt_id for s in read_dump_dir(str(tmp_path))] == ["a", "b"]
    assert [s.utt_id for s in read_dump_dir(str(tmp_path), ["b"])] == ["b"]
    with pytest.raises(DataError):
        read_dump_dir(str(tmp_path / "missing"))
    with pytest.raises(DataError):
        read_dump_dir(str(tmp_path), ["c"])
