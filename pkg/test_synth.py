# test_synth.py
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.errors import ContractError
from app.synth import (ALPHABET, HOP, WINDOW, extract_features, frame_labels, make_corpus, oracle_id, plan_corpus,
                       render_utterance, speaker_profile, target_subset)
from conftest import tiny_corpus

symbol_strings = st.text(alphabet=ALPHABET, min_size=1, max_size=8)


@settings(max_examples=30, deadline=None)
@given(symbol_strings)
def test_feature_frames_line_up_with_symbol_frames(symbols):
    utt = render_utterance(3, "u", "spk", symbols)
    assert utt.features.shape == (utt.n_frames, 16)
    assert len(frame_labels(utt)) == utt.n_frames
    assert len(utt.signal) == (utt.n_frames - 1) * HOP + WINDOW
    assert np.all(np.isfinite(utt.features))


def test_feature_frame_count_formula():
    for n in (30, 39, 40, 125):
        assert len(extract_features(np.ones(n))) == (n - WINDOW) // HOP + 1
    with pytest.raises(ContractError):
        extract_features(np.ones(29))


def test_rendering_is_deterministic_per_utterance():
    a = render_utterance(5, "x-1", "q0", "abcabc")
    b = render_utterance(5, "x-1", "q0", "abcabc")
    np.testing.assert_array_equal(a.signal, b.signal)
    assert a.durations == b.durations
    other = render_utterance(5, "x-2", "q0", "abcabc")
    assert not np.array_equal(a.signal, other.signal)


def test_speakers_differ_but_share_symbol_identity():
    a, b = speaker_profile("q0", 1), speaker_profile("q1", 1)
    assert a.base_frequency != b.base_frequency
    assert speaker_profile("q0", 1) == a


def test_unknown_symbols_are_rejected():
    with pytest.raises(ContractError):
        render_utterance(0, "u", "spk", "abz")
    with pytest.raises(ContractError):
        render_utterance(0, "u", "spk", "")


def test_plan_has_every_split_with_the_configured_sizes():
    spec = tiny_corpus()
    plan = plan_corpus(spec, seed=7)
    counts = Counter(p.split for p in plan)
    assert counts == {
        "quantizer": 8, "tts-pretrain": 6, "tts-valid": 2, "target-train": 4, "target-valid": 2,
        "valid": 2, "oracle-valid": 2, "test": 3, "oracle-test": 3,
    }
    assert len({p.utt_id for p in plan}) == len(plan)
    assert plan == plan_corpus(spec, seed=7)
    assert plan != plan_corpus(spec, seed=8)


def test_symbol_strings_respect_length_bounds_and_never_repeat():
    spec = tiny_corpus()
    for p in plan_corpus(spec, seed=1):
        assert spec.min_symbols <= len(p.symbols) <= spec.max_symbols
        assert all(a != b for a, b in zip(p.symbols, p.symbols[1:]))


def test_oracle_utterances_mirror_their_sources():
    spec = tiny_corpus()
    plan = {p.utt_id: p for p in plan_corpus(spec, seed=2)}
    sources = [p for p in plan.values() if p.split in ("valid", "test")]
    assert {p.speaker for p in sources} == set(spec.source_speakers)
    for source in sources:
        oracle = plan[oracle_id(source.utt_id)]
        assert oracle.speaker == spec.target_speaker
        assert oracle.symbols == source.symbols
        assert oracle.split == f"oracle-{source.split}"


def test_target_subsets_nest():
    plan = plan_corpus(tiny_corpus(), seed=3)
    small, large = target_subset(plan, 2), target_subset(plan, 4)
    assert large[:2] == small
    assert all(p.speaker == "tgt" for p in large)
    with pytest.raises(ContractError):
        target_subset(plan, 5)


@pytest.mark.parametrize("changes", [
    {"source_speakers": ["q0"]},
    {"target_speaker": "pre"},
    {"quantizer_speakers": ["q0", "q0"]},
])
def test_overlapping_roles_are_rejected(changes):
    spec = tiny_corpus().model_copy(update=changes)
    with pytest.raises(ContractError):
        plan_corpus(spec, seed=0)


def test_make_corpus_renders_the_plan():
    spec = tiny_corpus().model_copy(update={"n_utts_each": 1, "n_pretrain_utts": 1, "n_pretrain_valid": 1,
                                            "target_sizes": [1], "n_target_valid": 1, "n_valid": 1, "n_test": 1})
    corpus = make_corpus(spec, seed=4)
    plan = plan_corpus(spec, seed=4)
    assert [u.utt_id for u in corpus] == [p.utt_id for p in plan]
    for utt, p in zip(corpus, plan):
        assert utt.speaker_id == p.speaker and utt.symbols == p.symbols
