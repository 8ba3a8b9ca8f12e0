# app/synth.py
"""
Synthetic multi-speaker "speech" with a known latent symbol string per
utterance. A symbol fixes two formant-like frequencies; a speaker fixes pitch,
loudness, harmonic weights, a formant scale and per-symbol durations. Because
every utterance is a deterministic function of (seed, utt_id, speaker,
symbols), the oracle target render(target, source.symbols) always exists.
"""
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.signal import get_window

from app.errors import ContractError
from app.schemas import CorpusSpec
from app.tensor import RngState, derive_seed

logger = logging.getLogger(__name__)

ALPHABET = "abcdefghijkl"
WINDOW = 30
HOP = 10
N_FFT = 64
N_FILTERS = 16
LOG_FLOOR = 1e-8
NOISE_STD = 0.01
EDGE_TAPER = 5
# Pad so that analysis frame i is centred on symbol frame i.
PAD_EACH_SIDE = (WINDOW - HOP) // 2


def symbol_formants(i: int):
    return 0.05 + 0.03 * i, 0.06 + 0.032 * ((7 * i) % 12)


def base_duration(i: int) -> int:
    return 3 + (5 * i) % 6


@dataclass
class SpeakerProfile:
    speaker_id: str
    base_frequency: float          # cycles per frame
    amplitude: float
    duration_multipliers: List[float]
    timbre: List[float]            # weights of the first harmonics of the pitch
    formant_scale: float = 1.0

    def duration(self, symbol_index: int) -> int:
        return max(1, int(round(base_duration(symbol_index) * self.duration_multipliers[symbol_index])))


def speaker_profile(speaker_id: str, seed: int) -> SpeakerProfile:
    rng = RngState(derive_seed(seed, f"speaker/{speaker_id}"))
    return SpeakerProfile(
        speaker_id=speaker_id,
        base_frequency=float(rng.uniform(0.15, 0.45)),
        amplitude=float(rng.uniform(0.6, 1.4)),
        duration_multipliers=[float(x) for x in rng.uniform(0.75, 1.35, size=len(ALPHABET))],
        timbre=[float(x) for x in rng.uniform(0.2, 1.0, size=3)],
        formant_scale=float(rng.uniform(0.9, 1.1)),
    )


@dataclass
class SynthUtterance:
    utt_id: str
    speaker_id: str
    symbols: str
    signal: np.ndarray
    features: np.ndarray
    durations: List[int] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return int(sum(self.durations))


def _check_symbols(symbols: str) -> None:
    if not symbols:
        raise ContractError("symbol string is empty")
    bad = sorted(set(symbols) - set(ALPHABET))
    if bad:
        raise ContractError(f"symbols {bad} are not in the alphabet '{ALPHABET}'")


def _taper(n: int) -> np.ndarray:
    width = min(EDGE_TAPER, n // 2)
    env = np.ones(n)
    if width:
        ramp = np.hanning(2 * width + 2)[1:width + 1]
        env[:width] = ramp
        env[n - width:] = ramp[::-1]
    return env


def render(speaker: SpeakerProfile, symbols: str, rng: RngState, utt_id: str = "") -> SynthUtterance:
    _check_symbols(symbols)
    ids = [ALPHABET.index(s) for s in symbols]
    jitter = rng.integers(-1, 2, size=len(ids))
    durations = [max(1, speaker.duration(i) + int(j)) for i, j in zip(ids, jitter)]
    f0 = speaker.base_frequency / HOP
    phases = rng.uniform(0.0, 2 * np.pi, size=(len(ids), 5))

    segments = []
    for n, (i, frames) in enumerate(zip(ids, durations)):
        t = np.arange(frames * HOP)
        f1, f2 = symbol_formants(i)
        f1, f2 = f1 * speaker.formant_scale, f2 * speaker.formant_scale
        wave = np.sin(2 * np.pi * f1 * t + phases[n, 0]) + 0.7 * np.sin(2 * np.pi * f2 * t + phases[n, 1])
        for h, weight in enumerate(speaker.timbre, start=1):
            wave += weight * np.sin(2 * np.pi * h * f0 * t + phases[n, 1 + h])
        segments.append(speaker.amplitude * wave * _taper(len(t)))

    body = np.concatenate(segments)
    signal = np.pad(body, (PAD_EACH_SIDE, PAD_EACH_SIDE))
    signal = signal + rng.normal(NOISE_STD, size=signal.shape)
    signal = signal.astype(np.float32)
    return SynthUtterance(utt_id, speaker.speaker_id, symbols, signal, extract_features(signal), durations)


def render_utterance(seed: int, utt_id: str, speaker_id: str, symbols: str) -> SynthUtterance:
    """Re-create an utterance from its manifest line; identical to the one gen-corpus wrote."""
    rng = RngState(derive_seed(seed, f"utt/{utt_id}"))
    return render(speaker_profile(speaker_id, seed), symbols, rng, utt_id=utt_id)


def frame_labels(utt: SynthUtterance) -> np.ndarray:
    """Symbol index of every analysis frame."""
    ids = [ALPHABET.index(s) for s in utt.symbols]
    return np.repeat(np.array(ids, dtype=np.int64), utt.durations)


# --- features ---

def triangular_filterbank(n_filters: int = N_FILTERS, n_fft: int = N_FFT) -> np.ndarray:
    """(n_filters, n_fft//2+1) linear-spaced triangles; adjacent filters overlap by half."""
    n_bins = n_fft // 2 + 1
    edges = np.linspace(0, n_bins - 1, n_filters + 2)
    bins = np.arange(n_bins)
    bank = np.zeros((n_filters, n_bins))
    for m in range(n_filters):
        left, centre, right = edges[m], edges[m + 1], edges[m + 2]
        rising = (bins - left) / (centre - left)
        falling = (right - bins) / (right - centre)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


_FILTERBANK = triangular_filterbank()
_WINDOW = get_window("hann", WINDOW, fftbins=True)


def extract_features(signal: np.ndarray) -> np.ndarray:
    """Log triangular-filterbank energies, window 30, hop 10; frames = floor((n - 30) / 10) + 1."""
    signal = np.asarray(signal, dtype=np.float64).reshape(-1)
    if len(signal) < WINDOW:
        raise ContractError(f"signal of {len(signal)} samples is shorter than one analysis window ({WINDOW})")
    frames = np.lib.stride_tricks.sliding_window_view(signal, WINDOW)[::HOP]
    spectrum = np.abs(np.fft.rfft(frames * _WINDOW, n=N_FFT, axis=1)) ** 2
    energies = spectrum @ _FILTERBANK.T
    return np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32)


# --- corpus planning ---

@dataclass
class PlannedUtterance:
    utt_id: str
    speaker: str
    split: str
    symbols: str


def _draw_symbols(rng: RngState, spec: CorpusSpec) -> str:
    """No symbol repeats its predecessor, so runs in a decoded frame stream map back to symbols."""
    length = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
    out = [int(rng.integers(0, len(ALPHABET)))]
    for _ in range(length - 1):
        step = int(rng.integers(1, len(ALPHABET)))
        out.append((out[-1] + step) % len(ALPHABET))
    return "".join(ALPHABET[i] for i in out)


def check_roles(spec: CorpusSpec) -> None:
    roles = {}
    assignments = [(s, "quantizer") for s in spec.quantizer_speakers]
    assignments += [(spec.pretrain_speaker, "tts-pretrain"), (spec.target_speaker, "target")]
    assignments += [(s, "source") for s in spec.source_speakers]
    for speaker, role in assignments:
        if speaker in roles and roles[speaker] != role:
            raise ContractError(f"speaker '{speaker}' is assigned both '{roles[speaker]}' and '{role}'")
        if speaker in roles:
            raise ContractError(f"speaker '{speaker}' is listed twice for role '{role}'")
        roles[speaker] = role


def plan_corpus(spec: CorpusSpec, seed: int) -> List[PlannedUtterance]:
    """Deterministic list of (utt_id, speaker, split, symbols) for the whole corpus."""
    check_roles(spec)
    rng = RngState(derive_seed(seed, "corpus/plan"))
    plan: List[PlannedUtterance] = []

    def add(split: str, speaker: str, count: int):
        for n in range(count):
            utt_id = f"{split}-{speaker}-{n:04d}"
            plan.append(PlannedUtterance(utt_id, speaker, split, _draw_symbols(rng, spec)))

    for speaker in spec.quantizer_speakers:
        add("quantizer", speaker, spec.n_utts_each)
    add("tts-pretrain", spec.pretrain_speaker, spec.n_pretrain_utts)
    add("tts-valid", spec.pretrain_speaker, spec.n_pretrain_valid)
    add("target-train", spec.target_speaker, max(spec.target_sizes))
    add("target-valid", spec.target_speaker, spec.n_target_valid)

    for split, count in (("valid", spec.n_valid), ("test", spec.n_test)):
        for n in range(count):
            speaker = spec.source_speakers[n % len(spec.source_speakers)]
            source = PlannedUtterance(f"{split}-{speaker}-{n:04d}", speaker, split, _draw_symbols(rng, spec))
            plan.append(source)
            plan.append(PlannedUtterance(oracle_id(source.utt_id), spec.target_speaker, f"oracle-{split}", source.symbols))
    return plan


def oracle_id(utt_id: str) -> str:
    return f"oracle-{utt_id}"


def target_subset(entries: list, size: int) -> list:
    """The size-n target set is the first n target-train utterances, so smaller sets nest in larger ones."""
    train = [e for e in entries if e.split == "target-train"]
    if size > len(train):
        raise ContractError(f"target set of {size} requested but only {len(train)} target-train utterances exist")
    return train[:size]


def make_corpus(spec: CorpusSpec, seed: int) -> List[SynthUtterance]:
    """Render every planned utterance in memory (small corpora and tests)."""
    return [render_utterance(seed, p.utt_id, p.speaker, p.symbols) for p in plan_corpus(spec, seed)]
