"""Synthetic paired data: periodic drum patterns rendered as band-limited
noise bursts on a metronomic sixteenth-note grid.

Each piece ships with its exact tatum times and onset events, so the
generated corpus round-trips through onset quantization without loss.
Bass drum bursts live in the low band, snare in the mid band, and
hi-hat in the high band, which keeps the instruments separable in the
mel spectrogram.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import ValidationError
from .features import SAMPLE_RATE
from .score import (
    DrumScore,
    NUM_INSTRUMENTS,
    OnsetEvent,
    TatumGrid,
    save_onsets,
    save_tatums,
)

TATUMS_PER_BAR = 16

# per-instrument burst shaping: (band low Hz, band high Hz, length s, gain)
_BURSTS = (
    (40.0, 120.0, 0.12, 1.0),    # BD
    (180.0, 2500.0, 0.14, 0.8),  # SD
    (6000.0, 16000.0, 0.06, 0.5),  # HH
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a generated dataset."""

    pieces: int = 10
    tempo_min: float = 110.0
    tempo_max: float = 130.0
    pattern_count: int = 5
    period: int = 16
    noise: float = 0.0
    bars: int = 8

    def __post_init__(self):
        if self.pieces < 1:
            raise ValidationError("need at least one piece")
        if self.tempo_min <= 0 or self.tempo_max < self.tempo_min:
            raise ValidationError("tempo range must be positive and ordered")
        if self.period not in (8, 16, 32):
            raise ValidationError(f"period must be 8, 16, or 32 tatums, got {self.period}")
        if not (0.0 <= self.noise <= 1.0):
            raise ValidationError("noise level must lie in [0, 1]")
        if self.pattern_count < 1 or self.bars < 1:
            raise ValidationError("pattern_count and bars must be positive")

    @property
    def num_tatums(self) -> int:
        return self.bars * TATUMS_PER_BAR


@dataclass(frozen=True)
class SyntheticPiece:
    name: str
    audio: np.ndarray
    sample_rate: int
    grid: TatumGrid
    events: list[OnsetEvent]
    score: DrumScore


def make_pattern_library(count: int, period: int, rng: np.random.Generator) -> np.ndarray:
    """(count, 3, period) binary patterns with rock-flavoured priors:
    kick on downbeats, snare on backbeats, hats on the eighth grid."""
    patterns = np.zeros((count, NUM_INSTRUMENTS, period), dtype=np.uint8)
    for p in range(count):
        bd = patterns[p, 0]
        bd[0] = 1
        for slot in range(4, period, 4):
            bd[slot] = rng.random() < 0.6
        if rng.random() < 0.4:  # occasional off-beat kick
            bd[rng.integers(1, period)] = 1
        sd = patterns[p, 1]
        sd[4::8] = 1
        hh = patterns[p, 2]
        step = 2 if rng.random() < 0.8 else 4
        hh[::step] = 1
        # a couple of random accents to tell patterns apart
        for _ in range(2):
            m = int(rng.integers(0, NUM_INSTRUMENTS))
            n = int(rng.integers(0, period))
            patterns[p, m, n] ^= 1
    return patterns


def render_burst_bank(rng: np.random.Generator) -> list[np.ndarray]:
    """One decaying band-limited noise burst per instrument.  The bank
    is shared by a whole dataset (one drum kit), so identical event
    lists render to identical audio."""
    bank = []
    for lo, hi, length_s, gain in _BURSTS:
        length = int(length_s * SAMPLE_RATE)
        sos = scipy.signal.butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
        burst = scipy.signal.sosfilt(sos, rng.standard_normal(length))
        envelope = np.exp(-np.arange(length) / (0.18 * length))
        bank.append(gain * burst * envelope)
    return bank


def render_audio(
    events: list[OnsetEvent], duration: float, bursts: list[np.ndarray]
) -> np.ndarray:
    """Mono 44.1 kHz waveform: one shaped noise burst per onset."""
    total = int(np.ceil(duration * SAMPLE_RATE))
    audio = np.zeros(total)
    for ev in events:
        burst = bursts[ev.instrument]
        start = int(round(ev.time * SAMPLE_RATE))
        length = min(burst.size, total - start)
        if length <= 0:
            continue
        audio[start:start + length] += burst[:length]
    peak = np.abs(audio).max()
    if peak > 0:
        audio *= 0.9 / peak
    return audio


def _sample_score(spec: SyntheticSpec, patterns: np.ndarray,
                  rng: np.random.Generator) -> DrumScore:
    n = spec.num_tatums
    pattern = patterns[rng.integers(0, len(patterns))]
    reps = int(np.ceil(n / spec.period))
    activations = np.tile(pattern, (1, reps))[:, :n].copy()
    if spec.noise > 0.0:
        flips = rng.random(activations.shape) < spec.noise
        activations ^= flips.astype(np.uint8)
    if activations.sum() == 0:  # keep every piece non-silent
        activations[0, 0] = 1
    return DrumScore(activations)


def synth_piece(name: str, spec: SyntheticSpec, patterns: np.ndarray,
                bursts: list[np.ndarray], rng: np.random.Generator) -> SyntheticPiece:
    tempo = float(rng.uniform(spec.tempo_min, spec.tempo_max))
    interval = 60.0 / (tempo * 4.0)  # sixteenth-note spacing
    score = _sample_score(spec, patterns, rng)
    n = spec.num_tatums

    times = (np.arange(n) + 1) * interval  # one-tatum lead-in
    grid = TatumGrid(times)
    events = [
        OnsetEvent(int(m), float(times[t]))
        for m, t in zip(*np.nonzero(score.activations))
    ]
    events.sort(key=lambda ev: (ev.time, ev.instrument))
    audio = render_audio(events, duration=times[-1] + 0.6, bursts=bursts)
    return SyntheticPiece(name, audio, SAMPLE_RATE, grid, events, score)


def synth_dataset(spec: SyntheticSpec, rng: np.random.Generator) -> list[SyntheticPiece]:
    patterns = make_pattern_library(spec.pattern_count, spec.period, rng)
    bursts = render_burst_bank(rng)
    return [
        synth_piece(f"piece_{i:03d}", spec, patterns, bursts, rng)
        for i in range(spec.pieces)
    ]


def synth_scores(spec: SyntheticSpec, rng: np.random.Generator) -> list[DrumScore]:
    """Score-only corpus (for language model pretraining): same pattern
    process, no audio rendering."""
    patterns = make_pattern_library(spec.pattern_count, spec.period, rng)
    return [_sample_score(spec, patterns, rng) for _ in range(spec.pieces)]


def write_piece(piece: SyntheticPiece, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(piece.audio * 32767.0, -32768, 32767).astype(np.int16)
    scipy.io.wavfile.write(out / f"{piece.name}.wav", piece.sample_rate, pcm)
    save_tatums(out / f"{piece.name}.tatums.txt", piece.grid.times)
    save_onsets(out / f"{piece.name}.onsets.txt", piece.events)
    piece.score.save(out / f"{piece.name}.score.json")


def write_dataset(pieces: list[SyntheticPiece], out_dir) -> None:
    for piece in pieces:
        write_piece(piece, out_dir)
