"""Log-mel feature extraction for 44.1 kHz audio.

Frames are 2048-sample Hann windows hopped every 441 samples (10 ms,
100 frames/second), centered so that frame t sits at sample t * 441;
tatum times then map to frames by simple rounding.  Magnitudes go
through an 80-band mel filter bank (20 Hz - 20 kHz), are normalized so
the per-recording maximum is 0 dB, floored at -80 dB, and rescaled to
[0, 1] for the network.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import ValidationError

SAMPLE_RATE = 44100
WINDOW_SIZE = 2048
HOP_SIZE = 441
FRAME_RATE = SAMPLE_RATE / HOP_SIZE  # 100 frames/second
MEL_BANDS = 80
FMIN = 20.0
FMAX = 20000.0
DB_FLOOR = -80.0

MUSIC_CHANNEL = "music"
DRUM_CHANNEL = "drum"


@dataclass(frozen=True)
class MelFeature:
    """Mel features, shape (channels, 80, T), values in [0, 1]."""

    values: np.ndarray
    channels: tuple[str, ...]
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 3:
            raise ValidationError(f"feature must be (channels, bands, frames), got {arr.shape}")
        if arr.shape[0] != len(self.channels):
            raise ValidationError(
                f"{arr.shape[0]} channel planes but {len(self.channels)} channel names"
            )
        if arr.shape[1] != MEL_BANDS:
            raise ValidationError(f"expected {MEL_BANDS} mel bands, got {arr.shape[1]}")
        if arr.shape[2] < 1:
            raise ValidationError("feature must have at least one frame")
        if not np.isfinite(arr).all():
            raise ValidationError("feature values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def num_frames(self) -> int:
        return self.values.shape[2]

    @property
    def num_channels(self) -> int:
        return self.values.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(n_bands: int = MEL_BANDS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Center frequencies (Hz) of the triangular mel bands."""
    pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2)
    return mel_to_hz(pts[1:-1])


def mel_filterbank(
    n_bands: int = MEL_BANDS,
    n_fft: int = WINDOW_SIZE,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = FMIN,
    fmax: float = FMAX,
) -> np.ndarray:
    """Triangular filters (n_bands, n_fft // 2 + 1), unit peak."""
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2)
    hz_pts = mel_to_hz(mel_pts)
    fft_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    bank = np.zeros((n_bands, fft_freqs.size), dtype=np.float64)
    for b in range(n_bands):
        lo, center, hi = hz_pts[b], hz_pts[b + 1], hz_pts[b + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        bank[b] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def _stft_magnitude(audio: np.ndarray) -> np.ndarray:
    """Center-padded magnitude STFT, shape (1025, T) with T = ceil(len / hop)."""
    n = audio.size
    num_frames = int(np.ceil(n / HOP_SIZE))
    half = WINDOW_SIZE // 2
    padded = np.concatenate(
        [np.zeros(half), audio.astype(np.float64), np.zeros(half + WINDOW_SIZE)]
    )
    window = scipy.signal.get_window("hann", WINDOW_SIZE, fftbins=True)
    idx = np.arange(num_frames)[:, None] * HOP_SIZE + np.arange(WINDOW_SIZE)[None, :]
    frames = padded[idx] * window
    return np.abs(np.fft.rfft(frames, axis=1)).T


_FILTERBANK_CACHE: dict[tuple, np.ndarray] = {}


def extract_mel(
    audio: np.ndarray,
    sample_rate: int,
    *,
    channel: str = MUSIC_CHANNEL,
    normalize: bool = True,
) -> MelFeature:
    """Single-channel mel feature from a mono 44.1 kHz waveform.

    With ``normalize`` off, raw mel magnitudes are returned instead of
    the dB-scaled values (useful for invariance checks).
    """
    audio = np.asarray(audio)
    if audio.size == 0:
        raise ValidationError("audio is empty")
    if audio.ndim != 1:
        raise ValidationError(f"audio must be mono (1-D), got shape {audio.shape}")
    if sample_rate != SAMPLE_RATE:
        raise ValidationError(
            f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz (resampling is out of scope)"
        )
    key = (MEL_BANDS, WINDOW_SIZE, SAMPLE_RATE, FMIN, FMAX)
    if key not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[key] = mel_filterbank()
    mel = _FILTERBANK_CACHE[key] @ _stft_magnitude(audio)
    if normalize:
        peak = mel.max()
        if peak > 0.0:
            db = 20.0 * np.log10(np.maximum(mel, 1e-12) / peak)
            db = np.maximum(db, DB_FLOOR)
            mel = (db - DB_FLOOR) / -DB_FLOOR
        else:
            mel = np.zeros_like(mel)
    return MelFeature(mel[None, :, :], (channel,))


def stack_channels(music: MelFeature, drum: MelFeature) -> MelFeature:
    """Two-channel feature with fixed (music, drum) order."""
    if music.num_channels != 1 or drum.num_channels != 1:
        raise ValidationError("stack_channels expects single-channel inputs")
    if music.values.shape != drum.values.shape:
        raise ValidationError(
            f"channel shapes differ: {music.values.shape} vs {drum.values.shape}"
        )
    values = np.concatenate([music.values, drum.values], axis=0)
    return MelFeature(values, (MUSIC_CHANNEL, DRUM_CHANNEL), music.frame_rate)


def load_wav(path) -> tuple[np.ndarray, int]:
    """PCM WAV as float in [-1, 1]; stereo is averaged down to mono."""
    try:
        sample_rate, data = scipy.io.wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read WAV file {path}: {exc}") from exc
    if data.dtype == np.int16:
        audio = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        audio = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        audio = (data.astype(np.float64) - 128.0) / 128.0
    else:
        audio = data.astype(np.float64)
    if audio.ndim == 2:
        audio = audio.mean(axis=1)
    return audio, int(sample_rate)


def save_feature(path, feature: MelFeature) -> None:
    np.savez(
        path,
        values=feature.values,
        channels=np.asarray(feature.channels),
        frame_rate=np.asarray(feature.frame_rate),
    )


def load_feature(path) -> MelFeature:
    try:
        with np.load(path, allow_pickle=False) as data:
            return MelFeature(
                data["values"],
                tuple(str(c) for c in data["channels"]),
                float(data["frame_rate"]),
            )
    except (OSError, KeyError, ValueError) as exc:
        raise ValidationError(f"cannot read feature cache {path}: {exc}") from exc
