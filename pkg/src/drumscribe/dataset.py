"""Dataset directory handling.

A dataset directory holds, per piece: ``<name>.wav`` (44.1 kHz mono),
``<name>.tatums.txt`` (one tatum time per line), ``<name>.onsets.txt``
(one ``time<TAB>instrument`` event per line), and optionally
``<name>.drum.wav`` for a separated drum stem.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .features import (
    MelFeature,
    extract_mel,
    load_feature,
    load_wav,
    save_feature,
    stack_channels,
)
from .score import TatumGrid, load_onsets, load_tatums, quantize_onsets
from .training import TrainPiece


@dataclass(frozen=True)
class DatasetEntry:
    name: str
    audio: Path
    tatums: Path
    onsets: Path
    drum_audio: Path | None


def scan_dataset(data_dir) -> list[DatasetEntry]:
    """Pieces found in a directory, sorted by name."""
    root = Path(data_dir)
    if not root.is_dir():
        raise ValidationError(f"dataset directory not found: {root}")
    entries = []
    for wav in sorted(root.glob("*.wav")):
        if wav.name.endswith(".drum.wav"):
            continue
        name = wav.stem
        tatums = root / f"{name}.tatums.txt"
        onsets = root / f"{name}.onsets.txt"
        if not tatums.exists() or not onsets.exists():
            continue
        drum = root / f"{name}.drum.wav"
        entries.append(DatasetEntry(name, wav, tatums, onsets, drum if drum.exists() else None))
    if not entries:
        raise ValidationError(f"no complete pieces (wav + tatums + onsets) in {root}")
    return entries


def piece_feature(entry: DatasetEntry, in_channels: int = 1, cache_dir=None) -> MelFeature:
    """Mel feature for one piece, cached as npz when a cache dir is given."""
    if cache_dir is not None:
        cache = Path(cache_dir) / f"{entry.name}.ch{in_channels}.npz"
        if cache.exists():
            return load_feature(cache)
    audio, sr = load_wav(entry.audio)
    feature = extract_mel(audio, sr)
    if in_channels == 2:
        if entry.drum_audio is None:
            raise ValidationError(
                f"two-channel mode needs a drum stem: {entry.audio.with_suffix('')}.drum.wav"
            )
        drum_audio, drum_sr = load_wav(entry.drum_audio)
        feature = stack_channels(feature, extract_mel(drum_audio, drum_sr, channel="drum"))
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_feature(cache, feature)
    return feature


def load_train_piece(
    entry: DatasetEntry, in_channels: int = 1, cache_dir=None
) -> TrainPiece:
    feature = piece_feature(entry, in_channels, cache_dir)
    grid = load_tatums(entry.tatums, feature.frame_rate)
    grid.validate_frames(feature.num_frames)
    score, _ = quantize_onsets(load_onsets(entry.onsets), grid)
    return TrainPiece(feature, grid, score)


def train_val_split(
    entries: list, val_fraction: float, seed: int
) -> tuple[list, list]:
    """Deterministic shuffled split; at least one piece stays in train."""
    if not entries:
        raise ValidationError("no pieces to split")
    order = np.random.default_rng(seed).permutation(len(entries))
    n_val = int(round(val_fraction * len(entries)))
    n_val = min(n_val, len(entries) - 1)
    val_idx = set(order[:n_val].tolist())
    train = [e for i, e in enumerate(entries) if i not in val_idx]
    val = [e for i, e in enumerate(entries) if i in val_idx]
    return train, val
