"""Symbolic drum scores on the sixteenth-note (tatum) grid.

A drum score is a binary activation matrix over M = 3 instruments
(bass drum, snare drum, hi-hat) and N tatums.  This module holds the
domain types, onset quantization onto the grid (with classification of
onsets that the grid cannot represent), probability binarization, and
the line-oriented text / JSON interchange formats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

INSTRUMENTS = ("BD", "SD", "HH")
NUM_INSTRUMENTS = len(INSTRUMENTS)

#: Onsets farther than this (seconds) from every tatum cannot be represented.
DEFAULT_TOLERANCE = 0.050

#: Slack for tolerance comparisons, far below the millisecond precision
#: of the interchange formats, so the 50 ms boundary is float-stable.
TOLERANCE_SLACK = 1e-9


def _as_binary_matrix(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValidationError(f"score must be a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] != NUM_INSTRUMENTS:
        raise ValidationError(
            f"score must have {NUM_INSTRUMENTS} instrument rows, got {arr.shape[0]}"
        )
    if arr.shape[1] < 1:
        raise ValidationError("score must have at least one tatum column")
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError("score entries must be 0 or 1")
    out = arr.astype(np.uint8)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DrumScore:
    """Binary activations, shape (3, N); rows are BD, SD, HH."""

    activations: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "activations", _as_binary_matrix(self.activations))

    @property
    def num_tatums(self) -> int:
        return self.activations.shape[1]

    @property
    def onset_count(self) -> int:
        return int(self.activations.sum())

    def to_dict(self) -> dict:
        return {
            "instruments": list(INSTRUMENTS),
            "activations": self.activations.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DrumScore":
        if "activations" not in data:
            raise ValidationError("score JSON must contain an 'activations' field")
        return cls(np.asarray(data["activations"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "DrumScore":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read score file {path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class OnsetProbabilities:
    """Per-instrument, per-tatum onset probabilities, shape (3, N)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != NUM_INSTRUMENTS:
            raise ValidationError(
                f"probabilities must have shape ({NUM_INSTRUMENTS}, N), got {arr.shape}"
            )
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("probabilities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def num_tatums(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TatumGrid:
    """Tatum times in seconds, mapped onto spectrogram frames.

    Frame index of tatum n is floor(times[n] * frame_rate + 0.5).  Times
    (and the derived frame indices) must be strictly increasing.
    """

    times: np.ndarray
    frame_rate: float = 100.0

    def __post_init__(self):
        arr = np.asarray(self.times, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValidationError("tatum grid needs a 1-D, non-empty time array")
        if not np.isfinite(arr).all() or arr[0] < 0.0:
            raise ValidationError("tatum times must be finite and non-negative")
        if arr.size > 1 and not (np.diff(arr) > 0).all():
            raise ValidationError("tatum times must be strictly increasing")
        if self.frame_rate <= 0:
            raise ValidationError("frame_rate must be positive")
        # floor(x + 0.5): half-integer frame positions always round up
        frames = np.floor(arr * self.frame_rate + 0.5).astype(np.int64)
        if frames.size > 1 and not (np.diff(frames) > 0).all():
            raise ValidationError(
                "tatum times collapse onto duplicate frame indices at this frame rate"
            )
        arr.setflags(write=False)
        frames.setflags(write=False)
        object.__setattr__(self, "times", arr)
        object.__setattr__(self, "frame_indices", frames)

    @property
    def num_tatums(self) -> int:
        return self.times.size

    def pooling_windows(self) -> list[tuple[int, int]]:
        """Half-open frame ranges [start, stop) owned by each tatum.

        Window n spans from the midpoint with the previous tatum to the
        midpoint with the next one; a frame exactly on a midpoint
        belongs to the later tatum.  The first window opens on tatum 1's
        own frame and the last closes just after tatum N's, so every
        tatum sees its own frame and windows are non-empty whenever the
        frame indices are distinct.
        """
        b = self.frame_indices.astype(np.float64)
        mid = (b[:-1] + b[1:]) / 2.0
        starts = np.ceil(np.concatenate(([b[0]], mid))).astype(np.int64)
        stops = np.ceil(np.concatenate((mid, [b[-1] + 1]))).astype(np.int64)
        windows = list(zip(starts.tolist(), stops.tolist()))
        for n, (lo, hi) in enumerate(windows):
            if hi <= lo:
                raise ValidationError(
                    f"empty pooling window for tatum {n} (frames [{lo}, {hi}))"
                )
        return windows

    def validate_frames(self, total_frames: int) -> None:
        if self.frame_indices[-1] >= total_frames or self.frame_indices[0] < 0:
            raise ValidationError(
                f"tatum frames [{self.frame_indices[0]}, {self.frame_indices[-1]}] "
                f"fall outside the feature's {total_frames} frames"
            )

    def slice(self, start: int, stop: int) -> "TatumGrid":
        """Sub-grid over tatums [start, stop), re-anchored to the frame
        at the start of tatum `start`'s pooling window."""
        windows = self.pooling_windows()
        frame0 = windows[start][0]
        return TatumGrid(self.times[start:stop] - frame0 / self.frame_rate,
                         self.frame_rate)


@dataclass(frozen=True)
class OnsetEvent:
    """A single drum hit: instrument index (0=BD, 1=SD, 2=HH) and time."""

    instrument: int
    time: float


@dataclass(frozen=True)
class UndetectableReport:
    """Onsets the tatum grid cannot represent.

    ``conflict`` counts surplus onsets whose nearest tatum is shared with
    another onset of the same instrument (k onsets on one tatum leave
    k - 1 undetectable).  ``far`` counts onsets farther than the
    tolerance from every tatum.  ``union`` counts distinct undetectable
    onsets (one onset may be in both groups).
    """

    conflict: int
    far: int
    union: int
    total_onsets: int

    def _ratio(self, count: int) -> float:
        return count / self.total_onsets if self.total_onsets else 0.0

    @property
    def conflict_ratio(self) -> float:
        return self._ratio(self.conflict)

    @property
    def far_ratio(self) -> float:
        return self._ratio(self.far)

    @property
    def union_ratio(self) -> float:
        return self._ratio(self.union)

    def to_dict(self) -> dict:
        return {
            "conflict": self.conflict,
            "far": self.far,
            "union": self.union,
            "total_onsets": self.total_onsets,
            "conflict_ratio": self.conflict_ratio,
            "far_ratio": self.far_ratio,
            "union_ratio": self.union_ratio,
        }


def _nearest_tatum(times: np.ndarray, t: float) -> int:
    """Index of the tatum closest to t; ties go to the earlier tatum."""
    i = int(np.searchsorted(times, t))
    if i == 0:
        return 0
    if i == times.size:
        return times.size - 1
    left, right = times[i - 1], times[i]
    # <= prefers the earlier tatum on an exact midpoint
    return i - 1 if t - left <= right - t else i


def quantize_onsets(
    events: list[OnsetEvent],
    grid: TatumGrid,
    tolerance: float = DEFAULT_TOLERANCE,
) -> tuple[DrumScore, UndetectableReport]:
    """Snap onsets to their nearest tatum and report what gets lost.

    A cell is activated when at least one onset within ``tolerance`` of
    the tatum maps to it.  Onsets beyond tolerance from every tatum
    produce no activation.
    """
    if tolerance < 0:
        raise ValidationError("tolerance must be non-negative")
    n_tatums = grid.num_tatums
    activations = np.zeros((NUM_INSTRUMENTS, n_tatums), dtype=np.uint8)
    cells: dict[tuple[int, int], list[float]] = {}

    far = 0
    for ev in events:
        if not (0 <= ev.instrument < NUM_INSTRUMENTS):
            raise ValidationError(f"unknown instrument index {ev.instrument}")
        if ev.time < 0 or not math.isfinite(ev.time):
            raise ValidationError(f"onset time must be finite and >= 0, got {ev.time}")
        n = _nearest_tatum(grid.times, ev.time)
        dist = abs(ev.time - grid.times[n])
        if dist > tolerance + TOLERANCE_SLACK:
            far += 1
        else:
            activations[ev.instrument, n] = 1
        cells.setdefault((ev.instrument, n), []).append(dist)

    conflict = 0
    union = 0
    for dists in cells.values():
        k = len(dists)
        conflict += k - 1
        if any(d <= tolerance + TOLERANCE_SLACK for d in dists):
            union += k - 1  # the closest in-tolerance onset is detected
        else:
            union += k  # every mapper is far, none detected
    report = UndetectableReport(
        conflict=conflict, far=far, union=union, total_onsets=len(events)
    )
    return DrumScore(activations), report


def binarize(phi, delta: float) -> DrumScore:
    """Threshold onset probabilities into a score; the boundary value is
    active (delta = 0 yields the all-ones score)."""
    if not (0.0 <= delta <= 1.0):
        raise ValidationError(f"threshold must lie in [0, 1], got {delta}")
    values = phi.values if isinstance(phi, OnsetProbabilities) else OnsetProbabilities(phi).values
    return DrumScore((values >= delta).astype(np.uint8))


def render_onsets(score: DrumScore, grid: TatumGrid) -> list[OnsetEvent]:
    """Turn each active cell back into an onset at its tatum time."""
    if score.num_tatums != grid.num_tatums:
        raise ValidationError(
            f"score has {score.num_tatums} tatums but grid has {grid.num_tatums}"
        )
    events = []
    for m, n in zip(*np.nonzero(score.activations)):
        events.append(OnsetEvent(int(m), float(grid.times[n])))
    events.sort(key=lambda ev: (ev.time, ev.instrument))
    return events


# ---------------------------------------------------------------------------
# Interchange formats: line-oriented text for onsets and tatum times,
# JSON for scores (see DrumScore.save/load).

def save_onsets(path, events: list[OnsetEvent]) -> None:
    lines = [f"{ev.time:.6f}\t{ev.instrument}" for ev in events]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_onsets(path) -> list[OnsetEvent]:
    events = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read onset file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise ValidationError(f"{path}:{lineno}: expected 'time<TAB>instrument'")
        try:
            time, instrument = float(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        events.append(OnsetEvent(instrument, time))
    return events


def save_tatums(path, times) -> None:
    lines = [f"{t:.6f}" for t in np.asarray(times, dtype=np.float64)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_tatums(path, frame_rate: float = 100.0) -> TatumGrid:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read tatum file {path}: {exc}") from exc
    times = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            times.append(float(line))
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return TatumGrid(np.asarray(times), frame_rate)
