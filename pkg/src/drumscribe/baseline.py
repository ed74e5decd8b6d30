"""Frame-level CNN-BiGRU baseline with rule-based peak picking.

The same convolutional encoder feeds a BiGRU that runs over *frames*
instead of tatums, trained with a weighted frame-level cross entropy.
Discrete onsets come from a three-condition peak picker, and land on
the tatum grid through the shared onset quantizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ValidationError
from .score import (
    DrumScore,
    NUM_INSTRUMENTS,
    INSTRUMENTS,
    OnsetEvent,
    TatumGrid,
    UndetectableReport,
    quantize_onsets,
)
from .training import transcription_loss
from .transcriber import FrameEncoder, BiGRUDecoder, TranscriptionModel


@dataclass(frozen=True)
class PeakPickConfig:
    """Windows of the three acceptance rules: a frame must be the local
    max over [t-w1, t+w2], exceed the local mean over [t-w3, t+w4] by
    the threshold, and lie more than w5 frames after the previous pick."""

    threshold: float = 0.2
    w1: int = 2
    w2: int = 0
    w3: int = 2
    w4: int = 0
    w5: int = 2

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3, self.w4, self.w5) < 0:
            raise ValidationError("peak picking windows must be non-negative")


class FrameDecoderModel(TranscriptionModel):
    """Encoder + frame-level BiGRU; no tatum pooling anywhere."""

    def forward(self, x: torch.Tensor, grid=None, collect_attention: bool = False):
        frames = self.encoder(x)
        return self.decoder(frames)

    @torch.no_grad()
    def frame_probabilities(self, feature) -> np.ndarray:
        """(M, T) onset probabilities for one piece."""
        self.eval()
        x = torch.tensor(feature.values, dtype=next(self.parameters()).dtype)[None]
        phi, _ = self.forward(x)
        return phi[0].T.double().numpy()

    def transcribe(self, feature, grid):
        raise ValidationError(
            "the frame-level baseline emits frame probabilities; run "
            "frame_probabilities, peak_pick, and frames_to_tatums instead"
        )


def build_frame_model(
    d_f: int = 96, hidden: int = 131, layers: int = 1,
    in_channels: int = 1, dropout: float = 0.2,
) -> FrameDecoderModel:
    config = {
        "kind": "frame_bigru",
        "in_channels": in_channels,
        "instruments": list(INSTRUMENTS),
        "d_f": d_f,
        "hidden": hidden,
        "layers": layers,
        "dropout": dropout,
    }
    return FrameDecoderModel(
        FrameEncoder(in_channels, d_f), BiGRUDecoder(d_f, hidden, layers, dropout), config
    )


def frame_targets(events: list[OnsetEvent], num_frames: int, frame_rate: float) -> np.ndarray:
    """Binary (M, T) activations from onset times; onsets past the last
    frame are clipped onto it."""
    y = np.zeros((NUM_INSTRUMENTS, num_frames), dtype=np.uint8)
    for ev in events:
        if not (0 <= ev.instrument < NUM_INSTRUMENTS):
            raise ValidationError(f"unknown instrument index {ev.instrument}")
        t = min(int(np.floor(ev.time * frame_rate + 0.5)), num_frames - 1)
        y[ev.instrument, t] = 1
    return y


def frame_loss(phi_star: torch.Tensor, y_star: torch.Tensor, beta_star) -> torch.Tensor:
    """Weighted cross entropy over (M, T), same form as the tatum-level
    transcription loss."""
    return transcription_loss(phi_star, y_star, beta_star)


def peak_pick(phi_star: np.ndarray, cfg: PeakPickConfig = PeakPickConfig()) -> list[list[int]]:
    """Per-instrument onset frames, scanned left to right.

    A frame is picked when it is the window max, exceeds the window mean
    by the threshold, and the previous pick (per instrument) is more
    than w5 frames back; the pick pointer advances only on acceptance.
    """
    phi = np.asarray(phi_star, dtype=np.float64)
    if phi.ndim != 2:
        raise ValidationError(f"frame probabilities must be 2-D, got shape {phi.shape}")
    t_max = phi.shape[1]
    onsets: list[list[int]] = []
    for row in phi:
        picked: list[int] = []
        t_prev = -np.inf
        for t in range(t_max):
            lo1, hi1 = max(0, t - cfg.w1), min(t_max, t + cfg.w2 + 1)
            if row[t] < row[lo1:hi1].max():
                continue
            lo3, hi3 = max(0, t - cfg.w3), min(t_max, t + cfg.w4 + 1)
            if row[t] < row[lo3:hi3].mean() + cfg.threshold:
                continue
            if t - t_prev <= cfg.w5:
                continue
            picked.append(t)
            t_prev = t
        onsets.append(picked)
    return onsets


def frames_to_tatums(
    frame_onsets: list[list[int]],
    grid: TatumGrid,
    tolerance: float = 0.050,
) -> tuple[DrumScore, UndetectableReport]:
    """Quantize picked frames onto the tatum grid (frames become seconds
    at the grid's frame rate, then the shared onset quantizer applies)."""
    if len(frame_onsets) != NUM_INSTRUMENTS:
        raise ValidationError(f"need one onset list per instrument, got {len(frame_onsets)}")
    events = []
    for m, frames in enumerate(frame_onsets):
        for t in frames:
            events.append(OnsetEvent(m, t / grid.frame_rate))
    events.sort(key=lambda ev: (ev.time, ev.instrument))
    return quantize_onsets(events, grid, tolerance)
