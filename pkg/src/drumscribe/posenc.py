"""Positional encodings for the tatum-level self-attention stack.

Two flavours: the usual trigonometric encoding whose wavelength grows
exponentially with the row index, and a tatum-synchronous encoding whose
period grows *linearly* with the row index (2 + floor(d/2) tatums per
half-cycle), so its stripes line up with the metrical grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

ENCODING_KINDS = ("standard", "sync")


@dataclass(frozen=True)
class PositionalEncoding:
    values: np.ndarray  # (d_f, n), entries in [-1, 1]
    kind: str

    def __post_init__(self):
        self.values.setflags(write=False)


def _check_dims(d_f: int, n: int) -> None:
    if d_f < 2:
        raise ValidationError(f"encoding dimension must be >= 2, got {d_f}")
    if n < 1:
        raise ValidationError(f"encoding length must be >= 1, got {n}")


def standard_pe(d_f: int, n: int) -> PositionalEncoding:
    """Sinusoidal encoding; row pair (2k, 2k+1) shares the angular rate
    10000**(-4k / d_f) so that sin/cos rows stay phase-paired."""
    _check_dims(d_f, n)
    pos = np.arange(n, dtype=np.float64)
    values = np.empty((d_f, n), dtype=np.float64)
    for d in range(d_f):
        k = d // 2
        rate = 10000.0 ** (-2.0 * (2 * k) / d_f)
        angle = pos * rate
        values[d] = np.sin(angle) if d % 2 == 0 else np.cos(angle)
    return PositionalEncoding(values, "standard")


def sync_pe(d_f: int, n: int) -> PositionalEncoding:
    """Tatum-synchronous encoding: row pair (2k, 2k+1) cycles every
    2 * (2 + k) tatums.  The tatum index is reduced modulo the period
    before evaluation, so the periodicity is exact in floating point."""
    _check_dims(d_f, n)
    pos = np.arange(n, dtype=np.int64)
    values = np.empty((d_f, n), dtype=np.float64)
    for d in range(d_f):
        k = d // 2
        period = 2 * (2 + k)
        angle = np.pi * (pos % period) / (2 + k)
        values[d] = np.sin(angle) if d % 2 == 0 else np.cos(angle)
    return PositionalEncoding(values, "sync")


def positional_encoding(kind: str, d_f: int, n: int) -> PositionalEncoding:
    if kind == "standard":
        return standard_pe(d_f, n)
    if kind == "sync":
        return sync_pe(d_f, n)
    raise ValidationError(f"unknown encoding kind {kind!r}; expected one of {ENCODING_KINDS}")
