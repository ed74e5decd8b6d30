"""Transcription quality metrics.

Onset F-measure with a 50 ms tolerance and greedy one-to-one matching,
plus a tatum-level error rate (TER): a Levenshtein-style edit cost
between binary score matrices where inserting or deleting a tatum
column costs M and substituting one costs the Manhattan distance
between the two columns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .score import DrumScore, INSTRUMENTS, NUM_INSTRUMENTS, OnsetEvent, TOLERANCE_SLACK

DEFAULT_TOLERANCE = 0.050


def match_onsets(est_times, gt_times, tolerance: float = DEFAULT_TOLERANCE) -> int:
    """Number of one-to-one matches within tolerance.

    Both lists are consumed greedily in time order; each onset matches
    at most once.  Symmetric in its two arguments.
    """
    est = sorted(est_times)
    gt = sorted(gt_times)
    i = j = matched = 0
    while i < len(est) and j < len(gt):
        d = est[i] - gt[j]
        if abs(d) <= tolerance + TOLERANCE_SLACK:
            matched += 1
            i += 1
            j += 1
        elif d < 0:
            i += 1
        else:
            j += 1
    return matched


@dataclass(frozen=True)
class InstrumentScores:
    """Precision / recall / F-measure in percent, with raw counts."""

    n_est: int
    n_gt: int
    n_correct: int

    @property
    def precision(self) -> float:
        if self.n_est == 0:
            return 100.0 if self.n_gt == 0 else 0.0
        return 100.0 * self.n_correct / self.n_est

    @property
    def recall(self) -> float:
        if self.n_gt == 0:
            return 100.0 if self.n_est == 0 else 0.0
        return 100.0 * self.n_correct / self.n_gt

    @property
    def f_measure(self) -> float:
        p, r = self.precision, self.recall
        if p + r == 0.0:
            return 0.0
        return 2.0 * p * r / (p + r)

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f_measure": self.f_measure,
            "n_est": self.n_est,
            "n_gt": self.n_gt,
            "n_correct": self.n_correct,
        }


def _split_by_instrument(events: list[OnsetEvent]) -> list[list[float]]:
    times: list[list[float]] = [[] for _ in range(NUM_INSTRUMENTS)]
    for ev in events:
        if not (0 <= ev.instrument < NUM_INSTRUMENTS):
            raise ValidationError(f"unknown instrument index {ev.instrument}")
        times[ev.instrument].append(ev.time)
    return times


def f_measure(
    est: list[OnsetEvent],
    gt: list[OnsetEvent],
    tolerance: float = DEFAULT_TOLERANCE,
) -> dict[str, InstrumentScores]:
    """Per-instrument and pooled ('total') onset scores.

    With no ground truth and no estimates, P = R = F = 100 (perfect
    silence); F = 0 whenever P + R = 0.
    """
    est_times = _split_by_instrument(est)
    gt_times = _split_by_instrument(gt)
    out: dict[str, InstrumentScores] = {}
    tot_e = tot_g = tot_c = 0
    for m, name in enumerate(INSTRUMENTS):
        correct = match_onsets(est_times[m], gt_times[m], tolerance)
        out[name] = InstrumentScores(len(est_times[m]), len(gt_times[m]), correct)
        tot_e += len(est_times[m])
        tot_g += len(gt_times[m])
        tot_c += correct
    out["total"] = InstrumentScores(tot_e, tot_g, tot_c)
    return out


def ter(y: DrumScore | np.ndarray, y_hat: DrumScore | np.ndarray) -> int:
    """Minimum edit cost between two scores.

    Insertion/deletion of a column costs M; substitution costs the
    Manhattan distance between the columns.  Aligning against an empty
    score therefore costs N * M.
    """
    a = y.activations if isinstance(y, DrumScore) else np.asarray(y)
    b = y_hat.activations if isinstance(y_hat, DrumScore) else np.asarray(y_hat)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValidationError(
            f"scores must share the instrument dimension, got {a.shape} vs {b.shape}"
        )
    m = a.shape[0]
    n, n_hat = a.shape[1], b.shape[1]
    a = a.astype(np.int64)
    b = b.astype(np.int64)
    # substitution costs, shape (n, n_hat)
    sub = np.abs(a[:, :, None] - b[:, None, :]).sum(axis=0)
    shift = np.arange(n_hat + 1, dtype=np.int64) * m
    prev = shift.copy()
    for i in range(1, n + 1):
        diag = prev[:-1] + sub[i - 1]
        np.minimum(diag, prev[1:] + m, out=diag)
        # cur[j] = min(diag[j-1], cur[j-1] + m) via a prefix min of cur[j] - j*m
        slack = np.minimum.accumulate(
            np.concatenate(([np.int64(i * m)], diag - shift[1:]))
        )
        prev = slack + shift
    return int(prev[n_hat])


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation summary: per-instrument P/R/F, pooled totals, and TER."""

    scores: dict[str, InstrumentScores]
    ter: int
    gt_tatums: int
    num_pieces: int

    @property
    def ter_per_tatum(self) -> float:
        return self.ter / self.gt_tatums if self.gt_tatums else 0.0

    def to_dict(self) -> dict:
        return {
            "num_pieces": self.num_pieces,
            "scores": {k: v.to_dict() for k, v in self.scores.items()},
            "ter": self.ter,
            "gt_tatums": self.gt_tatums,
            "ter_per_tatum": self.ter_per_tatum,
        }

    def to_table(self) -> str:
        cols = list(INSTRUMENTS) + ["total"]
        header = f"{'':>12}" + "".join(f"{c:>8}" for c in cols)
        lines = [header]
        for label, attr in (("Precision", "precision"), ("Recall", "recall"),
                            ("F-measure", "f_measure")):
            row = f"{label:>12}"
            for c in cols:
                row += f"{getattr(self.scores[c], attr):8.1f}"
            lines.append(row)
        lines.append(f"{'TER':>12}{self.ter:8d}    (per tatum: {self.ter_per_tatum:.4f})")
        return "\n".join(lines)

    def save(self, json_path, text_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        if text_path is not None:
            Path(text_path).write_text(self.to_table() + "\n")


@dataclass(frozen=True)
class PieceEval:
    """One piece's estimated and reference material."""

    est_onsets: list[OnsetEvent]
    gt_onsets: list[OnsetEvent]
    est_score: DrumScore
    gt_score: DrumScore


def corpus_metrics(
    pieces: list[PieceEval], tolerance: float = DEFAULT_TOLERANCE
) -> MetricsReport:
    """Pool onsets across pieces before computing P/R/F; sum TER over
    piece-wise alignments (pieces are never aligned against each other)."""
    if not pieces:
        raise ValidationError("cannot evaluate an empty corpus")
    counts = {name: [0, 0, 0] for name in list(INSTRUMENTS) + ["total"]}
    total_ter = 0
    gt_tatums = 0
    for piece in pieces:
        scores = f_measure(piece.est_onsets, piece.gt_onsets, tolerance)
        for name, sc in scores.items():
            counts[name][0] += sc.n_est
            counts[name][1] += sc.n_gt
            counts[name][2] += sc.n_correct
        total_ter += ter(piece.gt_score, piece.est_score)
        gt_tatums += piece.gt_score.num_tatums
    pooled = {name: InstrumentScores(*vals) for name, vals in counts.items()}
    return MetricsReport(pooled, total_ter, gt_tatums, len(pieces))
