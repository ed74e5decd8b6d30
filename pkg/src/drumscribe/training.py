"""Regularized supervised training of the transcription models.

The objective is a per-instrument-weighted cross entropy on the onset
probabilities plus, optionally, a pretrained language model's score of
a relaxed binarization of those probabilities.  The relaxation uses the
Gumbel-sigmoid trick so the whole objective stays differentiable; the
language model itself is frozen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError
from .features import MelFeature
from .score import DrumScore, NUM_INSTRUMENTS, TatumGrid
from .transcriber import TranscriptionModel, tatum_pool

_PHI_EPS = 1e-7


@dataclass(frozen=True)
class TrainingConfig:
    """Knobs of the regularized training protocol."""

    beta: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gamma: float = 0.0
    tau: float = 0.2
    batch_size: int = 10
    max_len: int = 256
    base_lr: float = 1e-3
    warmup_steps: int = 4000
    lr_scale: float = 1.0
    weight_decay: float = 1e-4
    specaugment: bool = False
    specaugment_rate: float = 0.15
    threshold: float = 0.2
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if len(self.beta) != NUM_INSTRUMENTS or any(b <= 0 for b in self.beta):
            raise ValidationError("beta needs one positive weight per instrument")
        if self.gamma < 0:
            raise ValidationError("gamma must be non-negative")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        data = dict(data)
        if "beta" in data:
            data["beta"] = tuple(data["beta"])
        return cls(**data)


def transcription_loss(phi: torch.Tensor, y: torch.Tensor, beta) -> torch.Tensor:
    """Weighted cross entropy, natural log, summed over all cells.

    ``phi`` and ``y`` are (M, N); ``beta`` weights the onset term of each
    instrument.  Probabilities are clamped away from exact 0/1.
    """
    if phi.shape != y.shape:
        raise ValidationError(f"shape mismatch: phi {tuple(phi.shape)} vs y {tuple(y.shape)}")
    beta_t = torch.as_tensor(beta, dtype=phi.dtype, device=phi.device)
    if beta_t.numel() != phi.shape[0]:
        raise ValidationError("need one beta weight per instrument row")
    p = phi.clamp(_PHI_EPS, 1.0 - _PHI_EPS)
    y = y.to(phi.dtype)
    cell = beta_t[:, None] * y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)
    return -cell.sum()


def gumbel_sigmoid(
    phi: torch.Tensor,
    tau: float = 0.2,
    generator: torch.Generator | None = None,
    noise: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Differentiable relaxed binarization of onset probabilities.

    Adds the difference of two Gumbel variates to phi and squashes at
    temperature tau.  Pass ``noise`` (two uniform draws) to freeze the
    randomness, e.g. for gradient checks.  The output is clamped just
    inside (0, 1); saturated sigmoids would otherwise round onto the
    boundary in floating point.
    """
    if tau <= 0:
        raise ValidationError("tau must be positive")
    if noise is None:
        u1 = torch.rand(phi.shape, generator=generator, dtype=phi.dtype)
        u2 = torch.rand(phi.shape, generator=generator, dtype=phi.dtype)
    else:
        u1, u2 = noise
    u1 = u1.clamp_min(1e-12)
    u2 = u2.clamp_min(1e-12)
    psi1 = -torch.log(-torch.log(u1))
    psi2 = -torch.log(-torch.log(u2))
    out = torch.sigmoid((phi + psi1 - psi2) / tau)
    return out.clamp(1e-6, 1.0 - 1e-6)


def regularizer(y_hat: torch.Tensor, lm) -> torch.Tensor:
    """Language-model bits of a relaxed score (the model stays frozen)."""
    if y_hat.shape[0] != NUM_INSTRUMENTS:
        raise ValidationError(
            f"relaxed score must have {NUM_INSTRUMENTS} instrument rows, "
            f"got {tuple(y_hat.shape)}"
        )
    return lm.relaxed_nll_bits(y_hat)


def total_loss(
    phi: torch.Tensor,
    y: torch.Tensor,
    y_hat: torch.Tensor | None,
    lm,
    cfg: TrainingConfig,
) -> torch.Tensor:
    """Transcription loss plus gamma times the regularizer.  With
    gamma = 0 the transcription loss is returned untouched."""
    loss = transcription_loss(phi, y, cfg.beta)
    if cfg.gamma > 0.0:
        if lm is None or y_hat is None:
            raise ValidationError("gamma > 0 requires a language model and a relaxed score")
        loss = loss + cfg.gamma * regularizer(y_hat, lm)
    return loss


def lr_schedule(step: int, d_model: int, warmup_steps: int, scale: float = 1.0) -> float:
    """Inverse-square-root schedule with linear warmup; peaks at
    scale / sqrt(d_model * warmup_steps) when step == warmup_steps."""
    if step < 1:
        raise ValidationError("schedule steps start at 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


def centered_window(best: int, total: int, size: int = 10) -> tuple[int, int]:
    """Index range [start, stop) of ``size`` checkpoints centered on the
    best epoch (five before through four after), shifted to stay within
    the history when the best epoch sits near an edge."""
    if total < 1:
        raise ValidationError("empty checkpoint history")
    if not (0 <= best < total):
        raise ValidationError(f"best epoch {best} outside history of {total}")
    size = min(size, total)
    start = best - size // 2
    start = max(0, min(start, total - size))
    return start, start + size


def average_checkpoints(states: list[dict]) -> dict:
    """Arithmetic mean of parameter snapshots; integer buffers (e.g.
    batch-norm step counters) are taken from the last snapshot."""
    if not states:
        raise ValidationError("no checkpoints to average")
    out = {}
    for key in states[0]:
        tensors = [s[key] for s in states]
        if tensors[0].is_floating_point():
            out[key] = torch.stack([t.double() for t in tensors]).mean(dim=0).to(tensors[0].dtype)
        else:
            out[key] = tensors[-1].clone()
    return out


def select_and_average(states: list[dict], best: int, size: int = 10) -> dict:
    start, stop = centered_window(best, len(states), size)
    return average_checkpoints(states[start:stop])


def tatum_specaugment(
    feature: MelFeature, grid: TatumGrid, rate: float, rng: np.random.Generator
) -> MelFeature:
    """Zero the frames of floor(rate * N) randomly chosen tatums.  The
    zeroed frame ranges are exactly the tatum pooling windows."""
    if not (0.0 <= rate <= 1.0):
        raise ValidationError("mask rate must lie in [0, 1]")
    windows = grid.pooling_windows()
    k = int(math.floor(rate * len(windows)))
    if k == 0:
        return feature
    chosen = rng.choice(len(windows), size=k, replace=False)
    values = feature.values.copy()
    for n in sorted(chosen.tolist()):
        lo, hi = windows[n]
        values[:, :, lo:hi] = 0.0
    return MelFeature(values, feature.channels, feature.frame_rate)


@dataclass
class TrainPiece:
    """One training example: features, its tatum grid, and the target."""

    feature: MelFeature
    grid: TatumGrid
    score: DrumScore

    def __post_init__(self):
        if self.score.num_tatums != self.grid.num_tatums:
            raise ValidationError(
                f"score has {self.score.num_tatums} tatums, grid has {self.grid.num_tatums}"
            )


def chunk_piece(piece: TrainPiece, max_len: int) -> list[TrainPiece]:
    """Split into non-overlapping runs of at most ``max_len`` tatums;
    each chunk's features cover exactly its tatums' pooling windows."""
    n = piece.grid.num_tatums
    if n <= max_len:
        return [piece]
    windows = piece.grid.pooling_windows()
    chunks = []
    for start in range(0, n, max_len):
        stop = min(start + max_len, n)
        lo = windows[start][0]
        hi = windows[stop - 1][1]
        values = piece.feature.values[:, :, lo:hi]
        feature = MelFeature(values, piece.feature.channels, piece.feature.frame_rate)
        grid = TatumGrid(
            piece.grid.times[start:stop] - lo / piece.grid.frame_rate,
            piece.grid.frame_rate,
        )
        score = DrumScore(piece.score.activations[:, start:stop])
        chunks.append(TrainPiece(feature, grid, score))
    return chunks


def _decay_param_groups(model: torch.nn.Module, weight_decay: float) -> list[dict]:
    """Weight decay on weight matrices only; biases and normalization
    gains are excluded."""
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim <= 1 or name.endswith(".bias"):
            no_decay.append(param)
        else:
            decay.append(param)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


@dataclass
class TrainResult:
    best_epoch: int
    val_losses: list[float]
    steps: int


def train_transcriber(
    model: TranscriptionModel,
    train_pieces: list[TrainPiece],
    val_pieces: list[TrainPiece],
    cfg: TrainingConfig,
    lm=None,
    log=None,
    checkpoint_dir=None,
    stop_check=None,
) -> TrainResult:
    """Full training loop: warmup-scheduled AdamW for the self-attention
    decoder (flat base rate for the BiGRU), per-epoch validation, and a
    final load of the averaged checkpoints around the best epoch.

    ``log`` receives one dict per optimization step and per validation.
    ``stop_check(model, epoch)`` may end training early (e.g. a target
    metric was reached); checkpoint averaging still applies.
    """
    if not train_pieces:
        raise ValidationError("no training pieces")
    if cfg.gamma > 0 and lm is None:
        raise ValidationError("gamma > 0 requires a pretrained language model")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    aug_rng = np.random.default_rng(cfg.seed)

    if lm is not None and isinstance(lm, torch.nn.Module):
        lm.eval()
        for p in lm.parameters():
            p.requires_grad_(False)

    use_schedule = model.config.get("kind") == "selfatt"
    if use_schedule:
        chunks = []
        for piece in train_pieces:
            chunks.extend(chunk_piece(piece, cfg.max_len))
        train_set = chunks
    else:
        train_set = list(train_pieces)

    onset_rate = (
        sum(int(p.score.activations.sum()) for p in train_pieces)
        / sum(p.score.activations.size for p in train_pieces)
    )
    model.init_onset_bias(onset_rate)

    opt = torch.optim.AdamW(
        _decay_param_groups(model, cfg.weight_decay), lr=cfg.base_lr
    )
    d_model = model.config["d_f"]

    def run_piece(piece: TrainPiece, training: bool) -> tuple[torch.Tensor, dict]:
        feature = piece.feature
        if training and cfg.specaugment:
            feature = tatum_specaugment(feature, piece.grid, cfg.specaugment_rate, aug_rng)
        x = torch.tensor(feature.values)[None]
        phi, _ = model(x, piece.grid)
        phi = phi[0].T  # (M, N)
        y = torch.as_tensor(piece.score.activations.astype(np.float32))
        tran = transcription_loss(phi, y, cfg.beta)
        parts = {"tran_loss": float(tran.detach())}
        loss = tran
        if cfg.gamma > 0.0:
            y_hat = gumbel_sigmoid(phi, cfg.tau, generator=gen)
            reg = regularizer(y_hat, lm)
            parts["reg_loss"] = float(reg.detach())
            loss = loss + cfg.gamma * reg
        return loss, parts

    states: list[dict] = []
    val_losses: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(train_set), generator=gen).tolist()
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            step += 1
            if use_schedule:
                rate = lr_schedule(step, d_model, cfg.warmup_steps, cfg.lr_scale)
            else:
                rate = cfg.base_lr
            for group in opt.param_groups:
                group["lr"] = rate
            opt.zero_grad()
            tally: dict[str, float] = {}
            for piece in batch:
                loss, parts = run_piece(piece, training=True)
                (loss / len(batch)).backward()
                for k, v in parts.items():
                    tally[k] = tally.get(k, 0.0) + v / len(batch)
            opt.step()
            if log is not None:
                entry = {"step": step, "epoch": epoch, "lr": rate, **tally}
                entry["loss"] = tally["tran_loss"] + cfg.gamma * tally.get("reg_loss", 0.0)
                log(entry)

        model.eval()
        with torch.no_grad():
            val = 0.0
            for piece in (val_pieces or train_pieces):
                x = torch.tensor(piece.feature.values)[None]
                phi, _ = model(x, piece.grid)
                y = torch.as_tensor(piece.score.activations.astype(np.float32))
                val += float(transcription_loss(phi[0].T, y, cfg.beta))
            val /= len(val_pieces or train_pieces)
        val_losses.append(val)
        if log is not None:
            log({"epoch": epoch, "val_loss": val})
        states.append({k: v.detach().clone() for k, v in model.state_dict().items()})
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch_{epoch:03d}.pt"
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(states[-1], path)
        if stop_check is not None and stop_check(model, epoch):
            break

    best = int(np.argmin(val_losses))
    model.load_state_dict(select_and_average(states, best))
    model.eval()
    return TrainResult(best_epoch=best, val_losses=val_losses, steps=step)
